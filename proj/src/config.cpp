#include "graft/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace graft {

std::vector<int> parse_order_list(const std::string& s) {
    std::vector<int> orders;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (part.empty()) continue;
        orders.push_back(std::stoi(part));
    }
    return orders;
}

namespace {

std::string order_list_str(const std::vector<int>& orders) {
    std::string s;
    for (int n : orders) {
        if (!s.empty()) s += ',';
        s += std::to_string(n);
    }
    return s;
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": expected key=value");
        }
        cfg.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key == "vocab_size") vocab_size = static_cast<uint32_t>(std::stoull(value));
    else if (key == "orders_bank") orders_bank = parse_order_list(value);
    else if (key == "orders_fallback") orders_fallback = parse_order_list(value);
    else if (key == "k_per_order") k_per_order = std::stoull(value);
    else if (key == "dim") dim = std::stoull(value);
    else if (key == "d_mem") d_mem = std::stoull(value);
    else if (key == "d_fallback") d_fallback = std::stoull(value);
    else if (key == "branches") branches = std::stoull(value);
    else if (key == "heads") heads = std::stoi(value);
    else if (key == "table_size") table_size = static_cast<uint32_t>(std::stoull(value));
    else if (key == "ksize") ksize = std::stoull(value);
    else if (key == "provider") provider = value;
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "mode") mode = value;
    else if (key == "dtype") dtype = value;
    else if (key == "threads") threads = static_cast<unsigned>(std::stoul(value));
    else throw std::runtime_error("unknown config key: " + key);
}

void RunConfig::validate() const {
    if (dim < 1 || d_mem < 1 || branches < 1 || ksize < 1 || heads < 1 || table_size < 1) {
        throw std::runtime_error("config: all dims must be >= 1");
    }
    for (int n : orders_bank) {
        if (n < 2 || n > kMaxNgramOrder) throw std::runtime_error("config: bank order out of range");
    }
    for (int n : orders_fallback) {
        if (n < 2 || n > kMaxNgramOrder) throw std::runtime_error("config: fallback order out of range");
    }
    const std::size_t slots = orders_fallback.size() * static_cast<std::size_t>(heads);
    if (slots == 0 || d_fallback % slots != 0) {
        throw std::runtime_error("config: d_fallback must be divisible by |orders_fallback| * heads");
    }
    if (!mode_from_name(mode)) throw std::runtime_error("config: unknown mode " + mode);
    if (dtype != "bf16" && dtype != "f16") throw std::runtime_error("config: dtype must be bf16 or f16");
    if (provider.rfind("synthetic:", 0) != 0 && provider.rfind("file:", 0) != 0) {
        throw std::runtime_error("config: provider must be synthetic:<seed> or file:<path>");
    }
}

StorageDtype RunConfig::storage_dtype() const {
    return dtype == "f16" ? StorageDtype::Float16 : StorageDtype::BFloat16;
}

GraftMode RunConfig::graft_mode() const {
    const auto m = mode_from_name(mode);
    if (!m) throw std::runtime_error("config: unknown mode " + mode);
    return *m;
}

std::string RunConfig::echo(const std::string& line_prefix) const {
    std::ostringstream out;
    out << line_prefix << "vocab_size=" << vocab_size << '\n';
    out << line_prefix << "orders_bank=" << order_list_str(orders_bank) << '\n';
    out << line_prefix << "orders_fallback=" << order_list_str(orders_fallback) << '\n';
    out << line_prefix << "k_per_order=" << k_per_order << '\n';
    out << line_prefix << "dim=" << dim << '\n';
    out << line_prefix << "d_mem=" << d_mem << '\n';
    out << line_prefix << "d_fallback=" << d_fallback << '\n';
    out << line_prefix << "branches=" << branches << '\n';
    out << line_prefix << "heads=" << heads << '\n';
    out << line_prefix << "table_size=" << table_size << '\n';
    out << line_prefix << "ksize=" << ksize << '\n';
    out << line_prefix << "provider=" << provider << '\n';
    out << line_prefix << "seed=" << seed << '\n';
    out << line_prefix << "mode=" << mode << '\n';
    out << line_prefix << "dtype=" << dtype << '\n';
    out << line_prefix << "threads=" << threads << '\n';
    return out.str();
}

}  // namespace graft
