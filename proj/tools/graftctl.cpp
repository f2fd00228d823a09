// graftctl: operator surface for the memory-grafting pipeline.
//   count -> build-bank -> lookup/bench -> graft/gradcheck -> diagnose

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "graft/bank.hpp"
#include "graft/config.hpp"
#include "graft/corpus.hpp"
#include "graft/diagnostics.hpp"
#include "graft/fallback.hpp"
#include "graft/gradcheck.hpp"
#include "graft/hashmix.hpp"
#include "graft/layer.hpp"

namespace {

using namespace graft;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

struct ConfigCli {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "flat key=value config file");
        static const char* keys[] = {"vocab_size", "orders_bank", "orders_fallback",
                                     "k_per_order", "dim", "d_mem", "d_fallback",
                                     "branches", "heads", "table_size", "ksize",
                                     "provider", "seed", "mode", "dtype", "threads"};
        for (const char* key : keys) {
            cmd->add_option_function<std::string>(
                std::string("--") + key,
                [this, key](const std::string& v) { overrides.emplace_back(key, v); },
                std::string("override config key ") + key);
        }
    }

    RunConfig resolve() const {
        RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
        for (const auto& [k, v] : overrides) cfg.set(k, v);
        cfg.validate();
        return cfg;
    }
};

CorpusFormat parse_format(const std::string& s) {
    if (s == "text") return CorpusFormat::TextInt;
    if (s == "bin") return CorpusFormat::BinaryU32;
    throw std::runtime_error("unknown corpus format: " + s + " (expected text|bin)");
}

std::unique_ptr<EmbeddingProvider> make_provider(const RunConfig& cfg) {
    if (cfg.provider.rfind("synthetic:", 0) == 0) {
        const uint64_t seed = std::stoull(cfg.provider.substr(10));
        return std::make_unique<SyntheticProvider>(seed, static_cast<uint32_t>(cfg.d_mem));
    }
    return std::make_unique<FileProvider>(FileProvider::load(cfg.provider.substr(5)));
}

std::string key_ids_str(const NgramKey& key) {
    std::string s;
    for (int i = 0; i < key.order; ++i) {
        if (i) s += ',';
        s += std::to_string(key.ids[i]);
    }
    return s;
}

// counts artifact: "# graftmem counts v1", config echo, then "n:ids:count"
// lines ordered by (order asc, count desc, ids lex asc).
void write_counts(std::ostream& out, const RunConfig& cfg, const NgramCountTable& table) {
    out << "# graftmem counts v1\n" << cfg.echo("# ");
    std::vector<std::pair<NgramKey, uint64_t>> entries(table.counts.begin(), table.counts.end());
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.first.order != b.first.order) return a.first.order < b.first.order;
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (const auto& [key, count] : entries) {
        out << static_cast<int>(key.order) << ':' << key_ids_str(key) << ':' << count << '\n';
    }
}

struct CountsFile {
    // per line, in file order (already frequency-sorted per order)
    std::vector<std::pair<NgramKey, uint64_t>> entries;
};

CountsFile read_counts(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open counts file: " + path);
    CountsFile cf;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto c1 = line.find(':');
        const auto c2 = line.rfind(':');
        if (c1 == std::string::npos || c2 == c1) {
            throw std::runtime_error("counts line " + std::to_string(lineno) + ": bad format");
        }
        std::vector<int> dummy;
        std::vector<uint32_t> ids;
        for (int v : parse_order_list(line.substr(c1 + 1, c2 - c1 - 1))) {
            ids.push_back(static_cast<uint32_t>(v));
        }
        const int order = std::stoi(line.substr(0, c1));
        if (static_cast<int>(ids.size()) != order) {
            throw std::runtime_error("counts line " + std::to_string(lineno) + ": order mismatch");
        }
        cf.entries.emplace_back(NgramKey::from(ids), std::stoull(line.substr(c2 + 1)));
    }
    return cf;
}

std::ostream& open_out(std::ofstream& file, const std::string& path) {
    if (path.empty() || path == "-") return std::cout;
    file.open(path, std::ios::trunc);
    if (!file) throw std::runtime_error("cannot open output file: " + path);
    return file;
}

// ----------------------------------------------------------------- commands

int cmd_count(const ConfigCli& ccli, const std::string& corpus, const std::string& format,
              const std::string& pmap_path, const std::string& out_path) {
    const RunConfig cfg = ccli.resolve();
    TokenSequence seq = ingest_corpus(corpus, parse_format(format), cfg.vocab_size);
    const CompressionMap pmap =
        pmap_path.empty() ? CompressionMap::identity() : CompressionMap::load(pmap_path);
    seq = compress(seq, pmap);
    const NgramCountTable table = count_ngrams(seq, cfg.orders_bank, cfg.threads);
    std::ofstream file;
    write_counts(open_out(file, out_path), cfg, table);
    return kExitOk;
}

int cmd_build_bank(const ConfigCli& ccli, const std::string& counts_path,
                   const std::string& out_path, uint32_t source_layer) {
    const RunConfig cfg = ccli.resolve();
    const CountsFile cf = read_counts(counts_path);
    std::vector<std::vector<NgramKey>> keys;
    bool truncated = false;
    for (int n : cfg.orders_bank) {
        auto& list = keys.emplace_back();
        for (const auto& [key, count] : cf.entries) {
            if (key.order == n && list.size() < cfg.k_per_order) list.push_back(key);
        }
        if (list.size() < cfg.k_per_order) truncated = true;
    }
    if (truncated) {
        std::cerr << "warning: fewer than k_per_order keys for some order; using all\n";
    }
    const auto provider = make_provider(cfg);
    const MemoryBank bank =
        MemoryBank::build(keys, *provider, cfg.storage_dtype(), source_layer);
    bank.write(out_path);
    const BankStats stats = bank.stats();
    std::cout << "bank_entries=" << stats.entries << '\n';
    for (const auto& [n, c] : stats.per_order) {
        std::cout << "order_" << n << "_entries=" << c << '\n';
    }
    std::cout << "d_mem=" << stats.d_mem << '\n'
              << "row_bytes=" << stats.row_bytes << '\n'
              << "total_bytes=" << stats.total_bytes << '\n';
    return kExitOk;
}

int cmd_lookup(const ConfigCli& ccli, const std::string& bank_path, const std::string& corpus,
               const std::string& format, const std::string& out_path) {
    const RunConfig cfg = ccli.resolve();
    const MemoryBank bank = MemoryBank::read(bank_path);
    const TokenSequence seq = ingest_corpus(corpus, parse_format(format), cfg.vocab_size);
    const auto results = bank.batch_lookup(seq);

    std::size_t hits = 0;
    std::vector<std::size_t> per_order(kMaxNgramOrder + 1, 0);
    uint64_t digest = 0xCBF29CE484222325ULL;
    for (const LookupResult& r : results) {
        if (r.hit) {
            ++hits;
            ++per_order[static_cast<std::size_t>(r.matched_order)];
        }
        const uint64_t word = r.hit ? (r.row << 8) | static_cast<uint64_t>(r.matched_order) : 0;
        digest = fnv1a64(&word, sizeof(word), digest);
    }
    const HashScheme scheme =
        HashScheme::make(cfg.orders_fallback, cfg.heads, cfg.table_size, cfg.seed);
    const auto z = batch_hash_indices(seq, scheme, cfg.threads);
    const uint64_t z_digest = fnv1a64(z.data(), z.size() * sizeof(uint32_t));

    std::ofstream file;
    std::ostream& out = open_out(file, out_path);
    out << "# graftmem lookup v1\n" << cfg.echo("# ");
    out << "positions=" << results.size() << '\n';
    out << "hits=" << hits << '\n';
    out << "hit_fraction=" << std::setprecision(17) << (results.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(results.size())) << '\n';
    for (int n : bank.orders()) out << "hits_order_" << n << '=' << per_order[static_cast<std::size_t>(n)] << '\n';
    out << "lookup_digest=" << std::hex << digest << '\n';
    out << "fallback_digest=" << z_digest << std::dec << '\n';
    return kExitOk;
}

int cmd_bench(const ConfigCli& ccli, const std::string& bank_path, const std::string& corpus,
              const std::string& format, int passes, const std::string& out_path) {
    const RunConfig cfg = ccli.resolve();
    const MemoryBank bank = MemoryBank::read(bank_path);
    const TokenSequence seq = ingest_corpus(corpus, parse_format(format), cfg.vocab_size);

    std::size_t hits = 0;
    double best_ns = 1e300;
    for (int p = 0; p < passes; ++p) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto results = bank.batch_lookup(seq);
        const auto t1 = std::chrono::steady_clock::now();
        hits = 0;
        for (const LookupResult& r : results) hits += r.hit ? 1 : 0;
        const double ns = static_cast<double>(
                              std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()) /
                          static_cast<double>(results.size());
        best_ns = std::min(best_ns, ns);
    }

    std::ofstream file;
    std::ostream& out = open_out(file, out_path);
    out << "# graftmem bench v1\n" << cfg.echo("# ");
    out << "[result]\n";
    out << "bank_entries=" << bank.entry_count() << '\n';
    out << "positions=" << seq.ids.size() << '\n';
    out << "hits=" << hits << '\n';
    out << "hit_fraction=" << std::setprecision(17)
        << static_cast<double>(hits) / static_cast<double>(seq.ids.size()) << '\n';
    out << "[timing]\n";
    out << "per_token_ns=" << best_ns << '\n';
    return kExitOk;
}

int cmd_graft(const ConfigCli& ccli, const std::string& corpus, const std::string& format,
              const std::string& bank_path, int steps, double lr) {
    const RunConfig cfg = ccli.resolve();
    const MemoryBank bank = MemoryBank::read(bank_path);
    const TokenSequence full = ingest_corpus(corpus, parse_format(format), cfg.vocab_size);

    // Demo instance: up to 2 batch rows of up to 16 tokens each.
    const std::size_t T = std::min<std::size_t>(16, full.doc_end(0) - full.doc_begin(0));
    TokenSequence seq;
    for (std::size_t d = 0; d < full.doc_count() && seq.doc_count() < 2; ++d) {
        if (full.doc_end(d) - full.doc_begin(d) < T) continue;
        seq.doc_starts.push_back(seq.ids.size());
        seq.ids.insert(seq.ids.end(), full.ids.begin() + static_cast<std::ptrdiff_t>(full.doc_begin(d)),
                       full.ids.begin() + static_cast<std::ptrdiff_t>(full.doc_begin(d) + T));
    }
    if (seq.doc_count() == 0) throw std::runtime_error("no document long enough for demo");
    const std::size_t B = seq.doc_count();

    GraftLayerParams params = GraftLayerParams::init(cfg.dim, bank.d_mem(), cfg.d_fallback,
                                                     cfg.branches, cfg.ksize, cfg.graft_mode(),
                                                     cfg.seed);
    const HashScheme scheme =
        HashScheme::make(cfg.orders_fallback, cfg.heads, cfg.table_size, cfg.seed);
    FallbackTables tables =
        FallbackTables::init(scheme, static_cast<uint32_t>(cfg.d_fallback), cfg.seed + 1);
    const bool use_tables = cfg.graft_mode() == GraftMode::LongestGatedFallback;

    // Seeded hidden block and a fixed random regression target over the output.
    uint64_t ctr = mix64(cfg.seed ^ 0x64656D6FULL);
    HiddenBlock hidden(B, T, cfg.branches, cfg.dim);
    for (double& v : hidden.data) v = 2.0 * (static_cast<double>(mix64(ctr++) >> 11) * 0x1.0p-53) - 1.0;
    HiddenBlock target = hidden;
    for (double& v : target.data) v = 2.0 * (static_cast<double>(mix64(ctr++) >> 11) * 0x1.0p-53) - 1.0;

    const double inv_n = 1.0 / static_cast<double>(hidden.data.size());
    for (int step = 0; step <= steps; ++step) {
        const auto fwd =
            graft_forward(hidden, seq, &bank, &scheme, use_tables ? &tables : nullptr, params);
        double loss = 0.0;
        HiddenBlock dh_out = fwd.h_out;
        for (std::size_t i = 0; i < fwd.h_out.data.size(); ++i) {
            const double diff = fwd.h_out.data[i] - target.data[i];
            loss += 0.5 * diff * diff * inv_n;
            dh_out.data[i] = diff * inv_n;
        }
        const auto probe = probe_gates(fwd.record);
        std::cout << "step=" << step << " loss=" << std::setprecision(10) << loss
                  << " hit_fraction=" << probe.hit_fraction << '\n';
        if (step == steps) break;
        const GraftGrads grads = graft_backward(fwd.record, params, dh_out);
        Vector theta = pack_params(params, use_tables ? &tables : nullptr);
        const Vector g = pack_grads(grads, params, use_tables ? &tables : nullptr);
        for (std::size_t i = 0; i < theta.dim(); ++i) theta[i] -= lr * g[i];
        unpack_params(theta, params, use_tables ? &tables : nullptr);
    }
    return kExitOk;
}

int cmd_gradcheck(const ConfigCli& ccli, int seeds) {
    const RunConfig cfg = ccli.resolve();
    std::string mode_arg = "all";
    for (const auto& [k, v] : ccli.overrides) {
        if (k == "mode") mode_arg = v;
    }
    std::vector<GraftMode> modes;
    if (mode_arg == "all") {
        modes = {GraftMode::AttnOnly, GraftMode::AttnGated, GraftMode::LongestGated,
                 GraftMode::LongestGatedFallback};
    } else {
        const auto m = mode_from_name(mode_arg);
        if (!m) throw std::runtime_error("unknown mode: " + mode_arg);
        modes = {*m};
    }
    bool ok = true;
    for (GraftMode m : modes) {
        double worst = 0.0;
        for (int s = 0; s < seeds; ++s) {
            worst = std::max(worst, layer_gradcheck(m, cfg.seed + static_cast<uint64_t>(s)));
        }
        std::cout << "mode=" << mode_name(m) << " max_rel_error=" << std::setprecision(6)
                  << worst << '\n';
        ok = ok && worst <= 1e-4;
    }
    return ok ? kExitOk : kExitInternal;
}

Matrix read_matrix_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open matrix file: " + path);
    std::size_t rows, cols;
    if (!(in >> rows >> cols)) throw std::runtime_error("matrix header malformed in " + path);
    Matrix m(rows, cols);
    for (double& v : m.data) {
        if (!(in >> v)) throw std::runtime_error("matrix data truncated in " + path);
    }
    return m;
}

int cmd_diagnose(const ConfigCli& ccli, const std::string& bank_path, const std::string& corpus,
                 const std::string& format, const std::string& counts_path,
                 const std::string& checkpoints_arg, const std::string& curve_out,
                 const std::vector<std::string>& cka_a, const std::vector<std::string>& cka_b,
                 const std::string& json_out) {
    const RunConfig cfg = ccli.resolve();
    nlohmann::json report;
    report["config"] = nlohmann::json::object();
    {
        std::istringstream echo(cfg.echo(""));
        std::string line;
        while (std::getline(echo, line)) {
            const auto eq = line.find('=');
            report["config"][line.substr(0, eq)] = line.substr(eq + 1);
        }
    }

    if (!bank_path.empty()) {
        const MemoryBank bank = MemoryBank::read(bank_path);
        const GeometryReport g = geometry(bank, GeometrySampleSizes{}, cfg.seed);
        std::cout << std::setprecision(10);
        std::cout << "effective_rank=" << g.effective_rank << '\n'
                  << "pc1_fraction=" << g.pc1_fraction << '\n'
                  << "norm_mean=" << g.norm_mean << '\n'
                  << "norm_std=" << g.norm_std << '\n'
                  << "norm_cv=" << g.norm_cv << '\n'
                  << "nn_cosine_mean=" << g.nn_cosine_mean << '\n'
                  << "nn_cosine_p95=" << g.nn_cosine_p95 << '\n'
                  << "geometry_seed=" << g.seed << '\n';
        if (g.clamped) std::cerr << "warning: sample size clamped to bank size\n";
        report["geometry"] = {{"effective_rank", g.effective_rank},
                              {"pc1_fraction", g.pc1_fraction},
                              {"norm_mean", g.norm_mean},
                              {"norm_std", g.norm_std},
                              {"norm_cv", g.norm_cv},
                              {"nn_cosine_mean", g.nn_cosine_mean},
                              {"nn_cosine_p95", g.nn_cosine_p95},
                              {"seed", g.seed},
                              {"clamped", g.clamped}};
    }

    if (!corpus.empty() && !counts_path.empty()) {
        const TokenSequence seq = ingest_corpus(corpus, parse_format(format), cfg.vocab_size);
        const CountsFile cf = read_counts(counts_path);
        // Merge per-order frequency-ordered lists into one descending-count list.
        std::vector<std::pair<NgramKey, uint64_t>> merged = cf.entries;
        std::stable_sort(merged.begin(), merged.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        std::vector<NgramKey> ordered;
        ordered.reserve(merged.size());
        for (const auto& [k, c] : merged) ordered.push_back(k);
        std::vector<std::size_t> checkpoints;
        for (int v : parse_order_list(checkpoints_arg.empty() ? "0" : checkpoints_arg)) {
            checkpoints.push_back(static_cast<std::size_t>(v));
        }
        const HitRateCurve curve = hit_rate_curve(seq, ordered, checkpoints);
        std::ofstream file;
        std::ostream& out = open_out(file, curve_out);
        out << "# graftmem hit-rate curve v1\n" << cfg.echo("# ") << "k,hit_rate\n";
        for (const auto& [k, rate] : curve.points) {
            out << k << ',' << std::setprecision(17) << rate << '\n';
        }
        for (const auto& [k, rate] : curve.points) {
            report["hit_rate_curve"].push_back({{"k", k}, {"hit_rate", rate}});
        }
    }

    if (!cka_a.empty() && !cka_b.empty()) {
        std::vector<Matrix> layers_a, layers_b;
        for (const auto& p : cka_a) layers_a.push_back(read_matrix_text(p));
        for (const auto& p : cka_b) layers_b.push_back(read_matrix_text(p));
        const CkaHeatmap hm = cka_heatmap(layers_a, layers_b);
        for (std::size_t a = 0; a < hm.grid.rows; ++a) {
            std::cout << "cka_row_" << a << '=';
            for (std::size_t b = 0; b < hm.grid.cols; ++b) {
                std::cout << (b ? "," : "") << std::setprecision(10) << hm.grid.at(a, b);
            }
            std::cout << '\n';
        }
        std::cout << "cka_argmax=";
        for (std::size_t a = 0; a < hm.argmax.size(); ++a) {
            std::cout << (a ? "," : "") << hm.argmax[a];
        }
        std::cout << '\n';
        for (std::size_t a = 0; a < hm.grid.rows; ++a) {
            nlohmann::json row = nlohmann::json::array();
            for (std::size_t b = 0; b < hm.grid.cols; ++b) row.push_back(hm.grid.at(a, b));
            report["cka"]["grid"].push_back(row);
        }
        report["cka"]["argmax"] = hm.argmax;
    }

    if (!json_out.empty()) {
        std::ofstream jf(json_out, std::ios::trunc);
        if (!jf) throw std::runtime_error("cannot open json output: " + json_out);
        jf << report.dump(2) << '\n';
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"memory-grafting pipeline tool"};
    app.require_subcommand(1);

    ConfigCli ccli;
    std::string corpus, format = "text", out_path, bank_path, counts_path, pmap_path;
    std::string checkpoints, curve_out = "-", json_out;
    std::vector<std::string> cka_a, cka_b;
    uint32_t source_layer = 0;
    int steps = 10, passes = 3, seeds = 5;
    double lr = 0.05;

    auto* count = app.add_subcommand("count", "count suffix n-grams of a corpus");
    count->add_option("corpus", corpus)->required();
    count->add_option("--format", format, "text|bin");
    count->add_option("--pmap", pmap_path, "vocabulary compression map file");
    count->add_option("--out", out_path, "counts output file");
    ccli.attach(count);

    auto* build = app.add_subcommand("build-bank", "build a frozen memory bank from counts");
    build->add_option("--counts", counts_path)->required();
    build->add_option("--out", out_path)->required();
    build->add_option("--source-layer", source_layer, "grafting source layer tag");
    ccli.attach(build);

    auto* lookup = app.add_subcommand("lookup", "batch longest-match lookup over a corpus");
    lookup->add_option("corpus", corpus)->required();
    lookup->add_option("--bank", bank_path)->required();
    lookup->add_option("--format", format, "text|bin");
    lookup->add_option("--out", out_path);
    ccli.attach(lookup);

    auto* bench = app.add_subcommand("bench", "lookup latency and hit-rate summary");
    bench->add_option("corpus", corpus)->required();
    bench->add_option("--bank", bank_path)->required();
    bench->add_option("--format", format, "text|bin");
    bench->add_option("--passes", passes);
    bench->add_option("--out", out_path);
    ccli.attach(bench);

    auto* graft_cmd = app.add_subcommand("graft", "toy end-to-end training demo");
    graft_cmd->add_option("corpus", corpus)->required();
    graft_cmd->add_option("--bank", bank_path)->required();
    graft_cmd->add_option("--format", format, "text|bin");
    graft_cmd->add_option("--steps", steps);
    graft_cmd->add_option("--lr", lr);
    ccli.attach(graft_cmd);

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gradcheck->add_option("--seeds", seeds);
    ccli.attach(gradcheck);

    auto* diagnose = app.add_subcommand("diagnose", "bank geometry, hit-rate curve, CKA");
    diagnose->add_option("--bank", bank_path);
    diagnose->add_option("--corpus", corpus);
    diagnose->add_option("--format", format, "text|bin");
    diagnose->add_option("--counts", counts_path);
    diagnose->add_option("--checkpoints", checkpoints, "comma-separated k values");
    diagnose->add_option("--curve-out", curve_out);
    diagnose->add_option("--cka-a", cka_a)->delimiter(',');
    diagnose->add_option("--cka-b", cka_b)->delimiter(',');
    diagnose->add_option("--json", json_out);
    ccli.attach(diagnose);

    try {
        app.parse(argc, argv);
        if (count->parsed()) return cmd_count(ccli, corpus, format, pmap_path, out_path);
        if (build->parsed()) return cmd_build_bank(ccli, counts_path, out_path, source_layer);
        if (lookup->parsed()) return cmd_lookup(ccli, bank_path, corpus, format, out_path);
        if (bench->parsed()) return cmd_bench(ccli, bank_path, corpus, format, passes, out_path);
        if (graft_cmd->parsed()) return cmd_graft(ccli, corpus, format, bank_path, steps, lr);
        if (gradcheck->parsed()) return cmd_gradcheck(ccli, seeds);
        if (diagnose->parsed()) {
            return cmd_diagnose(ccli, bank_path, corpus, format, counts_path, checkpoints,
                                curve_out, cka_a, cka_b, json_out);
        }
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kExitInternal;
    }
}
