#ifndef GRAFT_CONFIG_HPP
#define GRAFT_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "graft/float16.hpp"
#include "graft/layer.hpp"

namespace graft {

// Flat run configuration. Every key can come from a key=value config file
// and be overridden by a --key value CLI flag; the effective config is
// echoed into every output artifact header.
struct RunConfig {
    uint32_t vocab_size = 65536;
    std::vector<int> orders_bank = {2, 3, 4};
    std::vector<int> orders_fallback = {2, 3};
    std::size_t k_per_order = 1000;
    std::size_t dim = 64;           // D
    std::size_t d_mem = 128;        // frozen memory row width
    std::size_t d_fallback = 384;   // hashed fallback feature width
    std::size_t branches = 1;       // C
    int heads = 8;                  // fallback hash heads per order
    uint32_t table_size = 112865;   // V'
    std::size_t ksize = 4;
    std::string provider = "synthetic:1";
    uint64_t seed = 1;
    std::string mode = "longest_gated_fallback";
    std::string dtype = "bf16";  // bf16 | f16
    unsigned threads = 1;

    static RunConfig from_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
    void validate() const;

    StorageDtype storage_dtype() const;
    GraftMode graft_mode() const;

    // "key=value" lines in a fixed key order, for artifact headers.
    std::string echo(const std::string& line_prefix) const;
};

std::vector<int> parse_order_list(const std::string& s);

}  // namespace graft

#endif
