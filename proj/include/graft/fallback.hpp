#ifndef GRAFT_FALLBACK_HPP
#define GRAFT_FALLBACK_HPP

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "graft/corpus.hpp"
#include "graft/numerics.hpp"

namespace graft {

// Multi-head n-gram hashing scheme. z = hash_ids(seed_{n,k}, ids) mod table_size,
// with hash_ids/mix64 from hashmix.hpp; deterministic across platforms and
// thread counts. Seeds are derived per (order, head) from one master seed.
struct HashScheme {
    std::vector<int> orders;  // default {2,3}
    int heads = 8;
    uint32_t table_size = 112865;  // V'
    std::vector<uint64_t> seeds;   // |orders| * heads, row-major (order, head)

    static HashScheme make(std::vector<int> orders, int heads, uint32_t table_size,
                           uint64_t master_seed);

    uint64_t seed(std::size_t order_idx, int head) const {
        return seeds[order_idx * static_cast<std::size_t>(heads) + static_cast<std::size_t>(head)];
    }
    int max_order() const;
};

uint32_t hash_ngram(std::span<const uint32_t> ids, const HashScheme& scheme,
                    std::size_t order_idx, int head);

// Trainable embedding tables E_{n,k}, each (table_size x d_sub), with
// d_sub = d_fallback / (|orders| * heads).
struct FallbackTables {
    uint32_t d_sub = 0;
    uint32_t d_fallback = 0;
    std::vector<Matrix> tables;  // |orders| * heads, row-major (order, head)

    // Seeded uniform init in [-1/sqrt(d_sub), +1/sqrt(d_sub)]. Throws if
    // d_fallback is not divisible by |orders| * heads.
    static FallbackTables init(const HashScheme& scheme, uint32_t d_fallback,
                               uint64_t seed);

    Matrix& table(std::size_t order_idx, int head, int heads) {
        return tables[order_idx * static_cast<std::size_t>(heads) + static_cast<std::size_t>(head)];
    }
};

// Rows addressed by one retrieval, needed for the sparse backward pass.
struct FallbackAddress {
    std::vector<uint32_t> rows;  // one z per (order, head), concat order
};

// e_hash for the context suffix ending at the query position: concatenation
// over ascending orders then ascending heads of E_{n,k}[z]. An order whose
// suffix is unavailable near a document start contributes its reserved row 0.
Vector fallback_retrieve(std::span<const uint32_t> suffix, const HashScheme& scheme,
                         const FallbackTables& tables, FallbackAddress* address = nullptr);

// Sparse gradients: per table, touched row -> accumulated row gradient.
struct FallbackGrads {
    std::vector<std::map<uint32_t, Vector>> per_table;
};

// Accumulates d(e_hash) onto the rows recorded in `address`. The record must
// come from the matching forward call: de_hash splits into |address.rows|
// slices of equal width.
void fallback_grad(const Vector& de_hash, const FallbackAddress& address,
                   FallbackGrads& grads);

// All z-indices for every position of `seq`, flattened (position-major, then
// order, then head). Sharded over `num_threads`; output is independent of the
// shard count.
std::vector<uint32_t> batch_hash_indices(const TokenSequence& seq, const HashScheme& scheme,
                                         unsigned num_threads = 1);

}  // namespace graft

#endif
