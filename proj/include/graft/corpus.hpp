#ifndef GRAFT_CORPUS_HPP
#define GRAFT_CORPUS_HPP

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "graft/hashmix.hpp"

namespace graft {

inline constexpr int kMaxNgramOrder = 8;

// Suffix n-gram key: `order` compressed token ids, 2 <= order <= kMaxNgramOrder.
struct NgramKey {
    uint8_t order = 0;
    std::array<uint32_t, kMaxNgramOrder> ids{};

    static NgramKey from(std::span<const uint32_t> tuple);
    std::span<const uint32_t> span() const { return {ids.data(), order}; }

    bool operator==(const NgramKey& o) const {
        if (order != o.order) return false;
        for (int i = 0; i < order; ++i)
            if (ids[i] != o.ids[i]) return false;
        return true;
    }
    // Lexicographic on the id tuple; shorter orders first.
    bool operator<(const NgramKey& o) const {
        if (order != o.order) return order < o.order;
        for (int i = 0; i < order; ++i)
            if (ids[i] != o.ids[i]) return ids[i] < o.ids[i];
        return false;
    }
};

struct NgramKeyHash {
    std::size_t operator()(const NgramKey& k) const {
        return static_cast<std::size_t>(hash_ids(0x6772616674ULL ^ k.order, k.span()));
    }
};

// Pre-tokenized corpus: flat id stream plus document start offsets.
struct TokenSequence {
    std::vector<uint32_t> ids;
    std::vector<std::size_t> doc_starts;  // one entry per document

    std::size_t doc_count() const { return doc_starts.size(); }
    std::size_t doc_begin(std::size_t d) const { return doc_starts[d]; }
    std::size_t doc_end(std::size_t d) const {
        return d + 1 < doc_starts.size() ? doc_starts[d + 1] : ids.size();
    }
};

// Canonicalizing map P over token ids; identity where unlisted. Idempotent.
class CompressionMap {
  public:
    CompressionMap() = default;

    // Lines of "from to"; unlisted ids map to themselves. Validates idempotence.
    static CompressionMap load(const std::string& path);
    static CompressionMap identity() { return CompressionMap(); }

    void set(uint32_t from, uint32_t to);
    uint32_t apply(uint32_t id) const {
        auto it = table_.find(id);
        return it == table_.end() ? id : it->second;
    }
    void validate_idempotent() const;

  private:
    std::unordered_map<uint32_t, uint32_t> table_;
};

enum class CorpusFormat { TextInt, BinaryU32 };

// Parses a pre-tokenized corpus. text-int: whitespace-separated decimal ids,
// one document per line. binary-u32: u32 doc_count, doc_count u32 lengths,
// then the little-endian u32 id stream. Throws std::runtime_error with a
// byte offset on malformed input or id >= vocab_size.
TokenSequence ingest_corpus(const std::string& path, CorpusFormat format,
                            uint32_t vocab_size);

TokenSequence compress(const TokenSequence& seq, const CompressionMap& p);

struct NgramCountTable {
    // one map per order actually counted
    std::unordered_map<NgramKey, uint64_t, NgramKeyHash> counts;
};

// Exact suffix n-gram counts per order; n-grams never cross document
// boundaries. `num_threads` shards documents; the merged result is
// independent of the shard count.
NgramCountTable count_ngrams(const TokenSequence& seq, const std::vector<int>& orders,
                             unsigned num_threads = 1);

// Per requested order, the k most frequent keys, ties broken by ascending
// lexicographic id tuple. If an order has fewer than k distinct keys, all of
// them are returned and *truncated (when non-null) is set.
std::vector<std::vector<NgramKey>> select_topk(const NgramCountTable& table,
                                               const std::vector<int>& orders,
                                               std::size_t k_per_order,
                                               bool* truncated = nullptr);

}  // namespace graft

#endif
