#ifndef GRAFT_BANK_HPP
#define GRAFT_BANK_HPP

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "graft/corpus.hpp"
#include "graft/float16.hpp"
#include "graft/numerics.hpp"

namespace graft {

// Deterministic source of memory row vectors: same key, same vector.
class EmbeddingProvider {
  public:
    virtual ~EmbeddingProvider() = default;
    virtual Vector embed(const NgramKey& key) const = 0;
    virtual uint32_t out_dim() const = 0;
    virtual std::string id() const = 0;
};

// Seeded stand-in for an offline grafting model: per key, a pseudo-random
// unit-normal draw keyed by (seed, order, ids), L2-normalized to norm
// sqrt(out_dim). Byte-reproducible across platforms.
class SyntheticProvider final : public EmbeddingProvider {
  public:
    SyntheticProvider(uint64_t seed, uint32_t out_dim) : seed_(seed), dim_(out_dim) {}
    Vector embed(const NgramKey& key) const override;
    uint32_t out_dim() const override { return dim_; }
    std::string id() const override;

  private:
    uint64_t seed_;
    uint32_t dim_;
};

// Externally computed vectors loaded from a "GRFTPROV" file:
//   magic(8) u32 count, u32 d_mem, then records of u32 order, order x u32 ids,
//   d_mem x f64 (little-endian). Missing key at embed time is an error.
class FileProvider final : public EmbeddingProvider {
  public:
    static FileProvider load(const std::string& path);
    Vector embed(const NgramKey& key) const override;
    uint32_t out_dim() const override { return dim_; }
    std::string id() const override { return "file:" + path_; }

  private:
    std::string path_;
    uint32_t dim_ = 0;
    std::unordered_map<NgramKey, Vector, NgramKeyHash> vectors_;
};

struct LookupResult {
    bool hit = false;
    uint64_t row = 0;      // valid only when hit
    int matched_order = 0; // valid only when hit

    bool operator==(const LookupResult& o) const {
        if (hit != o.hit) return false;
        return !hit || (row == o.row && matched_order == o.matched_order);
    }
};

struct BankStats {
    uint64_t entries = 0;
    std::vector<std::pair<int, uint64_t>> per_order;
    uint32_t d_mem = 0;
    uint64_t row_bytes = 0;
    uint64_t key_bytes = 0;
    uint64_t header_bytes = 0;
    uint64_t total_bytes = 0;
};

// Size arithmetic without materializing any rows (dry-run build).
struct BankLayout {
    std::vector<std::pair<int, uint64_t>> order_counts;
    uint32_t d_mem = 0;
    StorageDtype dtype = StorageDtype::BFloat16;
    std::size_t provider_id_len = 0;
};
BankStats layout_stats(const BankLayout& layout);

// Frozen n-gram -> row table. Immutable after build/read; lookups are
// lock-free reads safe from any number of threads.
class MemoryBank {
  public:
    struct Meta {
        std::string provider_id;
        uint32_t source_layer = 0;
        StorageDtype dtype = StorageDtype::BFloat16;
        uint64_t creation_hash = 0;
    };

    // Keys must be pairwise distinct within each order. Provider is run once
    // per key; rows are stored in storage precision, orders ascending, keys
    // sorted lexicographically within each order.
    static MemoryBank build(const std::vector<std::vector<NgramKey>>& keys_per_order,
                            const EmbeddingProvider& provider, StorageDtype dtype,
                            uint32_t source_layer = 0);

    static MemoryBank read(const std::string& path);
    void write(const std::string& path) const;

    // Probes orders from longest to shortest; first exact match wins.
    // `suffix` holds up to kMaxNgramOrder trailing compressed ids ending at
    // the query position (fewer near a document start). A miss is a value.
    LookupResult exact_lookup(std::span<const uint32_t> suffix) const;

    // Position-wise exact_lookup; suffixes never cross document boundaries,
    // and positions with fewer than 2 in-document tokens are defined misses.
    std::vector<LookupResult> batch_lookup(const TokenSequence& seq) const;

    Vector row(uint64_t j) const;            // decoded to real64
    NgramKey key_at(uint64_t j) const;
    uint64_t entry_count() const { return total_entries_; }
    uint32_t d_mem() const { return d_mem_; }
    const Meta& meta() const { return meta_; }
    const std::vector<int>& orders() const { return orders_; }
    uint64_t order_count(int n) const;
    BankStats stats() const;

    // Row index for an exact key of known order, or nullopt.
    std::optional<uint64_t> find(const NgramKey& key) const;

  private:
    MemoryBank() = default;
    void build_index();

    std::vector<int> orders_;                       // ascending
    std::vector<uint64_t> counts_;                  // per order
    std::vector<uint64_t> row_offsets_;             // per order, first global row
    std::vector<std::vector<uint32_t>> key_ids_;    // per order, flat sorted tuples
    std::vector<uint16_t> rows_;                    // M x d_mem, storage precision
    uint64_t total_entries_ = 0;
    uint32_t d_mem_ = 0;
    Meta meta_;

    // open-addressing index: hash + row+1 (0 = empty)
    std::vector<uint64_t> slot_hash_;
    std::vector<uint64_t> slot_row_;
    uint64_t slot_mask_ = 0;
};

}  // namespace graft

#endif
