#include "graft/bank.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace graft {

namespace {

constexpr char kBankMagic[8] = {'G', 'R', 'F', 'T', 'B', 'A', 'N', 'K'};
constexpr char kProvMagic[8] = {'G', 'R', 'F', 'T', 'P', 'R', 'O', 'V'};
constexpr uint32_t kBankVersion = 1;
constexpr uint64_t kIndexSeed = 0x4752414654424Bull;  // bank index hash seed

uint64_t key_hash(const NgramKey& key) {
    return hash_ids(kIndexSeed ^ key.order, key.span());
}

// Little-endian buffered writer that feeds the running FNV-1a checksum.
struct Writer {
    std::ofstream out;
    uint64_t fnv = 0xCBF29CE484222325ULL;
    bool checksumming = false;

    void raw(const void* p, std::size_t n) {
        out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (checksumming) fnv = fnv1a64(p, n, fnv);
    }
    void u32(uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        raw(b, 4);
    }
    void u64(uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        raw(b, 8);
    }
    void u16(uint16_t v) {
        unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
        raw(b, 2);
    }
};

struct Reader {
    std::ifstream in;
    uint64_t fnv = 0xCBF29CE484222325ULL;
    bool checksumming = false;
    std::string what;

    void raw(void* p, std::size_t n, const char* field) {
        if (!in.read(static_cast<char*>(p), static_cast<std::streamsize>(n))) {
            throw std::runtime_error("truncated bank file (" + std::string(field) + ")");
        }
        if (checksumming) fnv = fnv1a64(p, n, fnv);
    }
    uint32_t u32(const char* field) {
        unsigned char b[4];
        raw(b, 4, field);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    }
    uint64_t u64(const char* field) {
        unsigned char b[8];
        raw(b, 8, field);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
        return v;
    }
    uint16_t u16(const char* field) {
        unsigned char b[2];
        raw(b, 2, field);
        return static_cast<uint16_t>(b[0] | (b[1] << 8));
    }
};

}  // namespace

// ---------------------------------------------------------------- providers

Vector SyntheticProvider::embed(const NgramKey& key) const {
    const uint64_t stream = hash_ids(mix64(seed_) ^ key.order, key.span());
    Vector v(dim_);
    double norm2 = 0.0;
    // Box-Muller over splitmix-style draws; draws are a pure function of
    // (stream, i) so the vector is platform independent.
    for (uint32_t i = 0; i < dim_; i += 2) {
        const double u1 =
            (static_cast<double>(mix64(stream + 2 * i + 1) >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(mix64(stream + 2 * i + 2) >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        v[i] = r * std::cos(2.0 * M_PI * u2);
        if (i + 1 < dim_) v[i + 1] = r * std::sin(2.0 * M_PI * u2);
    }
    for (double x : v.data) norm2 += x * x;
    const double target = std::sqrt(static_cast<double>(dim_));
    const double s = norm2 > 0.0 ? target / std::sqrt(norm2) : 0.0;
    for (double& x : v.data) x *= s;
    return v;
}

std::string SyntheticProvider::id() const {
    return "synthetic:" + std::to_string(seed_);
}

FileProvider FileProvider::load(const std::string& path) {
    Reader r;
    r.in.open(path, std::ios::binary);
    if (!r.in) throw std::runtime_error("cannot open provider file: " + path);
    char magic[8];
    r.raw(magic, 8, "magic");
    if (std::memcmp(magic, kProvMagic, 8) != 0) {
        throw std::runtime_error("bad provider magic in " + path);
    }
    FileProvider p;
    p.path_ = path;
    const uint32_t count = r.u32("count");
    p.dim_ = r.u32("d_mem");
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t order = r.u32("record order");
        if (order < 2 || order > kMaxNgramOrder) {
            throw std::runtime_error("provider record has bad order");
        }
        std::vector<uint32_t> ids(order);
        for (uint32_t j = 0; j < order; ++j) ids[j] = r.u32("record ids");
        Vector v(p.dim_);
        for (uint32_t j = 0; j < p.dim_; ++j) {
            const uint64_t bits = r.u64("record vector");
            v[j] = std::bit_cast<double>(bits);
        }
        p.vectors_[NgramKey::from(ids)] = std::move(v);
    }
    return p;
}

Vector FileProvider::embed(const NgramKey& key) const {
    auto it = vectors_.find(key);
    if (it == vectors_.end()) {
        std::string ids;
        for (int i = 0; i < key.order; ++i) {
            if (i) ids += ',';
            ids += std::to_string(key.ids[i]);
        }
        throw std::runtime_error("provider has no vector for key (" + ids + ")");
    }
    return it->second;
}

// --------------------------------------------------------------- bank build

MemoryBank MemoryBank::build(const std::vector<std::vector<NgramKey>>& keys_per_order,
                             const EmbeddingProvider& provider, StorageDtype dtype,
                             uint32_t source_layer) {
    MemoryBank bank;
    bank.d_mem_ = provider.out_dim();
    bank.meta_.provider_id = provider.id();
    bank.meta_.source_layer = source_layer;
    bank.meta_.dtype = dtype;

    // Group by order, ascending; sort keys within each order.
    std::vector<std::vector<NgramKey>> by_order;
    for (const auto& list : keys_per_order) {
        for (const NgramKey& k : list) {
            auto it = std::find_if(by_order.begin(), by_order.end(), [&](const auto& v) {
                return !v.empty() && v.front().order == k.order;
            });
            if (it == by_order.end()) {
                by_order.emplace_back().push_back(k);
            } else {
                it->push_back(k);
            }
        }
    }
    std::sort(by_order.begin(), by_order.end(), [](const auto& a, const auto& b) {
        return a.front().order < b.front().order;
    });

    uint64_t row = 0;
    for (auto& keys : by_order) {
        std::sort(keys.begin(), keys.end());
        if (std::adjacent_find(keys.begin(), keys.end()) != keys.end()) {
            throw std::runtime_error("duplicate n-gram key in bank build");
        }
        const int n = keys.front().order;
        bank.orders_.push_back(n);
        bank.counts_.push_back(keys.size());
        bank.row_offsets_.push_back(row);
        auto& flat = bank.key_ids_.emplace_back();
        flat.reserve(keys.size() * static_cast<std::size_t>(n));
        for (const NgramKey& k : keys) {
            flat.insert(flat.end(), k.ids.begin(), k.ids.begin() + n);
        }
        row += keys.size();
    }
    bank.total_entries_ = row;

    bank.rows_.resize(bank.total_entries_ * bank.d_mem_);
    uint64_t j = 0;
    for (std::size_t o = 0; o < bank.orders_.size(); ++o) {
        const int n = bank.orders_[o];
        for (uint64_t i = 0; i < bank.counts_[o]; ++i, ++j) {
            const NgramKey key = NgramKey::from(
                {bank.key_ids_[o].data() + i * static_cast<uint64_t>(n),
                 static_cast<std::size_t>(n)});
            const Vector v = provider.embed(key);
            if (v.dim() != bank.d_mem_) {
                throw std::runtime_error("provider returned wrong dimension");
            }
            for (uint32_t d = 0; d < bank.d_mem_; ++d) {
                if (!std::isfinite(v[d])) {
                    throw std::runtime_error("provider returned non-finite value");
                }
                bank.rows_[j * bank.d_mem_ + d] = encode_storage(v[d], dtype);
            }
        }
    }

    // Creation hash ties the bank to its provider and key set.
    uint64_t ch = fnv1a64(bank.meta_.provider_id.data(), bank.meta_.provider_id.size());
    for (const auto& flat : bank.key_ids_) {
        ch = fnv1a64(flat.data(), flat.size() * sizeof(uint32_t), ch);
    }
    bank.meta_.creation_hash = ch;

    bank.build_index();
    return bank;
}

void MemoryBank::build_index() {
    uint64_t cap = 16;
    while (cap < total_entries_ * 2) cap <<= 1;
    slot_hash_.assign(cap, 0);
    slot_row_.assign(cap, 0);
    slot_mask_ = cap - 1;
    for (uint64_t j = 0; j < total_entries_; ++j) {
        const NgramKey k = key_at(j);
        const uint64_t h = key_hash(k);
        uint64_t idx = h & slot_mask_;
        while (slot_row_[idx] != 0) idx = (idx + 1) & slot_mask_;
        slot_hash_[idx] = h;
        slot_row_[idx] = j + 1;
    }
}

NgramKey MemoryBank::key_at(uint64_t j) const {
    for (std::size_t o = 0; o < orders_.size(); ++o) {
        if (j < row_offsets_[o] + counts_[o]) {
            const uint64_t i = j - row_offsets_[o];
            const int n = orders_[o];
            return NgramKey::from({key_ids_[o].data() + i * static_cast<uint64_t>(n),
                                   static_cast<std::size_t>(n)});
        }
    }
    throw std::out_of_range("bank row out of range");
}

uint64_t MemoryBank::order_count(int n) const {
    for (std::size_t o = 0; o < orders_.size(); ++o) {
        if (orders_[o] == n) return counts_[o];
    }
    return 0;
}

std::optional<uint64_t> MemoryBank::find(const NgramKey& key) const {
    if (total_entries_ == 0) return std::nullopt;
    const uint64_t h = key_hash(key);
    uint64_t idx = h & slot_mask_;
    while (slot_row_[idx] != 0) {
        if (slot_hash_[idx] == h) {
            const uint64_t j = slot_row_[idx] - 1;
            if (key_at(j) == key) return j;
        }
        idx = (idx + 1) & slot_mask_;
    }
    return std::nullopt;
}

LookupResult MemoryBank::exact_lookup(std::span<const uint32_t> suffix) const {
    // longest order first; a 4-gram match overrides a 3-gram match
    for (auto o = orders_.rbegin(); o != orders_.rend(); ++o) {
        const std::size_t n = static_cast<std::size_t>(*o);
        if (suffix.size() < n) continue;
        const NgramKey key = NgramKey::from(suffix.subspan(suffix.size() - n, n));
        if (auto j = find(key)) {
            return LookupResult{true, *j, *o};
        }
    }
    return LookupResult{};
}

std::vector<LookupResult> MemoryBank::batch_lookup(const TokenSequence& seq) const {
    std::vector<LookupResult> out(seq.ids.size());
    for (std::size_t d = 0; d < seq.doc_count(); ++d) {
        const std::size_t begin = seq.doc_begin(d);
        const std::size_t end = seq.doc_end(d);
        for (std::size_t t = begin; t < end; ++t) {
            const std::size_t avail = t + 1 - begin;
            if (avail < 2) continue;  // defined miss near document start
            const std::size_t take = std::min<std::size_t>(avail, kMaxNgramOrder);
            out[t] = exact_lookup({seq.ids.data() + (t + 1 - take), take});
        }
    }
    return out;
}

Vector MemoryBank::row(uint64_t j) const {
    if (j >= total_entries_) throw std::out_of_range("bank row out of range");
    Vector v(d_mem_);
    for (uint32_t d = 0; d < d_mem_; ++d) {
        v[d] = decode_storage(rows_[j * d_mem_ + d], meta_.dtype);
    }
    return v;
}

// --------------------------------------------------------------- size stats

BankStats layout_stats(const BankLayout& layout) {
    BankStats s;
    s.d_mem = layout.d_mem;
    s.per_order = layout.order_counts;
    for (const auto& [n, c] : layout.order_counts) {
        s.entries += c;
        s.key_bytes += c * static_cast<uint64_t>(n) * sizeof(uint32_t);
    }
    s.row_bytes = s.entries * layout.d_mem * 2;  // 16-bit storage
    // magic + version + dtype + d_mem + order count + per-order (n, count)
    // + meta (provider len + bytes + source layer + creation hash) + checksum
    s.header_bytes = 8 + 4 + 4 + 4 + 4 + layout.order_counts.size() * 12 + 4 +
                     layout.provider_id_len + 4 + 8 + 8;
    s.total_bytes = s.header_bytes + s.key_bytes + s.row_bytes;
    return s;
}

BankStats MemoryBank::stats() const {
    BankLayout layout;
    for (std::size_t o = 0; o < orders_.size(); ++o) {
        layout.order_counts.emplace_back(orders_[o], counts_[o]);
    }
    layout.d_mem = d_mem_;
    layout.dtype = meta_.dtype;
    layout.provider_id_len = meta_.provider_id.size();
    return layout_stats(layout);
}

// ----------------------------------------------------------------- file I/O

void MemoryBank::write(const std::string& path) const {
    Writer w;
    w.out.open(path, std::ios::binary | std::ios::trunc);
    if (!w.out) throw std::runtime_error("cannot open bank file for write: " + path);
    w.raw(kBankMagic, 8);
    w.checksumming = true;  // checksum covers everything after the magic
    w.u32(kBankVersion);
    w.u32(static_cast<uint32_t>(meta_.dtype));
    w.u32(d_mem_);
    w.u32(static_cast<uint32_t>(orders_.size()));
    for (std::size_t o = 0; o < orders_.size(); ++o) {
        w.u32(static_cast<uint32_t>(orders_[o]));
        w.u64(counts_[o]);
    }
    w.u32(static_cast<uint32_t>(meta_.provider_id.size()));
    w.raw(meta_.provider_id.data(), meta_.provider_id.size());
    w.u32(meta_.source_layer);
    w.u64(meta_.creation_hash);
    for (const auto& flat : key_ids_) {
        for (uint32_t id : flat) w.u32(id);
    }
    for (uint16_t h : rows_) w.u16(h);
    w.checksumming = false;
    w.u64(w.fnv);
    if (!w.out) throw std::runtime_error("write failed: " + path);
}

MemoryBank MemoryBank::read(const std::string& path) {
    Reader r;
    r.in.open(path, std::ios::binary);
    if (!r.in) throw std::runtime_error("cannot open bank file: " + path);
    char magic[8];
    r.raw(magic, 8, "magic");
    if (std::memcmp(magic, kBankMagic, 8) != 0) {
        throw std::runtime_error("bad bank magic in " + path);
    }
    r.checksumming = true;
    const uint32_t version = r.u32("version");
    if (version != kBankVersion) {
        throw std::runtime_error("unsupported bank version " + std::to_string(version));
    }
    MemoryBank bank;
    const uint32_t dtype = r.u32("dtype");
    if (dtype != static_cast<uint32_t>(StorageDtype::BFloat16) &&
        dtype != static_cast<uint32_t>(StorageDtype::Float16)) {
        throw std::runtime_error("unknown storage dtype code " + std::to_string(dtype));
    }
    bank.meta_.dtype = static_cast<StorageDtype>(dtype);
    bank.d_mem_ = r.u32("d_mem");
    const uint32_t norders = r.u32("order count");
    uint64_t row = 0;
    for (uint32_t o = 0; o < norders; ++o) {
        bank.orders_.push_back(static_cast<int>(r.u32("order")));
        bank.counts_.push_back(r.u64("order entry count"));
        bank.row_offsets_.push_back(row);
        row += bank.counts_.back();
    }
    bank.total_entries_ = row;
    const uint32_t pid_len = r.u32("provider id length");
    bank.meta_.provider_id.resize(pid_len);
    if (pid_len) r.raw(bank.meta_.provider_id.data(), pid_len, "provider id");
    bank.meta_.source_layer = r.u32("source layer");
    bank.meta_.creation_hash = r.u64("creation hash");
    for (uint32_t o = 0; o < norders; ++o) {
        auto& flat = bank.key_ids_.emplace_back();
        flat.resize(bank.counts_[o] * static_cast<uint64_t>(bank.orders_[o]));
        for (uint32_t& id : flat) id = r.u32("key section");
    }
    bank.rows_.resize(bank.total_entries_ * bank.d_mem_);
    for (uint16_t& h : bank.rows_) h = r.u16("row section");
    r.checksumming = false;
    const uint64_t expect = r.fnv;
    const uint64_t stored = r.u64("checksum");
    if (stored != expect) {
        throw std::runtime_error("bank checksum mismatch in " + path);
    }
    bank.build_index();
    return bank;
}

}  // namespace graft
