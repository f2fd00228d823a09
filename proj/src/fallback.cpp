#include "graft/fallback.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace graft {

HashScheme HashScheme::make(std::vector<int> orders, int heads, uint32_t table_size,
                            uint64_t master_seed) {
    if (table_size < 1) throw std::invalid_argument("HashScheme: table_size < 1");
    if (heads < 1) throw std::invalid_argument("HashScheme: heads < 1");
    std::sort(orders.begin(), orders.end());
    HashScheme s;
    s.orders = std::move(orders);
    s.heads = heads;
    s.table_size = table_size;
    s.seeds.reserve(s.orders.size() * static_cast<std::size_t>(heads));
    for (std::size_t oi = 0; oi < s.orders.size(); ++oi) {
        for (int k = 0; k < heads; ++k) {
            s.seeds.push_back(mix64(master_seed ^ (static_cast<uint64_t>(s.orders[oi]) << 32) ^
                                    static_cast<uint64_t>(k)));
        }
    }
    return s;
}

int HashScheme::max_order() const {
    return orders.empty() ? 0 : orders.back();
}

uint32_t hash_ngram(std::span<const uint32_t> ids, const HashScheme& scheme,
                    std::size_t order_idx, int head) {
    const uint64_t h = hash_ids(scheme.seed(order_idx, head), ids);
    return static_cast<uint32_t>(h % scheme.table_size);
}

FallbackTables FallbackTables::init(const HashScheme& scheme, uint32_t d_fallback,
                                    uint64_t seed) {
    const std::size_t slots = scheme.orders.size() * static_cast<std::size_t>(scheme.heads);
    if (slots == 0 || d_fallback % slots != 0) {
        throw std::invalid_argument("fallback dim not divisible by |orders| * heads");
    }
    FallbackTables t;
    t.d_fallback = d_fallback;
    t.d_sub = static_cast<uint32_t>(d_fallback / slots);
    const double scale = 1.0 / std::sqrt(static_cast<double>(t.d_sub));
    uint64_t ctr = mix64(seed ^ 0x7461626C6573ULL);
    for (std::size_t s = 0; s < slots; ++s) {
        Matrix& m = t.tables.emplace_back(scheme.table_size, t.d_sub);
        for (double& v : m.data) {
            const double u = static_cast<double>(mix64(ctr++) >> 11) * 0x1.0p-53;
            v = (2.0 * u - 1.0) * scale;
        }
    }
    return t;
}

Vector fallback_retrieve(std::span<const uint32_t> suffix, const HashScheme& scheme,
                         const FallbackTables& tables, FallbackAddress* address) {
    Vector e(tables.d_fallback);
    std::size_t off = 0;
    std::size_t slot = 0;
    for (std::size_t oi = 0; oi < scheme.orders.size(); ++oi) {
        const std::size_t n = static_cast<std::size_t>(scheme.orders[oi]);
        for (int k = 0; k < scheme.heads; ++k, ++slot) {
            uint32_t z = 0;  // reserved row for order shortfall at document start
            if (suffix.size() >= n) {
                z = hash_ngram(suffix.subspan(suffix.size() - n, n), scheme, oi, k);
            }
            const Matrix& table = tables.tables[slot];
            for (uint32_t d = 0; d < tables.d_sub; ++d) {
                e[off + d] = table.at(z, d);
            }
            if (address) address->rows.push_back(z);
            off += tables.d_sub;
        }
    }
    return e;
}

void fallback_grad(const Vector& de_hash, const FallbackAddress& address,
                   FallbackGrads& grads) {
    const std::size_t slots = address.rows.size();
    if (slots == 0 || de_hash.dim() % slots != 0) {
        throw std::runtime_error("fallback_grad: stale addressing record");
    }
    const std::size_t d_sub = de_hash.dim() / slots;
    if (grads.per_table.empty()) grads.per_table.resize(slots);
    if (grads.per_table.size() != slots) {
        throw std::runtime_error("fallback_grad: addressing record table count mismatch");
    }
    std::size_t off = 0;
    for (std::size_t s = 0; s < slots; ++s) {
        const uint32_t z = address.rows[s];
        auto [it, inserted] = grads.per_table[s].try_emplace(z, Vector(d_sub));
        for (std::size_t d = 0; d < d_sub; ++d) {
            it->second[d] += de_hash[off + d];
        }
        off += d_sub;
    }
}

namespace {

void hash_doc_range(const TokenSequence& seq, const HashScheme& scheme,
                    std::size_t doc_lo, std::size_t doc_hi, std::vector<uint32_t>& out) {
    const std::size_t slots = scheme.orders.size() * static_cast<std::size_t>(scheme.heads);
    for (std::size_t d = doc_lo; d < doc_hi; ++d) {
        const std::size_t begin = seq.doc_begin(d);
        const std::size_t end = seq.doc_end(d);
        for (std::size_t t = begin; t < end; ++t) {
            std::size_t slot = 0;
            for (std::size_t oi = 0; oi < scheme.orders.size(); ++oi) {
                const std::size_t n = static_cast<std::size_t>(scheme.orders[oi]);
                for (int k = 0; k < scheme.heads; ++k, ++slot) {
                    uint32_t z = 0;
                    if (t + 1 - begin >= n) {
                        z = hash_ngram({seq.ids.data() + (t + 1 - n), n}, scheme, oi, k);
                    }
                    out[t * slots + slot] = z;
                }
            }
        }
    }
}

}  // namespace

std::vector<uint32_t> batch_hash_indices(const TokenSequence& seq, const HashScheme& scheme,
                                         unsigned num_threads) {
    const std::size_t slots = scheme.orders.size() * static_cast<std::size_t>(scheme.heads);
    std::vector<uint32_t> out(seq.ids.size() * slots);
    const std::size_t ndocs = seq.doc_count();
    if (num_threads <= 1 || ndocs < 2) {
        hash_doc_range(seq, scheme, 0, ndocs, out);
        return out;
    }
    const unsigned workers = std::min<unsigned>(num_threads, static_cast<unsigned>(ndocs));
    std::vector<std::thread> threads;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t lo = ndocs * w / workers;
        const std::size_t hi = ndocs * (w + 1) / workers;
        threads.emplace_back([&, lo, hi] { hash_doc_range(seq, scheme, lo, hi, out); });
    }
    for (auto& t : threads) t.join();
    return out;
}

}  // namespace graft
