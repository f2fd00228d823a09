#ifndef GRAFT_HASHMIX_HPP
#define GRAFT_HASHMIX_HPP

#include <cstdint>
#include <span>

namespace graft {

// Fixed 64-bit avalanche mix (splitmix64 finalizer constants). The bank
// index, the fallback hashing heads, and the synthetic embedding provider
// all derive addresses from this one function, so its constants are part
// of the on-disk format contract and must never change.
inline uint64_t mix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

// Chained absorption of a token-id tuple under a per-use seed:
//   h = seed; for each id: h = mix64(h ^ id)
inline uint64_t hash_ids(uint64_t seed, std::span<const uint32_t> ids) {
    uint64_t h = seed;
    for (uint32_t id : ids) h = mix64(h ^ static_cast<uint64_t>(id));
    return h;
}

inline uint64_t fnv1a64(const void* bytes, std::size_t len, uint64_t h = 0xCBF29CE484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace graft

#endif
