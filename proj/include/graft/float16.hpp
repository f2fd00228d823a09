#ifndef GRAFT_FLOAT16_HPP
#define GRAFT_FLOAT16_HPP

#include <bit>
#include <cmath>
#include <cstdint>

namespace graft {

// 16-bit storage codecs, round-to-nearest-even. The dtype code stored in the
// bank header selects one of these; the bit layout, not the platform, defines
// the format.
enum class StorageDtype : uint32_t {
    BFloat16 = 1,  // default; top 16 bits of IEEE binary32
    Float16 = 2,   // IEEE binary16
};

inline uint16_t encode_bf16(double v) {
    const float f = static_cast<float>(v);
    uint32_t bits = std::bit_cast<uint32_t>(f);
    if (std::isnan(f)) return static_cast<uint16_t>((bits >> 16) | 0x0040);
    const uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;  // round to nearest even
    return static_cast<uint16_t>(bits >> 16);
}

inline double decode_bf16(uint16_t h) {
    const uint32_t bits = static_cast<uint32_t>(h) << 16;
    return static_cast<double>(std::bit_cast<float>(bits));
}

inline uint16_t encode_f16(double v) {
    const float f = static_cast<float>(v);
    const uint32_t bits = std::bit_cast<uint32_t>(f);
    const uint32_t sign = (bits >> 16) & 0x8000u;
    const int32_t exp = static_cast<int32_t>((bits >> 23) & 0xFF) - 127;
    uint32_t mant = bits & 0x7FFFFFu;
    if (exp == 128) {  // inf / nan
        return static_cast<uint16_t>(sign | 0x7C00u | (mant ? 0x0200u : 0u));
    }
    if (exp > 15) return static_cast<uint16_t>(sign | 0x7C00u);  // overflow -> inf
    if (exp >= -14) {
        // normal: 10-bit mantissa, RNE on the dropped 13 bits
        uint32_t out = (static_cast<uint32_t>(exp + 15) << 10) | (mant >> 13);
        const uint32_t rem = mant & 0x1FFFu;
        if (rem > 0x1000u || (rem == 0x1000u && (out & 1u))) ++out;
        return static_cast<uint16_t>(sign | out);
    }
    if (exp < -25) return static_cast<uint16_t>(sign);  // underflow -> signed zero
    // subnormal
    mant |= 0x800000u;
    const int shift = -14 - exp;  // in [1, 11]
    uint32_t out = mant >> (13 + shift);
    const uint32_t rem_mask = (1u << (13 + shift)) - 1u;
    const uint32_t rem = mant & rem_mask;
    const uint32_t half = 1u << (12 + shift);
    if (rem > half || (rem == half && (out & 1u))) ++out;
    return static_cast<uint16_t>(sign | out);
}

inline double decode_f16(uint16_t h) {
    const uint32_t sign = (h & 0x8000u) << 16;
    const uint32_t exp = (h >> 10) & 0x1Fu;
    const uint32_t mant = h & 0x3FFu;
    uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            int e = -1;
            uint32_t m = mant;
            do {
                ++e;
                m <<= 1;
            } while (!(m & 0x400u));
            bits = sign | (static_cast<uint32_t>(127 - 15 - e) << 23) | ((m & 0x3FFu) << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    return static_cast<double>(std::bit_cast<float>(bits));
}

inline uint16_t encode_storage(double v, StorageDtype dt) {
    return dt == StorageDtype::BFloat16 ? encode_bf16(v) : encode_f16(v);
}

inline double decode_storage(uint16_t h, StorageDtype dt) {
    return dt == StorageDtype::BFloat16 ? decode_bf16(h) : decode_f16(h);
}

}  // namespace graft

#endif
