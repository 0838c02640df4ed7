#pragma once

#include <cstdint>
#include <cstring>

namespace rwkvl {

// IEEE 754 binary16 <-> binary32, round-to-nearest-even. Model files carry
// f16 weights which are widened to f32 on load.

inline uint16_t f32_to_f16_bits(float value) {
    uint32_t f;
    std::memcpy(&f, &value, sizeof(f));

    const uint32_t sign = (f >> 16) & 0x8000u;
    const uint32_t exp = (f >> 23) & 0xffu;
    uint32_t mant = f & 0x007fffffu;

    if (exp == 0xffu) {  // inf / nan
        return static_cast<uint16_t>(sign | 0x7c00u | (mant != 0 ? 0x0200u : 0u));
    }

    const int32_t unbiased = static_cast<int32_t>(exp) - 127;
    if (unbiased > 15) {  // overflow -> inf
        return static_cast<uint16_t>(sign | 0x7c00u);
    }

    if (unbiased >= -14) {  // normal range
        uint32_t half = static_cast<uint32_t>(unbiased + 15) << 10 | (mant >> 13);
        const uint32_t rest = mant & 0x1fffu;
        if (rest > 0x1000u || (rest == 0x1000u && (half & 1u))) half++;
        return static_cast<uint16_t>(sign | half);
    }

    if (unbiased < -25) return static_cast<uint16_t>(sign);  // underflow -> 0

    // subnormal half
    mant |= 0x00800000u;
    const uint32_t shift = static_cast<uint32_t>(-14 - unbiased) + 13;
    uint32_t half = mant >> shift;
    const uint32_t rest = mant & ((1u << shift) - 1u);
    const uint32_t halfway = 1u << (shift - 1);
    if (rest > halfway || (rest == halfway && (half & 1u))) half++;
    return static_cast<uint16_t>(sign | half);
}

inline float f16_bits_to_f32(uint16_t h) {
    const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    const uint32_t exp = (h >> 10) & 0x1fu;
    const uint32_t mant = h & 0x03ffu;

    uint32_t f;
    if (exp == 0) {
        if (mant == 0) {
            f = sign;
        } else {  // subnormal: renormalize, value = mant * 2^-24
            uint32_t m = mant;
            uint32_t shifts = 0;
            while ((m & 0x0400u) == 0) {
                m <<= 1;
                shifts++;
            }
            m &= 0x03ffu;
            f = sign | (113u - shifts) << 23 | (m << 13);
        }
    } else if (exp == 0x1fu) {
        f = sign | 0x7f800000u | (mant << 13);
    } else {
        f = sign | (exp - 15 + 127) << 23 | (mant << 13);
    }

    float out;
    std::memcpy(&out, &f, sizeof(out));
    return out;
}

inline float f16_round(float value) { return f16_bits_to_f32(f32_to_f16_bits(value)); }

}  // namespace rwkvl
