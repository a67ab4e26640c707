#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace memt5 {

// Stable 64-bit FNV-1a. Used to derive per-purpose RNG streams from one
// master seed so that results do not depend on call-site ordering.
inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::mt19937_64 rng_for(uint64_t seed, std::string_view tag, uint64_t index = 0) {
    uint64_t h = fnv1a(tag);
    std::seed_seq seq{uint32_t(seed), uint32_t(seed >> 32), uint32_t(h), uint32_t(h >> 32),
                      uint32_t(index), uint32_t(index >> 32)};
    return std::mt19937_64(seq);
}

// Sequential stream of uniforms/normals consumed by dropout and init code.
struct RngStream {
    std::mt19937_64 eng;

    explicit RngStream(std::mt19937_64 e) : eng(std::move(e)) {}
    RngStream(uint64_t seed, std::string_view tag, uint64_t index = 0) : eng(rng_for(seed, tag, index)) {}

    // Uniform in [0, 1), 53-bit resolution; avoids std::uniform_real_distribution
    // so the draw count per call is fixed.
    double uniform() { return double(eng() >> 11) * (1.0 / 9007199254740992.0); }

    // Box-Muller normal with an explicit draw pattern.
    double normal() {
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Normal(0, std) with resampling outside two standard deviations.
    double trunc_normal(double stddev) {
        double z = normal();
        while (std::abs(z) > 2.0) z = normal();
        return z * stddev;
    }
};

}  // namespace memt5
