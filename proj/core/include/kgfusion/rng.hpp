#pragma once
// Deterministic randomness used everywhere seeds appear.
//
// Two flavors:
//   Rng       — stateful splitmix64 stream for generators and training.
//   mix64     — stateless counter-based stream (key, counter) -> u64, the
//               backbone of the text hash embedder.
//
// std::mt19937 distributions are not bit-portable across standard libraries,
// so uniforms and normals are derived here by hand. Same seed, same bytes,
// any platform.

#include <cstdint>
#include <cmath>
#include <string_view>

namespace kgf {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// FNV-1a: stable text hash, independent of std::hash.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Counter-based stream: value at position `counter` for a given key.
inline uint64_t mix64(uint64_t key, uint64_t counter) {
    return splitmix64(key + counter * 0x9e3779b97f4a7c15ULL);
}

inline double u64_to_unit(uint64_t x) {
    // (0, 1]: ln() stays finite in Box-Muller.
    return static_cast<double>((x >> 11) + 1) * 0x1.0p-53;
}

// Box-Muller pair from two uniforms.
inline void box_muller(uint64_t a, uint64_t b, double& z0, double& z1) {
    const double u1 = u64_to_unit(a);
    const double u2 = u64_to_unit(b);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586476925286766559 * u2;
    z0 = r * std::cos(t);
    z1 = r * std::sin(t);
}

// Standard normal at position i of a keyed counter stream.
inline double normal_at(uint64_t key, uint64_t i) {
    double z0, z1;
    box_muller(mix64(key, 2 * i), mix64(key, 2 * i + 1), z0, z1);
    return z0;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x5851f42d4c957f2dULL)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    // Uniform in [0, bound) via 128-bit multiply (Lemire, unbiased enough for
    // synthetic data; exact rejection is not needed here).
    uint64_t next_below(uint64_t bound) {
        return static_cast<uint64_t>(
            (static_cast<__uint128_t>(next_u64()) * bound) >> 64);
    }

    double next_unit() { return u64_to_unit(next_u64()); }

    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double z0;
        box_muller(next_u64(), next_u64(), z0, spare_);
        have_spare_ = true;
        return z0;
    }

    // Uniform in (-limit, +limit).
    double next_uniform(double limit) {
        return (2.0 * next_unit() - 1.0) * limit;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace kgf
