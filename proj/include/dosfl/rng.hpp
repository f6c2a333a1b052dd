#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace dosfl {

// Deterministic PRNG built on splitmix64. The standard library engines are
// portable but its distributions are not; every draw here is defined purely
// in terms of integer arithmetic and libm, so identical seeds give identical
// streams on any platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Bounded integer in [0, n). Modulo bias is below 2^-50 for any n that
    // fits a dataset index, and the result is deterministic, which is what
    // matters here.
    uint64_t next_below(uint64_t n) {
        return next_u64() % n;
    }

    // Standard normal via Box-Muller, one fresh pair of uniforms per draw.
    double normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) {
        return mean + stddev * normal();
    }

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Stable seed derivation: stream k of a run always sees the same seed no
    // matter in which order streams are created. Used to give each client,
    // trial, and subsystem its own independent stream.
    static uint64_t derive(uint64_t seed, uint64_t stream) {
        uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    uint64_t state_;
};

} // namespace dosfl
