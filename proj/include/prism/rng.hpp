#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace prism {

// Deterministic 64-bit generator (splitmix64 core). Self-contained so that
// results are stable across standard libraries and build configurations;
// every run artifact records the seed it was created from.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be positive.
    uint64_t uniform_below(uint64_t n) {
        // multiply-high rejection; bias-free
        uint64_t x = next_u64();
        __uint128_t m = __uint128_t(x) * __uint128_t(n);
        auto lo = uint64_t(m);
        if (lo < n) {
            uint64_t t = (0 - n) % n;
            while (lo < t) {
                x = next_u64();
                m = __uint128_t(x) * __uint128_t(n);
                lo = uint64_t(m);
            }
        }
        return uint64_t(m >> 64);
    }

    int uniform_int(int n) { return int(uniform_below(uint64_t(n))); }

    bool bernoulli(double p) { return uniform01() < p; }

    // Number of successes in n independent trials. n is small everywhere we
    // use this (at most the sequence length), so direct simulation is exact
    // and fast enough.
    int binomial(int n, double p) {
        int k = 0;
        for (int i = 0; i < n; ++i)
            k += bernoulli(p) ? 1 : 0;
        return k;
    }

    // Standard normal via Box-Muller (no cached spare; deterministic stream).
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        // avoid log(0)
        if (u1 <= 0.0)
            u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // k distinct values from {0,...,n-1}, ascending order (partial Fisher-Yates).
    std::vector<int> sample_indices(int n, int k);

    template <class T> void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t state_;
};

// Derives an independent stream from (seed, labels...). Used to give every
// training element, inference step, and worker its own generator so that
// parallel split and unrelated draws never perturb each other.
uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0);

} // namespace prism
