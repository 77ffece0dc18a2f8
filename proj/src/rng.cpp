#include "prism/rng.hpp"

#include <algorithm>

namespace prism {

std::vector<int> Rng::sample_indices(int n, int k) {
    std::vector<int> pool(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        pool[size_t(i)] = i;
    for (int i = 0; i < k; ++i) {
        int j = i + int(uniform_below(uint64_t(n - i)));
        std::swap(pool[size_t(i)], pool[size_t(j)]);
    }
    pool.resize(size_t(k));
    std::sort(pool.begin(), pool.end());
    return pool;
}

uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
    auto mix = [](uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    uint64_t h = mix(seed ^ 0x2545f4914f6cdd1dULL);
    h = mix(h ^ (a + 0x9e3779b97f4a7c15ULL));
    h = mix(h ^ (b + 0xd1b54a32d192ed03ULL));
    h = mix(h ^ (c + 0x8cb92ba72f3d8dd7ULL));
    return h;
}

} // namespace prism
