#include "prism/util.hpp"

#include <charconv>
#include <cstdio>
#include <thread>
#include <vector>

namespace prism {

void parallel_for(int n, int threads, const std::function<void(int, int, int)>& fn) {
    if (n <= 0)
        return;
    if (threads < 1)
        threads = 1;
    if (threads == 1 || n == 1) {
        fn(0, n, 0);
        return;
    }
    int workers = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    for (int w = 0; w < workers; ++w) {
        int begin = int(int64_t(n) * w / workers);
        int end = int(int64_t(n) * (w + 1) / workers);
        pool.emplace_back([&fn, begin, end, w] { fn(begin, end, w); });
    }
    for (auto& t : pool)
        t.join();
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace prism
