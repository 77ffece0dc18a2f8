#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>

namespace prism {

// Configuration / CLI input problems. Mapped to exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values, diverged training, exhausted numeric contracts. Exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Exact enumeration refused because the state space exceeds the configured cap.
struct EnumerationCapError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Neumaier compensated summation. Keeps oracle reductions independent of
// accumulation order to well below 1e-12.
class KahanSum {
  public:
    void add(double x) {
        double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

  private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

// Runs fn(begin, end, worker) over [0, n) split into contiguous chunks on
// `threads` workers. Chunk boundaries depend only on (n, threads), so a fixed
// configuration always reproduces the same split.
void parallel_for(int n, int threads, const std::function<void(int, int, int)>& fn);

std::string format_double(double v);

} // namespace prism
