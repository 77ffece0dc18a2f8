#pragma once

#include "prism/core.hpp"
#include "prism/rng.hpp"

#include <optional>

namespace prism {

// Result of one draw of the forward masking process.
struct MaskingOutcome {
    MaskedSeq z;
    int n = 0; // |masked|
    MaskSet masked;
};

// Procedure (a): n uniform on {0..L}, then a uniform size-n index subset.
MaskingOutcome mask_by_count(const MaskedSeq& x, Rng& rng);

// Procedure (b): t uniform on [0,1], then each position masked independently
// with probability t. Same marginal law as mask_by_count.
MaskingOutcome mask_by_bernoulli(const MaskedSeq& x, Rng& rng);

// mask_by_count conditioned on n >= min_count, realized by resampling.
// Returns nullopt if min_count cannot be met within max_attempts.
std::optional<MaskingOutcome> mask_with_min_count(const MaskedSeq& x, int min_count, Rng& rng,
                                                  int max_attempts = 256);

// Probability that the masked index set equals a fixed size-n subset:
// 1 / ((L+1) * C(L, n)).
double analytic_pattern_prob(int length, int n_masked);

struct EquivalenceReport {
    int length = 0;
    int64_t samples = 0;
    // masked-count histogram vs the uniform law 1/(L+1)
    double max_count_dev_by_count = 0.0;
    double max_count_dev_by_bernoulli = 0.0;
    // full pattern distribution: each procedure vs the analytic law, and
    // the two empirical distributions against each other
    double max_pattern_dev_by_count = 0.0;
    double max_pattern_dev_by_bernoulli = 0.0;
    double max_pattern_dev_between = 0.0;
    // Pearson chi-square of pooled pattern counts against the analytic law
    double chi2_by_count = 0.0;
    double chi2_by_bernoulli = 0.0;
    int degrees_of_freedom = 0;
};

// Samples both procedures, compares the empirical pattern distributions with
// the analytic law and with each other. Requires length <= 12 so the 2^L
// pattern space stays enumerable.
EquivalenceReport check_equivalence(int length, int64_t sample_count, Rng& rng);

} // namespace prism
