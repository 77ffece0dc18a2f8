#include "prism/masking.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace prism {

namespace {

void require_clean(const MaskedSeq& x, const char* who) {
    if (!x.fully_clean())
        throw std::invalid_argument(std::string(who) + ": input must be fully clean");
}

} // namespace

MaskingOutcome mask_by_count(const MaskedSeq& x, Rng& rng) {
    require_clean(x, "mask_by_count");
    int len = x.length();
    int n = rng.uniform_int(len + 1);
    MaskSet masked(rng.sample_indices(len, n));
    return MaskingOutcome{mask_at(x, masked), n, std::move(masked)};
}

MaskingOutcome mask_by_bernoulli(const MaskedSeq& x, Rng& rng) {
    require_clean(x, "mask_by_bernoulli");
    double t = rng.uniform01();
    std::vector<int> idx;
    for (int i = 0; i < x.length(); ++i)
        if (rng.bernoulli(t))
            idx.push_back(i);
    MaskSet masked(std::move(idx));
    int n = masked.size();
    return MaskingOutcome{mask_at(x, masked), n, std::move(masked)};
}

std::optional<MaskingOutcome> mask_with_min_count(const MaskedSeq& x, int min_count, Rng& rng,
                                                  int max_attempts) {
    if (min_count > x.length())
        return std::nullopt;
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        MaskingOutcome out = mask_by_count(x, rng);
        if (out.n >= min_count)
            return out;
    }
    return std::nullopt;
}

double analytic_pattern_prob(int length, int n_masked) {
    // 1 / ((L+1) * C(L, n)) computed in log space for safety
    double log_binom = std::lgamma(double(length + 1)) - std::lgamma(double(n_masked + 1)) -
                       std::lgamma(double(length - n_masked + 1));
    return std::exp(-std::log(double(length + 1)) - log_binom);
}

EquivalenceReport check_equivalence(int length, int64_t sample_count, Rng& rng) {
    if (length < 1 || length > 12)
        throw std::invalid_argument("check_equivalence: length must be in [1, 12]");
    if (sample_count < 1)
        throw std::invalid_argument("check_equivalence: sample_count must be positive");

    const size_t n_patterns = size_t(1) << length;
    std::vector<int64_t> count_hist_a(size_t(length) + 1, 0), count_hist_b(size_t(length) + 1, 0);
    std::vector<int64_t> pattern_a(n_patterns, 0), pattern_b(n_patterns, 0);

    // token values are irrelevant to the masked-set law; any clean x works
    Vocab vocab(2);
    MaskedSeq x(vocab, std::vector<TokenId>(size_t(length), 0));

    auto pattern_bits = [](const MaskSet& s) {
        uint32_t bits = 0;
        for (int pos : s.indices())
            bits |= uint32_t(1) << pos;
        return bits;
    };

    for (int64_t it = 0; it < sample_count; ++it) {
        MaskingOutcome a = mask_by_count(x, rng);
        MaskingOutcome b = mask_by_bernoulli(x, rng);
        count_hist_a[size_t(a.n)]++;
        count_hist_b[size_t(b.n)]++;
        pattern_a[pattern_bits(a.masked)]++;
        pattern_b[pattern_bits(b.masked)]++;
    }

    EquivalenceReport rep;
    rep.length = length;
    rep.samples = sample_count;
    rep.degrees_of_freedom = int(n_patterns) - 1;

    const double uniform_count = 1.0 / double(length + 1);
    for (int n = 0; n <= length; ++n) {
        double fa = double(count_hist_a[size_t(n)]) / double(sample_count);
        double fb = double(count_hist_b[size_t(n)]) / double(sample_count);
        rep.max_count_dev_by_count = std::max(rep.max_count_dev_by_count,
                                              std::abs(fa - uniform_count));
        rep.max_count_dev_by_bernoulli = std::max(rep.max_count_dev_by_bernoulli,
                                                  std::abs(fb - uniform_count));
    }

    for (size_t bits = 0; bits < n_patterns; ++bits) {
        int n = __builtin_popcount(unsigned(bits));
        double p = analytic_pattern_prob(length, n);
        double fa = double(pattern_a[bits]) / double(sample_count);
        double fb = double(pattern_b[bits]) / double(sample_count);
        rep.max_pattern_dev_by_count = std::max(rep.max_pattern_dev_by_count, std::abs(fa - p));
        rep.max_pattern_dev_by_bernoulli =
            std::max(rep.max_pattern_dev_by_bernoulli, std::abs(fb - p));
        rep.max_pattern_dev_between = std::max(rep.max_pattern_dev_between, std::abs(fa - fb));
        double expect = p * double(sample_count);
        rep.chi2_by_count += (double(pattern_a[bits]) - expect) * (double(pattern_a[bits]) - expect) / expect;
        rep.chi2_by_bernoulli +=
            (double(pattern_b[bits]) - expect) * (double(pattern_b[bits]) - expect) / expect;
    }
    return rep;
}

} // namespace prism
