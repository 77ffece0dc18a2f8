#pragma once

#include "prism/core.hpp"
#include "prism/rng.hpp"

#include <functional>
#include <stdexcept>
#include <utility>
#include <variant>
#include <vector>

namespace prism {

// Requested posterior for a state the masking process can never produce
// (no support element agrees with the conditioning sequence).
struct UnreachableStateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int64_t kDefaultEnumerationCap = 10'000'000;

// Distribution over clean tokens at one position; sums to 1 within 1e-9.
struct PosteriorRow {
    std::vector<double> probs;

    double sum() const;
    void validate() const;
};

// Keeps the smallest probability prefix with cumulative mass >= p, sorted by
// probability descending (ties by token id), renormalized. p = 1 keeps the
// row unchanged; p = 0 degenerates to argmax with lowest-id tie break.
PosteriorRow nucleus_truncate(const PosteriorRow& row, double p);

TokenId sample_from_row(const PosteriorRow& row, Rng& rng);
TokenId argmax_token(const PosteriorRow& row);

// Finite distribution with exact weights; the domain of every oracle.
class ExplicitDist {
  public:
    ExplicitDist(Vocab vocab, std::vector<std::pair<MaskedSeq, double>> support);

    const Vocab& vocab() const { return vocab_; }
    int length() const { return length_; }
    const std::vector<std::pair<MaskedSeq, double>>& support() const { return support_; }

    const MaskedSeq& sample(Rng& rng) const;

    // Exact probability of a fully clean sequence (0 when off-support).
    double prob_of(const MaskedSeq& x) const;

  private:
    Vocab vocab_;
    int length_ = 0;
    std::vector<std::pair<MaskedSeq, double>> support_;
    std::vector<double> cdf_;
};

// Dataset-backed distribution, sampled uniformly.
class EmpiricalDist {
  public:
    EmpiricalDist(Vocab vocab, std::vector<MaskedSeq> dataset);

    const Vocab& vocab() const { return vocab_; }
    int length() const { return length_; }
    const std::vector<MaskedSeq>& dataset() const { return dataset_; }

    const MaskedSeq& sample(Rng& rng) const;

    // Uniform weights over the dataset, duplicates merged with summed weight.
    ExplicitDist to_explicit() const;

  private:
    Vocab vocab_;
    int length_ = 0;
    std::vector<MaskedSeq> dataset_;
};

class DataDistribution {
  public:
    explicit DataDistribution(ExplicitDist d) : impl_(std::move(d)) {}
    explicit DataDistribution(EmpiricalDist d) : impl_(std::move(d)) {}

    bool is_explicit() const { return std::holds_alternative<ExplicitDist>(impl_); }
    const ExplicitDist& as_explicit() const;
    const EmpiricalDist& as_empirical() const;

    // Explicit view for oracle use; converts an empirical distribution.
    ExplicitDist oracle_view() const;

    const Vocab& vocab() const;
    int length() const;
    const MaskedSeq& sample(Rng& rng) const;

  private:
    std::variant<ExplicitDist, EmpiricalDist> impl_;
};

// Exact unmasking posterior p(x^i = . | z) for a masked position i of z.
// Because both masking procedures choose the masked index set exchangeably,
// the posterior reduces to d restricted to sequences agreeing with z on clean
// positions; the reduction is validated against full joint enumeration in the
// test suite.
PosteriorRow oracle_posterior(const ExplicitDist& d, const MaskedSeq& z, int pos);

// Exact per-token quality p(x^i = y^i | y with position i re-masked).
double oracle_quality(const ExplicitDist& d, const MaskedSeq& y, int pos);

struct MaskSetDistribution {
    std::vector<std::pair<MaskSet, double>> entries; // probs sum to 1

    double prob_of(const MaskSet& s) const;
};

// Probability-weighted quality over masked-context views:
// sum over S of  pi(S) * p(x^i = y^i | y with S re-masked).
// Every S in the support must contain pos.
double oracle_extended_quality(const ExplicitDist& d, const MaskedSeq& y, int pos,
                               const MaskSetDistribution& mask_set_posterior);

// Unmask-set selection rule used when building fine-tuning samples.
enum class SelectRule { uniform, confidence };

SelectRule parse_select_rule(const std::string& name);

// Posterior callback: per-position posterior rows for a partially masked
// sequence. Backed by a model forward in production; tests may supply
// closed-form rows.
using PosteriorFn = std::function<std::vector<PosteriorRow>(const MaskedSeq&)>;

// One reachable (y, pos) state of the sample-construction process, with its
// exact reach probability, the conditional distribution over unmask sets, and
// the resulting quality target.
struct ReachableQuality {
    MaskedSeq y;
    int pos = 0;
    double reach_prob = 0.0;
    MaskSetDistribution mask_set_posterior;
    double extended_quality = 0.0;
};

struct FinetuneJoint {
    std::vector<ReachableQuality> states;

    const ReachableQuality* find(const MaskedSeq& y, int pos) const;
};

// Brute-force enumeration of the full sample-construction joint
// (x, masking outcome, unmask set, proposed tokens) for unmask-set size k,
// under the given frozen posterior model, selection rule, and nucleus
// truncation. Refuses when the elementary-operation estimate exceeds op_cap.
FinetuneJoint enumerate_finetune_joint(const ExplicitDist& d, const PosteriorFn& posterior_fn,
                                       SelectRule rule, int k, double nucleus_p,
                                       int64_t op_cap = kDefaultEnumerationCap);

// Conditional distribution of the unmask set given (y, pos) under the same
// process. Throws UnreachableStateError when (y, pos) cannot be produced.
MaskSetDistribution oracle_mask_set_posterior(const ExplicitDist& d,
                                              const PosteriorFn& posterior_fn, SelectRule rule,
                                              int k, const MaskedSeq& y, int pos,
                                              int64_t op_cap = kDefaultEnumerationCap);

// File formats. Explicit: one support element per line, "weight<TAB>ids".
ExplicitDist load_explicit(const std::string& path, const Vocab& vocab);
void save_explicit(const std::string& path, const ExplicitDist& d);
EmpiricalDist load_empirical(const std::string& path, const Vocab& vocab);

} // namespace prism
