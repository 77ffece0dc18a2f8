#pragma once

#include "prism/distribution.hpp"
#include "prism/inference.hpp"
#include "prism/model.hpp"
#include "prism/sudoku.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace prism {

struct EvalReport {
    std::map<std::string, double> metrics;
    int64_t sample_count = 0;
    uint64_t seed = 0;
    std::string plan_fingerprint;

    void validate() const; // every metric finite, sample count positive
    std::string csv_header() const;
    std::string csv_row() const;
    std::string summary() const;
};

struct WilsonInterval {
    double low = 0.0, high = 1.0;
};
// 95% score interval by default
WilsonInterval wilson_interval(int successes, int trials, double z = 1.959963984540054);

struct SuccessReport {
    double rate = 0.0;
    WilsonInterval ci;
    int trials = 0;
    int structural_failures = 0; // samples that do not detokenize
};

// Fraction of generated sequences that detokenize to a valid board (and agree
// with the frozen clues when conditioned). Sudoku-shaped models only.
SuccessReport success_rate(const Model& model, const ModelParams& params,
                           const InferencePlan& plan, int n_samples, uint64_t seed,
                           const std::optional<MaskedSeq>& condition = std::nullopt);

// Mann-Whitney AUROC with average ranks for ties; pairs are (score, label).
double score_label_auroc(std::vector<std::pair<double, int>> scored);

struct DetectionReport {
    double hit_at_c = 0.0;
    double auroc = 0.0;
    int trials = 0;
    int corruptions = 0;
};

// Corruption detection on known-wrong cells: per trial, corrupt `corruptions`
// cells of a board, score every clean position by the quality head, and ask
// whether the corrupted cells occupy the lowest ranks. AUROC pools
// (1 - quality) scores across trials.
DetectionReport detection_metrics(const Model& model, const ModelParams& params,
                                  const std::vector<Board>& boards, int corruptions,
                                  int n_trials, uint64_t seed);

// Per-position quality grid for corrupted boards, one CSV row per board row,
// for external plotting.
void write_quality_heatmap(const std::string& path, const Model& model,
                           const ModelParams& params, const Board& corrupted,
                           const MaskSet& corrupted_cells);

struct OracleGapReport {
    double max_posterior_gap = 0.0;
    double max_quality_gap = 0.0;
    int64_t posterior_states = 0;
    int64_t quality_states = 0;
};

// Max gap between the model and the exact oracles over every reachable state:
// posterior rows against the restriction oracle on all masked views of the
// support, quality values against the k-extended oracle under the sample
// construction driven by proposal_fn (states below reach_floor are skipped).
OracleGapReport oracle_gap(const Model& model, const ModelParams& params, const ExplicitDist& d,
                           int k, SelectRule rule, double nucleus_p,
                           const PosteriorFn& proposal_fn, double reach_floor = 0.0,
                           int64_t op_cap = kDefaultEnumerationCap);

struct NllReport {
    double nll = 0.0;               // mean over in-support samples
    double off_support_fraction = 0.0;
    int64_t samples = 0;
};

NllReport sequence_nll(const ExplicitDist& d, const std::vector<MaskedSeq>& samples);

// Plug-in Shannon entropy (nats) of the empirical sample distribution.
double sample_entropy(const std::vector<MaskedSeq>& samples);

} // namespace prism
