#pragma once

#include "prism/distribution.hpp"
#include "prism/masking.hpp"
#include "prism/model.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace prism {

// One fine-tuning sample: clean source, its masked context, and the candidate
// sequence obtained by proposing tokens at the positions in `proposed`.
struct TrainTriple {
    MaskedSeq clean;     // fully clean source
    MaskedSeq context;   // masked view the proposals were drawn from
    MaskedSeq candidate; // context with proposed tokens placed
    MaskSet proposed;    // |proposed| = k; masked in context, clean in candidate

    void validate() const;
};

enum class OptimizerKind { sgd, adamw, fisher_sgd };

OptimizerKind parse_optimizer(const std::string& name);
std::string optimizer_name(OptimizerKind k);

enum class LrSchedule { constant, cosine };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 3e-4;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    LrSchedule schedule = LrSchedule::constant;
    int64_t warmup_steps = 0;
    int64_t total_steps = 0; // filled by the training loops for cosine decay
};

LrSchedule parse_lr_schedule(const std::string& name);

// Parameter updater. `fisher_sgd` is a per-coordinate Robbins-Monro scheme
// for tabular quality logits: each visited coordinate keeps the exact running
// mean of its binary labels in probability space (the natural-gradient step
// for a Bernoulli-logit model with 1/n schedule). It reads the label back
// from the gradient, so it expects batch 1 / n_y 1 and lr set to the
// adjoint scale (= k). Coordinates outside the quality segment are left
// untouched by fisher_sgd.
class Optimizer {
  public:
    Optimizer(OptimizerConfig cfg, const SegmentLayout& layout, int64_t start_step = 0);

    void step(std::vector<double>& params, const std::vector<double>& grad);
    int64_t steps_taken() const { return t_; }
    double current_lr() const;

  private:
    OptimizerConfig cfg_;
    SegmentLayout layout_;
    int64_t t_ = 0;
    std::vector<double> m_, v_;      // adamw moments
    std::vector<int64_t> visits_;    // fisher_sgd
};

struct LossResult {
    double value = 0.0;
    LossAdjoint adjoint;
};

// Cross-entropy over masked positions, averaged by the masked count.
LossResult mdm_loss(const ModelOutputs& outputs, const MaskedSeq& x, const MaskedSeq& z);

// Binary cross-entropy; probabilities clamped to [1e-12, 1 - 1e-12].
double bce(int label, double p);

// Mean BCE of "proposed token matches the source" against the quality head,
// over the proposed positions.
LossResult prism_loss(const ModelOutputs& outputs_on_candidate, const TrainTriple& triple);

struct TotalLoss {
    double value = 0.0;
    double prism_value = 0.0;
    double mdm_value = 0.0;
    LossAdjoint adj_candidate; // quality-head adjoint on the candidate forward
    LossAdjoint adj_context;   // unmask-head adjoint on the context forward
};

TotalLoss total_loss(const ModelOutputs& on_candidate, const ModelOutputs& on_context,
                     const TrainTriple& triple, double lambda);

struct FinetuneConfig {
    int64_t start_step = 0; // resume offset; per-step rng streams are absolute
    int k = 4;
    int n_y = 1;
    double nucleus_p = 1.0;
    double lambda = 5.0;
    SelectRule select_rule = SelectRule::uniform;
    bool freeze_backbone = false;
    OptimizerConfig optimizer;
    int batch = 256;
    int64_t steps = 0;
    int threads = 2;
    int log_every = 50;
    int checkpoint_every = 0;
};

// Constructs n_y triples from the already computed posterior of one context.
// Does not evaluate the model.
std::vector<TrainTriple> build_triples_from_outputs(const MaskedSeq& x, const MaskedSeq& z,
                                                    const std::vector<PosteriorRow>& posterior,
                                                    const FinetuneConfig& cfg, Rng& rng);

// Samples x, masks it with at least k masked positions, evaluates the frozen
// model once, and builds n_y triples. Returns nullopt (skip-sample) when the
// masking cannot reach k within the resample bound. No gradient state is
// created by the forward.
std::optional<std::vector<TrainTriple>> build_triples(const DataDistribution& d,
                                                      const Model& model,
                                                      const ModelParams& params,
                                                      const FinetuneConfig& cfg, Rng& rng);

struct TrainMetricsRow {
    int64_t step = 0;
    double mdm_loss = 0.0;
    double prism_loss = 0.0;
    double total = 0.0;
    double wall_ms = 0.0;
};

struct TrainHooks {
    std::function<void(const TrainMetricsRow&, const ModelParams&)> on_log;
    std::function<void(int64_t, const ModelParams&)> on_checkpoint;
};

struct PretrainConfig {
    int64_t start_step = 0; // resume offset; per-step rng streams are absolute
    OptimizerConfig optimizer;
    int batch = 64;
    int64_t steps = 0;
    int threads = 2;
    int log_every = 50;
    int checkpoint_every = 0;
};

// Stochastic-gradient loop on the masked cross-entropy. Divergence (non-finite
// loss) checkpoints the last finite parameters and raises NumericError.
ModelParams pretrain(const Model& model, const DataDistribution& d, const PretrainConfig& cfg,
                     uint64_t seed, const TrainHooks& hooks = {}, ModelParams init = {});

// Triple construction -> joint loss -> optimizer step. The proposal forward is
// shared with the regularizer term, so each element costs 1 + n_y forwards.
ModelParams finetune(const Model& model, ModelParams start, const DataDistribution& d,
                     const FinetuneConfig& cfg, uint64_t seed, const TrainHooks& hooks = {});

} // namespace prism
