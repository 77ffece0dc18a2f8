#pragma once

#include "prism/core.hpp"
#include "prism/distribution.hpp"
#include "prism/rng.hpp"

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace prism {

enum class Backend { tabular, neural };

std::string backend_name(Backend b);
Backend parse_backend(const std::string& name);

struct ArchitectureConfig {
    Backend backend = Backend::neural;
    int vocab_size = 0; // |V|; the mask sentinel sits at id == vocab_size
    int seq_len = 0;    // L
    // neural backend
    int embed_dim = 64;
    int layers = 4;
    int heads = 4;
    int hidden_dim = 256;
    std::string pos_encoding = "learned";
    // tabular backend guard on (|V|+1)^L states
    int64_t tabular_state_cap = int64_t(1) << 24;

    bool operator==(const ArchitectureConfig&) const = default;
};

// Named segments of the flat parameter vector.
struct SegmentLayout {
    size_t backbone_begin = 0, backbone_end = 0;
    size_t unmask_begin = 0, unmask_end = 0;
    size_t quality_begin = 0, quality_end = 0;
    size_t total = 0;
};

struct ModelParams {
    std::vector<double> values;
};

// One forward evaluation: per-position unmasking posterior and quality.
// Only masked positions of `posterior` and clean positions of `quality`
// carry contract meaning; both are defined everywhere.
struct ModelOutputs {
    std::vector<PosteriorRow> posterior;
    std::vector<double> quality;
};

// Gradient of a scalar loss with respect to the pre-clamp head logits.
// Rows the loss does not touch stay zero.
struct LossAdjoint {
    std::vector<double> d_unmask;  // seq_len * vocab_size, row-major
    std::vector<double> d_quality; // seq_len

    static LossAdjoint zeros(int seq_len, int vocab_size);
};

struct GradFlags {
    bool freeze_unmask_head = false;
    bool freeze_backbone = false;
};

// Activation record of one forward pass; buffers are reused between calls.
class Tape {
  public:
    // tabular
    int64_t state = -1;
    // shared: pre-clamp head logits (the clamp gates the gradient)
    std::vector<double> unmask_logits;  // L x V
    std::vector<double> quality_logits; // L
    std::vector<TokenId> tokens;

    // neural activations
    struct LayerActs {
        std::vector<double> ln1_hat, ln1_rstd, ln1_out;
        std::vector<double> q, k, v;  // L x E, heads side by side
        std::vector<double> att_p;    // H x L x L softmax rows
        std::vector<double> att_o;    // L x E, input to the output projection
        std::vector<double> ln2_hat, ln2_rstd, ln2_out;
        std::vector<double> mlp_pre, mlp_act; // L x F
    };
    std::vector<LayerActs> layers;
    std::vector<double> lnf_hat, lnf_rstd, lnf_out;
};

class Model {
  public:
    explicit Model(ArchitectureConfig cfg);
    ~Model();
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ArchitectureConfig& config() const { return cfg_; }
    const SegmentLayout& layout() const { return layout_; }
    Vocab vocab() const { return Vocab(cfg_.vocab_size); }
    size_t param_count() const { return layout_.total; }

    // Backbone weights scaled-normal (std 0.02); both heads zero, so a fresh
    // model emits uniform posteriors and quality 0.5 everywhere.
    ModelParams init_params(Rng& rng) const;

    ModelOutputs forward(const ModelParams& params, const MaskedSeq& z) const;
    ModelOutputs forward(const ModelParams& params, const MaskedSeq& z, Tape& tape) const;

    // Accumulates the exact reverse-mode gradient into grad (size total).
    void backward(const ModelParams& params, const Tape& tape, const LossAdjoint& adjoint,
                  std::vector<double>& grad, const GradFlags& flags = {}) const;

    std::unique_ptr<Tape> make_tape() const;

    uint64_t forward_count() const { return forward_count_.load(std::memory_order_relaxed); }
    void reset_forward_count() const { forward_count_.store(0, std::memory_order_relaxed); }

    // Tabular only: dense state index of a sequence.
    int64_t state_index(const MaskedSeq& z) const;
    int64_t state_count() const { return n_states_; }
    MaskedSeq seq_from_state(int64_t state) const;

    PosteriorFn posterior_fn(const ModelParams& params) const;

  private:
    struct NeuralLayout;
    friend void neural_forward(const Model&, const ModelParams&, const MaskedSeq&, ModelOutputs&,
                               Tape*);
    friend void neural_backward(const Model&, const ModelParams&, const Tape&, const LossAdjoint&,
                                std::vector<double>&, const GradFlags&);
    friend void neural_init(const Model&, ModelParams&, Rng&);
    friend SegmentLayout build_neural_layout(const ArchitectureConfig&, NeuralLayout&);
    ArchitectureConfig cfg_;
    SegmentLayout layout_;
    int64_t n_states_ = 0; // tabular
    std::unique_ptr<NeuralLayout> neural_;
    mutable std::atomic<uint64_t> forward_count_{0};

    void forward_impl(const ModelParams& params, const MaskedSeq& z, ModelOutputs& out,
                      Tape* tape) const;
};

// Closed-form fit of a tabular model to the exact oracles of d: posterior
// logits are log oracle probabilities, quality logits the logit of the oracle
// quality; unreachable states stay at zero logits.
ModelParams fit_tabular_to_oracle(const Model& model, const ExplicitDist& d);

// Mixes every posterior row with the uniform distribution:
// row' = (1 - alpha) * row + alpha * uniform. Quality head untouched.
ModelParams blur_tabular_posterior(const Model& model, const ModelParams& params, double alpha);

struct GradCheckReport {
    int coords_checked = 0;
    double max_rel_error = 0.0;
    size_t worst_coord = 0;
    double tolerance = 0.0;
    bool passed = false;
};

// Central-difference check of an analytic gradient on a random coordinate
// subset of a scalar function of the parameters.
GradCheckReport check_gradient(const std::function<double(const std::vector<double>&)>& loss_fn,
                               const std::vector<double>& at,
                               const std::vector<double>& analytic_grad, int n_coords,
                               double step, double tolerance, Rng& rng);

struct Checkpoint {
    ArchitectureConfig config;
    ModelParams params;
    uint64_t seed = 0;
    int64_t step = 0;
};

void save_checkpoint(const std::string& path, const Model& model, const ModelParams& params,
                     uint64_t seed, int64_t step);
Checkpoint load_checkpoint(const std::string& path);
// Loads and verifies the stored config matches; mismatch is an error, never a reshape.
ModelParams load_params_for(const Model& model, const std::string& path, uint64_t* seed = nullptr,
                            int64_t* step = nullptr);

} // namespace prism
