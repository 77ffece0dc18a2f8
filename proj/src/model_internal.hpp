#pragma once

#include "prism/model.hpp"

#include <cmath>
#include <vector>

namespace prism {

struct TensorRef {
    size_t off = 0;
    int rows = 0, cols = 0;
    size_t size() const { return size_t(rows) * size_t(cols); }
};

struct Model::NeuralLayout {
    TensorRef tok_emb, pos_emb;
    struct Layer {
        TensorRef ln1_g, ln1_b;
        TensorRef wq, bq, wk, bk, wv, bv, wo, bo;
        TensorRef ln2_g, ln2_b;
        TensorRef w1, b1, w2, b2;
    };
    std::vector<Layer> layer;
    TensorRef lnf_g, lnf_b;
    TensorRef head_u_w, head_u_b; // unmask segment
    TensorRef head_q_w, head_q_b; // quality segment
};

SegmentLayout build_neural_layout(const ArchitectureConfig& cfg, Model::NeuralLayout& out);

void neural_forward(const Model& model, const ModelParams& params, const MaskedSeq& z,
                    ModelOutputs& out, Tape* tape);

void neural_backward(const Model& model, const ModelParams& params, const Tape& tape,
                     const LossAdjoint& adjoint, std::vector<double>& grad,
                     const GradFlags& flags);

void neural_init(const Model& model, ModelParams& params, Rng& rng);

inline double clamp_logit(double x) { return x < -30.0 ? -30.0 : (x > 30.0 ? 30.0 : x); }
inline bool clamp_passes(double x) { return x > -30.0 && x < 30.0; }

// Softmax is shift invariant, so the numerical guard floors the max-shifted
// logits at -30 (bounding -log p) instead of clamping raw values, which would
// flatten any pair of logits that grow past the clamp together.
inline void softmax_shift_floor(const double* raw, int n, double* out) {
    double mx = raw[0];
    for (int v = 1; v < n; ++v)
        mx = raw[v] > mx ? raw[v] : mx;
    double sum = 0.0;
    for (int v = 0; v < n; ++v) {
        double s = raw[v] - mx;
        out[v] = std::exp(s < -30.0 ? -30.0 : s);
        sum += out[v];
    }
    for (int v = 0; v < n; ++v)
        out[v] /= sum;
}

// gradient gate for one softmax coordinate under the shifted floor
inline bool softmax_grad_passes(const double* raw, int n, int v) {
    double mx = raw[0];
    for (int i = 1; i < n; ++i)
        mx = raw[i] > mx ? raw[i] : mx;
    return raw[v] - mx > -30.0;
}

} // namespace prism
