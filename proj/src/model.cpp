#include "prism/model.hpp"

#include "model_internal.hpp"
#include "prism/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace prism {

std::string backend_name(Backend b) {
    return b == Backend::tabular ? "tabular" : "neural";
}

Backend parse_backend(const std::string& name) {
    if (name == "tabular")
        return Backend::tabular;
    if (name == "neural")
        return Backend::neural;
    throw ConfigError("unknown backend '" + name + "' (expected tabular|neural)");
}

LossAdjoint LossAdjoint::zeros(int seq_len, int vocab_size) {
    LossAdjoint a;
    a.d_unmask.assign(size_t(seq_len) * size_t(vocab_size), 0.0);
    a.d_quality.assign(size_t(seq_len), 0.0);
    return a;
}

Model::Model(ArchitectureConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.vocab_size < 2)
        throw ConfigError("model: vocab_size must be at least 2");
    if (cfg_.seq_len < 1)
        throw ConfigError("model: seq_len must be positive");

    if (cfg_.backend == Backend::tabular) {
        const int64_t radix = cfg_.vocab_size + 1;
        int64_t states = 1;
        for (int i = 0; i < cfg_.seq_len; ++i) {
            if (states > cfg_.tabular_state_cap / radix)
                throw ConfigError("model: tabular state space (" +
                                  std::to_string(cfg_.vocab_size + 1) + "^" +
                                  std::to_string(cfg_.seq_len) + ") exceeds cap " +
                                  std::to_string(cfg_.tabular_state_cap));
            states *= radix;
        }
        n_states_ = states;
        layout_.backbone_begin = layout_.backbone_end = 0;
        layout_.unmask_begin = 0;
        layout_.unmask_end = size_t(states) * size_t(cfg_.seq_len) * size_t(cfg_.vocab_size);
        layout_.quality_begin = layout_.unmask_end;
        layout_.quality_end = layout_.quality_begin + size_t(states) * size_t(cfg_.seq_len);
        layout_.total = layout_.quality_end;
    } else {
        if (cfg_.embed_dim < 1 || cfg_.layers < 1 || cfg_.heads < 1 || cfg_.hidden_dim < 1)
            throw ConfigError("model: neural dimensions must be positive");
        if (cfg_.embed_dim % cfg_.heads != 0)
            throw ConfigError("model: embed_dim must be divisible by heads");
        if (cfg_.pos_encoding != "learned")
            throw ConfigError("model: unsupported positional encoding '" + cfg_.pos_encoding +
                              "'");
        neural_ = std::make_unique<NeuralLayout>();
        layout_ = build_neural_layout(cfg_, *neural_);
    }
}

Model::~Model() = default;

std::unique_ptr<Tape> Model::make_tape() const {
    return std::make_unique<Tape>();
}

int64_t Model::state_index(const MaskedSeq& z) const {
    if (cfg_.backend != Backend::tabular)
        throw std::logic_error("state_index: tabular backend only");
    const int64_t radix = cfg_.vocab_size + 1;
    int64_t s = 0;
    for (int i = z.length() - 1; i >= 0; --i) {
        int64_t digit = z.is_masked(i) ? cfg_.vocab_size : z.at(i);
        s = s * radix + digit;
    }
    return s;
}

MaskedSeq Model::seq_from_state(int64_t state) const {
    if (cfg_.backend != Backend::tabular)
        throw std::logic_error("seq_from_state: tabular backend only");
    const int64_t radix = cfg_.vocab_size + 1;
    std::vector<TokenId> tokens(size_t(cfg_.seq_len));
    for (int i = 0; i < cfg_.seq_len; ++i) {
        int64_t digit = state % radix;
        state /= radix;
        tokens[size_t(i)] = digit == cfg_.vocab_size ? vocab().mask_id() : TokenId(digit);
    }
    return MaskedSeq(vocab(), std::move(tokens));
}

ModelParams Model::init_params(Rng& rng) const {
    ModelParams p;
    p.values.assign(layout_.total, 0.0);
    if (cfg_.backend == Backend::neural)
        neural_init(*this, p, rng);
    return p;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void tabular_forward(const Model& model, const ModelParams& params, const MaskedSeq& z,
                     ModelOutputs& out, Tape* tape) {
    const auto& cfg = model.config();
    const auto& layout = model.layout();
    const int len = cfg.seq_len;
    const int n_vocab = cfg.vocab_size;
    int64_t state = model.state_index(z);

    out.posterior.assign(size_t(len), PosteriorRow{});
    out.quality.assign(size_t(len), 0.0);
    if (tape) {
        tape->state = state;
        tape->tokens = z.tokens();
        tape->unmask_logits.assign(size_t(len) * size_t(n_vocab), 0.0);
        tape->quality_logits.assign(size_t(len), 0.0);
    }

    for (int i = 0; i < len; ++i) {
        const double* raw =
            params.values.data() + layout.unmask_begin +
            (size_t(state) * size_t(len) + size_t(i)) * size_t(n_vocab);
        out.posterior[size_t(i)].probs.resize(size_t(n_vocab));
        softmax_shift_floor(raw, n_vocab, out.posterior[size_t(i)].probs.data());

        double q_raw =
            params.values[layout.quality_begin + size_t(state) * size_t(len) + size_t(i)];
        out.quality[size_t(i)] = sigmoid(clamp_logit(q_raw));
        if (tape) {
            std::memcpy(tape->unmask_logits.data() + size_t(i) * size_t(n_vocab), raw,
                        size_t(n_vocab) * sizeof(double));
            tape->quality_logits[size_t(i)] = q_raw;
        }
    }
}

void tabular_backward(const Model& model, const Tape& tape, const LossAdjoint& adjoint,
                      std::vector<double>& grad, const GradFlags& flags) {
    const auto& cfg = model.config();
    const auto& layout = model.layout();
    const int len = cfg.seq_len;
    const int n_vocab = cfg.vocab_size;
    const int64_t state = tape.state;

    if (!flags.freeze_unmask_head && !adjoint.d_unmask.empty()) {
        for (int i = 0; i < len; ++i) {
            size_t base = layout.unmask_begin +
                          (size_t(state) * size_t(len) + size_t(i)) * size_t(n_vocab);
            const double* raw = tape.unmask_logits.data() + size_t(i) * size_t(n_vocab);
            for (int v = 0; v < n_vocab; ++v) {
                double g = adjoint.d_unmask[size_t(i) * size_t(n_vocab) + size_t(v)];
                if (g != 0.0 && softmax_grad_passes(raw, n_vocab, v))
                    grad[base + size_t(v)] += g;
            }
        }
    }
    if (!adjoint.d_quality.empty()) {
        for (int i = 0; i < len; ++i) {
            double g = adjoint.d_quality[size_t(i)];
            if (g != 0.0 && clamp_passes(tape.quality_logits[size_t(i)]))
                grad[layout.quality_begin + size_t(state) * size_t(len) + size_t(i)] += g;
        }
    }
}

} // namespace

void Model::forward_impl(const ModelParams& params, const MaskedSeq& z, ModelOutputs& out,
                         Tape* tape) const {
    if (params.values.size() != layout_.total)
        throw std::invalid_argument("forward: parameter vector has wrong size");
    if (z.length() != cfg_.seq_len)
        throw std::invalid_argument("forward: sequence length mismatch");
    if (z.vocab().size != cfg_.vocab_size)
        throw std::invalid_argument("forward: vocabulary mismatch");

    forward_count_.fetch_add(1, std::memory_order_relaxed);
    if (cfg_.backend == Backend::tabular)
        tabular_forward(*this, params, z, out, tape);
    else
        neural_forward(*this, params, z, out, tape);

    for (int i = 0; i < cfg_.seq_len; ++i) {
        for (double p : out.posterior[size_t(i)].probs)
            if (!std::isfinite(p))
                goto nonfinite;
        if (!std::isfinite(out.quality[size_t(i)]))
            goto nonfinite;
    }
    return;

nonfinite: {
    double max_abs = 0.0, sq = 0.0;
    for (double v : params.values) {
        max_abs = std::max(max_abs, std::abs(v));
        sq += v * v;
    }
    throw NumericError("forward: non-finite activation (param max |v| = " +
                       format_double(max_abs) + ", l2 = " + format_double(std::sqrt(sq)) + ")");
}
}

ModelOutputs Model::forward(const ModelParams& params, const MaskedSeq& z) const {
    ModelOutputs out;
    forward_impl(params, z, out, nullptr);
    return out;
}

ModelOutputs Model::forward(const ModelParams& params, const MaskedSeq& z, Tape& tape) const {
    ModelOutputs out;
    forward_impl(params, z, out, &tape);
    return out;
}

void Model::backward(const ModelParams& params, const Tape& tape, const LossAdjoint& adjoint,
                     std::vector<double>& grad, const GradFlags& flags) const {
    if (grad.size() != layout_.total)
        throw std::invalid_argument("backward: gradient vector has wrong size");
    if (cfg_.backend == Backend::tabular)
        tabular_backward(*this, tape, adjoint, grad, flags);
    else
        neural_backward(*this, params, tape, adjoint, grad, flags);
}

PosteriorFn Model::posterior_fn(const ModelParams& params) const {
    return [this, &params](const MaskedSeq& z) { return forward(params, z).posterior; };
}

ModelParams fit_tabular_to_oracle(const Model& model, const ExplicitDist& d) {
    if (model.config().backend != Backend::tabular)
        throw std::logic_error("fit_tabular_to_oracle: tabular backend only");
    if (model.config().vocab_size != d.vocab().size || model.config().seq_len != d.length())
        throw std::invalid_argument("fit_tabular_to_oracle: model/distribution shape mismatch");

    const auto& layout = model.layout();
    const int len = model.config().seq_len;
    const int n_vocab = model.config().vocab_size;
    ModelParams params;
    params.values.assign(layout.total, 0.0);

    for (int64_t s = 0; s < model.state_count(); ++s) {
        MaskedSeq z = model.seq_from_state(s);
        for (int i = 0; i < len; ++i) {
            if (z.is_masked(i)) {
                try {
                    PosteriorRow row = oracle_posterior(d, z, i);
                    size_t base = layout.unmask_begin +
                                  (size_t(s) * size_t(len) + size_t(i)) * size_t(n_vocab);
                    for (int v = 0; v < n_vocab; ++v)
                        params.values[base + size_t(v)] =
                            row.probs[size_t(v)] > 0.0
                                ? std::max(std::log(row.probs[size_t(v)]), -30.0)
                                : -30.0;
                } catch (const UnreachableStateError&) {
                    // state never produced by the masking process; leave uniform
                }
            } else {
                try {
                    double q = oracle_quality(d, z, i);
                    double logit = q <= 0.0    ? -30.0
                                   : q >= 1.0 ? 30.0
                                              : clamp_logit(std::log(q / (1.0 - q)));
                    params.values[layout.quality_begin + size_t(s) * size_t(len) + size_t(i)] =
                        logit;
                } catch (const UnreachableStateError&) {
                }
            }
        }
    }
    return params;
}

ModelParams blur_tabular_posterior(const Model& model, const ModelParams& params, double alpha) {
    if (model.config().backend != Backend::tabular)
        throw std::logic_error("blur_tabular_posterior: tabular backend only");
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("blur_tabular_posterior: alpha must lie in [0, 1]");

    const auto& layout = model.layout();
    const int len = model.config().seq_len;
    const int n_vocab = model.config().vocab_size;
    ModelParams out = params;
    std::vector<double> probs(static_cast<size_t>(n_vocab));
    for (int64_t s = 0; s < model.state_count(); ++s) {
        for (int i = 0; i < len; ++i) {
            size_t base =
                layout.unmask_begin + (size_t(s) * size_t(len) + size_t(i)) * size_t(n_vocab);
            softmax_shift_floor(params.values.data() + base, n_vocab, probs.data());
            for (int v = 0; v < n_vocab; ++v) {
                double blurred =
                    (1.0 - alpha) * probs[size_t(v)] + alpha / double(n_vocab);
                out.values[base + size_t(v)] = std::max(std::log(blurred), -30.0);
            }
        }
    }
    return out;
}

GradCheckReport check_gradient(const std::function<double(const std::vector<double>&)>& loss_fn,
                               const std::vector<double>& at,
                               const std::vector<double>& analytic_grad, int n_coords,
                               double step, double tolerance, Rng& rng) {
    if (analytic_grad.size() != at.size())
        throw std::invalid_argument("check_gradient: gradient size mismatch");
    std::set<size_t> coords;
    while (int(coords.size()) < n_coords && coords.size() < at.size())
        coords.insert(size_t(rng.uniform_below(at.size())));

    GradCheckReport rep;
    rep.tolerance = tolerance;
    std::vector<double> perturbed = at;
    for (size_t c : coords) {
        perturbed[c] = at[c] + step;
        double up = loss_fn(perturbed);
        perturbed[c] = at[c] - step;
        double down = loss_fn(perturbed);
        perturbed[c] = at[c];
        double fd = (up - down) / (2.0 * step);
        double a = analytic_grad[c];
        double scale = std::max({std::abs(a), std::abs(fd), 1e-6});
        double rel = std::abs(a - fd) / scale;
        if (rel > rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst_coord = c;
        }
        rep.coords_checked++;
    }
    rep.passed = rep.max_rel_error < tolerance;
    return rep;
}

namespace {

void write_kv(std::ostream& out, const std::string& key, const std::string& value) {
    out << key << ' ' << value << '\n';
}

} // namespace

void save_checkpoint(const std::string& path, const Model& model, const ModelParams& params,
                     uint64_t seed, int64_t step) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("save_checkpoint: cannot open " + path);
    const auto& cfg = model.config();
    out << "prism-checkpoint v1\n";
    write_kv(out, "backend", backend_name(cfg.backend));
    write_kv(out, "vocab_size", std::to_string(cfg.vocab_size));
    write_kv(out, "seq_len", std::to_string(cfg.seq_len));
    write_kv(out, "embed_dim", std::to_string(cfg.embed_dim));
    write_kv(out, "layers", std::to_string(cfg.layers));
    write_kv(out, "heads", std::to_string(cfg.heads));
    write_kv(out, "hidden_dim", std::to_string(cfg.hidden_dim));
    write_kv(out, "pos_encoding", cfg.pos_encoding);
    write_kv(out, "tabular_state_cap", std::to_string(cfg.tabular_state_cap));
    write_kv(out, "seed", std::to_string(seed));
    write_kv(out, "step", std::to_string(step));
    write_kv(out, "params", std::to_string(params.values.size()));
    out << "data\n";
    out.write(reinterpret_cast<const char*>(params.values.data()),
              std::streamsize(params.values.size() * sizeof(double)));
    if (!out)
        throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "prism-checkpoint v1")
        throw std::runtime_error("load_checkpoint: " + path +
                                 " is not a version-1 checkpoint (got '" + line + "')");
    Checkpoint ck;
    size_t n_params = 0;
    while (std::getline(in, line)) {
        if (line == "data")
            break;
        std::istringstream ls(line);
        std::string key, value;
        ls >> key >> value;
        if (key == "backend")
            ck.config.backend = parse_backend(value);
        else if (key == "vocab_size")
            ck.config.vocab_size = std::stoi(value);
        else if (key == "seq_len")
            ck.config.seq_len = std::stoi(value);
        else if (key == "embed_dim")
            ck.config.embed_dim = std::stoi(value);
        else if (key == "layers")
            ck.config.layers = std::stoi(value);
        else if (key == "heads")
            ck.config.heads = std::stoi(value);
        else if (key == "hidden_dim")
            ck.config.hidden_dim = std::stoi(value);
        else if (key == "pos_encoding")
            ck.config.pos_encoding = value;
        else if (key == "tabular_state_cap")
            ck.config.tabular_state_cap = std::stoll(value);
        else if (key == "seed")
            ck.seed = std::stoull(value);
        else if (key == "step")
            ck.step = std::stoll(value);
        else if (key == "params")
            n_params = std::stoull(value);
        else
            throw std::runtime_error("load_checkpoint: unknown header key '" + key + "'");
    }
    ck.params.values.resize(n_params);
    in.read(reinterpret_cast<char*>(ck.params.values.data()),
            std::streamsize(n_params * sizeof(double)));
    if (size_t(in.gcount()) != n_params * sizeof(double))
        throw std::runtime_error("load_checkpoint: truncated parameter data in " + path);
    return ck;
}

ModelParams load_params_for(const Model& model, const std::string& path, uint64_t* seed,
                            int64_t* step) {
    Checkpoint ck = load_checkpoint(path);
    if (!(ck.config == model.config()))
        throw ConfigError("checkpoint " + path +
                          " was written for a different architecture; refusing to load");
    if (ck.params.values.size() != model.param_count())
        throw ConfigError("checkpoint " + path + " has wrong parameter count");
    if (seed)
        *seed = ck.seed;
    if (step)
        *step = ck.step;
    return std::move(ck.params);
}

} // namespace prism
