#include "prism/training.hpp"

#include "model_internal.hpp"

#include "prism/util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

namespace prism {

void TrainTriple::validate() const {
    if (candidate.length() != context.length() || clean.length() != context.length())
        throw std::logic_error("TrainTriple: length mismatch");
    for (int i = 0; i < context.length(); ++i) {
        bool in_s = proposed.contains(i);
        if (in_s) {
            if (!context.is_masked(i) || candidate.is_masked(i))
                throw std::logic_error("TrainTriple: proposed position not masked->clean");
        } else if (candidate.at(i) != context.at(i)) {
            throw std::logic_error("TrainTriple: candidate differs from context off the set");
        }
        if (clean.is_masked(i))
            throw std::logic_error("TrainTriple: source must be fully clean");
    }
}

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd")
        return OptimizerKind::sgd;
    if (name == "adamw")
        return OptimizerKind::adamw;
    if (name == "fisher_sgd")
        return OptimizerKind::fisher_sgd;
    throw ConfigError("unknown optimizer '" + name + "' (expected sgd|adamw|fisher_sgd)");
}

std::string optimizer_name(OptimizerKind k) {
    switch (k) {
    case OptimizerKind::sgd:
        return "sgd";
    case OptimizerKind::adamw:
        return "adamw";
    case OptimizerKind::fisher_sgd:
        return "fisher_sgd";
    }
    return "?";
}

LrSchedule parse_lr_schedule(const std::string& name) {
    if (name == "constant")
        return LrSchedule::constant;
    if (name == "cosine")
        return LrSchedule::cosine;
    throw ConfigError("unknown lr schedule '" + name + "' (expected constant|cosine)");
}

Optimizer::Optimizer(OptimizerConfig cfg, const SegmentLayout& layout, int64_t start_step)
    : cfg_(cfg), layout_(layout), t_(start_step) {
    if (cfg_.kind == OptimizerKind::adamw) {
        m_.assign(layout.total, 0.0);
        v_.assign(layout.total, 0.0);
    } else if (cfg_.kind == OptimizerKind::fisher_sgd) {
        visits_.assign(layout.total, 0);
    }
}

double Optimizer::current_lr() const {
    // warmup ramps linearly; cosine decays to a tenth of the peak
    double lr = cfg_.lr;
    int64_t t = t_ + 1;
    if (cfg_.warmup_steps > 0 && t <= cfg_.warmup_steps)
        return lr * double(t) / double(cfg_.warmup_steps);
    if (cfg_.schedule == LrSchedule::cosine && cfg_.total_steps > cfg_.warmup_steps) {
        double progress = double(t - cfg_.warmup_steps) /
                          double(cfg_.total_steps - cfg_.warmup_steps);
        progress = std::min(1.0, std::max(0.0, progress));
        double floor = 0.1;
        lr *= floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    }
    return lr;
}

void Optimizer::step(std::vector<double>& params, const std::vector<double>& grad) {
    if (params.size() != layout_.total || grad.size() != layout_.total)
        throw std::invalid_argument("Optimizer::step: size mismatch");
    const double lr = current_lr();
    ++t_;
    switch (cfg_.kind) {
    case OptimizerKind::sgd: {
        for (size_t i = 0; i < params.size(); ++i)
            params[i] -= lr * (grad[i] + cfg_.weight_decay * params[i]);
        break;
    }
    case OptimizerKind::adamw: {
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            double gi = grad[i];
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * gi;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * gi * gi;
            double update = (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.eps);
            params[i] -= lr * (update + cfg_.weight_decay * params[i]);
        }
        break;
    }
    case OptimizerKind::fisher_sgd: {
        // exact running mean of binary labels in probability space; lr is the
        // adjoint scale that recovers the per-visit residual (p - label)
        for (size_t i = layout_.quality_begin; i < layout_.quality_end; ++i) {
            double gi = grad[i];
            if (gi == 0.0)
                continue;
            int64_t n = ++visits_[i];
            double logit = std::clamp(params[i], -30.0, 30.0);
            double p = 1.0 / (1.0 + std::exp(-logit));
            double label_hat = p - cfg_.lr * gi;
            double p_new = p + (label_hat - p) / double(n);
            p_new = std::clamp(p_new, 1e-13, 1.0 - 1e-13);
            params[i] = std::clamp(std::log(p_new / (1.0 - p_new)), -30.0, 30.0);
        }
        break;
    }
    }
}

LossResult mdm_loss(const ModelOutputs& outputs, const MaskedSeq& x, const MaskedSeq& z) {
    const int len = z.length();
    const int n_vocab = z.vocab().size;
    int n = masked_positions(z).size();
    if (n < 1)
        throw std::invalid_argument("mdm_loss: no masked positions");

    LossResult res;
    res.adjoint = LossAdjoint::zeros(len, n_vocab);
    KahanSum loss;
    const double inv_n = 1.0 / double(n);
    for (int i = 0; i < len; ++i) {
        if (!z.is_masked(i))
            continue;
        TokenId target = x.at(i);
        if (target == x.vocab().mask_id())
            throw std::invalid_argument("mdm_loss: source is masked at a masked position");
        const auto& row = outputs.posterior[size_t(i)].probs;
        double p = std::max(row[size_t(target)], 1e-300);
        loss.add(-std::log(p) * inv_n);
        // d loss / d logit = (softmax - onehot) / n
        double* adj = res.adjoint.d_unmask.data() + size_t(i) * size_t(n_vocab);
        for (int v = 0; v < n_vocab; ++v)
            adj[v] = row[size_t(v)] * inv_n;
        adj[target] -= inv_n;
    }
    res.value = loss.value();
    return res;
}

double bce(int label, double p) {
    if (label != 0 && label != 1)
        throw std::invalid_argument("bce: label must be 0 or 1");
    p = std::clamp(p, 1e-12, 1.0 - 1e-12);
    return label ? -std::log(p) : -std::log(1.0 - p);
}

LossResult prism_loss(const ModelOutputs& outputs_on_candidate, const TrainTriple& triple) {
    const int len = triple.candidate.length();
    const int n_vocab = triple.candidate.vocab().size;
    if (triple.proposed.empty())
        throw std::invalid_argument("prism_loss: empty proposed set");

    LossResult res;
    res.adjoint = LossAdjoint::zeros(len, n_vocab);
    const double inv_k = 1.0 / double(triple.proposed.size());
    KahanSum loss;
    for (int i : triple.proposed.indices()) {
        int label = triple.clean.at(i) == triple.candidate.at(i) ? 1 : 0;
        double q = outputs_on_candidate.quality[size_t(i)];
        loss.add(bce(label, q) * inv_k);
        // d loss / d quality logit = (sigmoid - label) / k
        res.adjoint.d_quality[size_t(i)] = (q - double(label)) * inv_k;
    }
    res.value = loss.value();
    return res;
}

TotalLoss total_loss(const ModelOutputs& on_candidate, const ModelOutputs& on_context,
                     const TrainTriple& triple, double lambda) {
    TotalLoss out;
    LossResult prism = prism_loss(on_candidate, triple);
    out.prism_value = prism.value;
    out.adj_candidate = std::move(prism.adjoint);
    if (lambda != 0.0) {
        LossResult mdm = mdm_loss(on_context, triple.clean, triple.context);
        out.mdm_value = mdm.value;
        out.adj_context = std::move(mdm.adjoint);
        for (double& g : out.adj_context.d_unmask)
            g *= lambda;
        for (double& g : out.adj_context.d_quality)
            g *= lambda;
    } else {
        out.adj_context = LossAdjoint::zeros(triple.context.length(),
                                             triple.context.vocab().size);
    }
    out.value = out.prism_value + lambda * out.mdm_value;
    return out;
}

std::vector<TrainTriple> build_triples_from_outputs(const MaskedSeq& x, const MaskedSeq& z,
                                                    const std::vector<PosteriorRow>& posterior,
                                                    const FinetuneConfig& cfg, Rng& rng) {
    MaskSet masked = masked_positions(z);
    if (masked.size() < cfg.k)
        throw std::invalid_argument("build_triples_from_outputs: fewer masked positions than k");

    // nucleus-truncated proposal rows, computed once per masked position
    std::vector<PosteriorRow> trunc(size_t(z.length()));
    for (int i : masked.indices())
        trunc[size_t(i)] = nucleus_truncate(posterior[size_t(i)], cfg.nucleus_p);

    std::vector<int> confidence_set;
    if (cfg.select_rule == SelectRule::confidence) {
        std::vector<int> order = masked.indices();
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            double ma = *std::max_element(posterior[size_t(a)].probs.begin(),
                                          posterior[size_t(a)].probs.end());
            double mb = *std::max_element(posterior[size_t(b)].probs.begin(),
                                          posterior[size_t(b)].probs.end());
            return ma > mb;
        });
        confidence_set.assign(order.begin(), order.begin() + cfg.k);
        std::sort(confidence_set.begin(), confidence_set.end());
    }

    std::vector<TrainTriple> triples;
    triples.reserve(size_t(cfg.n_y));
    for (int rep = 0; rep < cfg.n_y; ++rep) {
        std::vector<int> chosen;
        if (cfg.select_rule == SelectRule::uniform) {
            std::vector<int> pick = rng.sample_indices(masked.size(), cfg.k);
            for (int idx : pick)
                chosen.push_back(masked.indices()[size_t(idx)]);
        } else {
            chosen = confidence_set;
        }
        std::vector<TokenId> tokens = z.tokens();
        for (int i : chosen)
            tokens[size_t(i)] = sample_from_row(trunc[size_t(i)], rng);
        TrainTriple t{x, z, MaskedSeq(z.vocab(), std::move(tokens)), MaskSet(std::move(chosen))};
        triples.push_back(std::move(t));
    }
    return triples;
}

std::optional<std::vector<TrainTriple>> build_triples(const DataDistribution& d,
                                                      const Model& model,
                                                      const ModelParams& params,
                                                      const FinetuneConfig& cfg, Rng& rng) {
    const MaskedSeq& x = d.sample(rng);
    auto outcome = mask_with_min_count(x, cfg.k, rng);
    if (!outcome)
        return std::nullopt;
    ModelOutputs outputs = model.forward(params, outcome->z); // single evaluation
    return build_triples_from_outputs(x, outcome->z, outputs.posterior, cfg, rng);
}

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
        .count();
}

void reduce_thread_grads(std::vector<std::vector<double>>& grads) {
    for (size_t w = 1; w < grads.size(); ++w)
        for (size_t i = 0; i < grads[0].size(); ++i)
            grads[0][i] += grads[w][i];
}

} // namespace

ModelParams pretrain(const Model& model, const DataDistribution& d, const PretrainConfig& cfg,
                     uint64_t seed, const TrainHooks& hooks, ModelParams init) {
    if (cfg.steps < 1 || cfg.start_step < 0 || cfg.start_step >= cfg.steps)
        throw ConfigError("pretrain: need 0 <= start_step < steps");
    Rng init_rng(derive_seed(seed, 0x11));
    ModelParams params = init.values.empty() ? model.init_params(init_rng) : std::move(init);
    OptimizerConfig opt_cfg = cfg.optimizer;
    if (opt_cfg.total_steps == 0)
        opt_cfg.total_steps = cfg.steps;
    Optimizer opt(opt_cfg, model.layout(), cfg.start_step);

    const int threads = std::max(1, cfg.threads);
    std::vector<std::vector<double>> grads(static_cast<size_t>(threads));
    for (auto& g : grads)
        g.assign(model.param_count(), 0.0);
    std::vector<double> losses(static_cast<size_t>(cfg.batch));
    ModelParams prev = params;

    for (int64_t step = cfg.start_step; step < cfg.steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        for (auto& g : grads)
            std::fill(g.begin(), g.end(), 0.0);
        std::fill(losses.begin(), losses.end(), 0.0);

        parallel_for(cfg.batch, threads, [&](int begin, int end, int worker) {
            auto tape = model.make_tape();
            for (int e = begin; e < end; ++e) {
                Rng rng(derive_seed(seed, 0x101, uint64_t(step), uint64_t(e)));
                const MaskedSeq& x = d.sample(rng);
                auto outcome = mask_with_min_count(x, 1, rng);
                if (!outcome)
                    continue;
                ModelOutputs out = model.forward(params, outcome->z, *tape);
                LossResult loss = mdm_loss(out, x, outcome->z);
                losses[size_t(e)] = loss.value;
                for (double& g : loss.adjoint.d_unmask)
                    g /= double(cfg.batch);
                model.backward(params, *tape, loss.adjoint, grads[size_t(worker)]);
            }
        });

        reduce_thread_grads(grads);
        KahanSum mean_loss;
        for (double l : losses)
            mean_loss.add(l / double(cfg.batch));
        double loss_value = mean_loss.value();
        if (!std::isfinite(loss_value)) {
            if (hooks.on_checkpoint)
                hooks.on_checkpoint(step, prev);
            throw NumericError("pretrain: loss diverged at step " + std::to_string(step));
        }
        prev = params;
        opt.step(params.values, grads[0]);

        if (hooks.on_log && (step % std::max(1, cfg.log_every) == 0 || step == cfg.steps - 1)) {
            TrainMetricsRow row{step, loss_value, 0.0, loss_value, elapsed_ms(t0)};
            hooks.on_log(row, params);
        }
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 &&
            (step + 1) % cfg.checkpoint_every == 0)
            hooks.on_checkpoint(step + 1, params);
    }
    return params;
}

ModelParams finetune(const Model& model, ModelParams start, const DataDistribution& d,
                     const FinetuneConfig& cfg, uint64_t seed, const TrainHooks& hooks) {
    if (cfg.steps < 1 || cfg.start_step < 0 || cfg.start_step >= cfg.steps)
        throw ConfigError("finetune: need 0 <= start_step < steps");
    if (cfg.k < 1 || cfg.n_y < 1)
        throw ConfigError("finetune: k and n_y must be positive");
    if (cfg.k > model.config().seq_len)
        throw ConfigError("finetune: k exceeds sequence length");

    ModelParams params = std::move(start);
    OptimizerConfig opt_cfg = cfg.optimizer;
    if (opt_cfg.total_steps == 0)
        opt_cfg.total_steps = cfg.steps;
    Optimizer opt(opt_cfg, model.layout(), cfg.start_step);
    GradFlags prism_flags;
    prism_flags.freeze_backbone = cfg.freeze_backbone;
    GradFlags mdm_flags;
    mdm_flags.freeze_backbone = cfg.freeze_backbone;

    const int threads = std::max(1, cfg.threads);
    std::vector<std::vector<double>> grads(static_cast<size_t>(threads));
    for (auto& g : grads)
        g.assign(model.param_count(), 0.0);
    std::vector<double> prism_losses(static_cast<size_t>(cfg.batch)), mdm_losses(static_cast<size_t>(cfg.batch));
    std::vector<int> used(static_cast<size_t>(cfg.batch));
    ModelParams prev = params;

    for (int64_t step = cfg.start_step; step < cfg.steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        for (auto& g : grads)
            std::fill(g.begin(), g.end(), 0.0);
        std::fill(prism_losses.begin(), prism_losses.end(), 0.0);
        std::fill(mdm_losses.begin(), mdm_losses.end(), 0.0);
        std::fill(used.begin(), used.end(), 0);

        parallel_for(cfg.batch, threads, [&](int begin, int end, int worker) {
            auto tape_z = model.make_tape();
            auto tape_y = model.make_tape();
            std::vector<double>& grad = grads[size_t(worker)];
            for (int e = begin; e < end; ++e) {
                Rng rng(derive_seed(seed, 0x202, uint64_t(step), uint64_t(e)));
                const MaskedSeq& x = d.sample(rng);
                auto outcome = mask_with_min_count(x, cfg.k, rng);
                if (!outcome)
                    continue; // skip-sample
                used[size_t(e)] = 1;

                // one forward on the context serves both proposal sampling
                // (no gradient) and the regularizer term
                ModelOutputs out_z = model.forward(params, outcome->z, *tape_z);
                std::vector<TrainTriple> triples =
                    build_triples_from_outputs(x, outcome->z, out_z.posterior, cfg, rng);

                KahanSum prism_sum;
                for (const auto& triple : triples) {
                    ModelOutputs out_y = model.forward(params, triple.candidate, *tape_y);
                    LossResult prism = prism_loss(out_y, triple);
                    prism_sum.add(prism.value / double(cfg.n_y));
                    for (double& g : prism.adjoint.d_quality)
                        g /= double(cfg.n_y);
                    model.backward(params, *tape_y, prism.adjoint, grad, prism_flags);
                }
                prism_losses[size_t(e)] = prism_sum.value();

                if (cfg.lambda != 0.0) {
                    LossResult mdm = mdm_loss(out_z, x, outcome->z);
                    mdm_losses[size_t(e)] = mdm.value;
                    for (double& g : mdm.adjoint.d_unmask)
                        g *= cfg.lambda;
                    model.backward(params, *tape_z, mdm.adjoint, grad, mdm_flags);
                }
            }
        });

        reduce_thread_grads(grads);
        int n_used = 0;
        for (int u : used)
            n_used += u;
        if (n_used == 0)
            continue;
        const double inv_used = 1.0 / double(n_used);
        for (double& g : grads[0])
            g *= inv_used;

        KahanSum prism_mean, mdm_mean;
        for (int e = 0; e < cfg.batch; ++e) {
            prism_mean.add(prism_losses[size_t(e)] * inv_used);
            mdm_mean.add(mdm_losses[size_t(e)] * inv_used);
        }
        double total = prism_mean.value() + cfg.lambda * mdm_mean.value();
        if (!std::isfinite(total)) {
            if (hooks.on_checkpoint)
                hooks.on_checkpoint(step, prev);
            throw NumericError("finetune: loss diverged at step " + std::to_string(step));
        }
        prev = params;
        opt.step(params.values, grads[0]);

        if (hooks.on_log && (step % std::max(1, cfg.log_every) == 0 || step == cfg.steps - 1)) {
            TrainMetricsRow row{step, mdm_mean.value(), prism_mean.value(), total,
                                elapsed_ms(t0)};
            hooks.on_log(row, params);
        }
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 &&
            (step + 1) % cfg.checkpoint_every == 0)
            hooks.on_checkpoint(step + 1, params);
    }
    return params;
}

} // namespace prism
