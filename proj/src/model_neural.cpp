#include "model_internal.hpp"

#include "prism/util.hpp"

#include <cmath>
#include <cstring>
#include <vector>

namespace prism {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC0 = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

double gelu(double x) {
    double u = kGeluC0 * (x + kGeluC1 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    double u = kGeluC0 * (x + kGeluC1 * x * x * x);
    double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
}

// y[t] = x[t] W + b, W row-major [in][out]
void linear_fw(const double* x, const double* w, const double* b, double* y, int rows, int in,
               int out) {
    for (int t = 0; t < rows; ++t) {
        double* yt = y + size_t(t) * size_t(out);
        if (b)
            std::memcpy(yt, b, size_t(out) * sizeof(double));
        else
            std::memset(yt, 0, size_t(out) * sizeof(double));
        const double* xt = x + size_t(t) * size_t(in);
        for (int k = 0; k < in; ++k) {
            double xv = xt[k];
            const double* wk = w + size_t(k) * size_t(out);
            for (int j = 0; j < out; ++j)
                yt[j] += xv * wk[j];
        }
    }
}

// dx[t] (+)= dy[t] W^T, via a transposed weight copy so the inner loop runs
// contiguously over the input dimension
void linear_bw_data(const double* dy, const double* w, double* dx, int rows, int in, int out,
                    bool accumulate) {
    static thread_local std::vector<double> wt;
    wt.resize(size_t(in) * size_t(out));
    for (int k = 0; k < in; ++k)
        for (int j = 0; j < out; ++j)
            wt[size_t(j) * size_t(in) + size_t(k)] = w[size_t(k) * size_t(out) + size_t(j)];
    for (int t = 0; t < rows; ++t) {
        const double* dyt = dy + size_t(t) * size_t(out);
        double* dxt = dx + size_t(t) * size_t(in);
        if (!accumulate)
            std::memset(dxt, 0, size_t(in) * sizeof(double));
        for (int j = 0; j < out; ++j) {
            double dv = dyt[j];
            if (dv == 0.0)
                continue;
            const double* wtj = wt.data() + size_t(j) * size_t(in);
            for (int k = 0; k < in; ++k)
                dxt[k] += dv * wtj[k];
        }
    }
}

// dW += x^T dy, db += column sums of dy
void linear_bw_param(const double* x, const double* dy, double* dw, double* db, int rows, int in,
                     int out) {
    for (int t = 0; t < rows; ++t) {
        const double* xt = x + size_t(t) * size_t(in);
        const double* dyt = dy + size_t(t) * size_t(out);
        for (int k = 0; k < in; ++k) {
            double xv = xt[k];
            double* dwk = dw + size_t(k) * size_t(out);
            for (int j = 0; j < out; ++j)
                dwk[j] += xv * dyt[j];
        }
        if (db)
            for (int j = 0; j < out; ++j)
                db[j] += dyt[j];
    }
}

void layernorm_fw(const double* x, const double* gamma, const double* beta, double* hat,
                  double* rstd, double* y, int rows, int dim) {
    for (int t = 0; t < rows; ++t) {
        const double* xt = x + size_t(t) * size_t(dim);
        double mu = 0.0;
        for (int e = 0; e < dim; ++e)
            mu += xt[e];
        mu /= dim;
        double var = 0.0;
        for (int e = 0; e < dim; ++e)
            var += (xt[e] - mu) * (xt[e] - mu);
        var /= dim;
        double r = 1.0 / std::sqrt(var + kLnEps);
        rstd[t] = r;
        double* hatt = hat + size_t(t) * size_t(dim);
        double* yt = y + size_t(t) * size_t(dim);
        for (int e = 0; e < dim; ++e) {
            hatt[e] = (xt[e] - mu) * r;
            yt[e] = gamma[e] * hatt[e] + beta[e];
        }
    }
}

// dx (+)= LN backward of dy; also accumulates dgamma/dbeta
void layernorm_bw(const double* dy, const double* hat, const double* rstd, const double* gamma,
                  double* dx, double* dgamma, double* dbeta, int rows, int dim, bool accumulate) {
    std::vector<double> dyg(static_cast<size_t>(dim));
    for (int t = 0; t < rows; ++t) {
        const double* dyt = dy + size_t(t) * size_t(dim);
        const double* hatt = hat + size_t(t) * size_t(dim);
        double m1 = 0.0, m2 = 0.0;
        for (int e = 0; e < dim; ++e) {
            dyg[size_t(e)] = dyt[e] * gamma[e];
            m1 += dyg[size_t(e)];
            m2 += dyg[size_t(e)] * hatt[e];
            dgamma[e] += dyt[e] * hatt[e];
            dbeta[e] += dyt[e];
        }
        m1 /= dim;
        m2 /= dim;
        double* dxt = dx + size_t(t) * size_t(dim);
        for (int e = 0; e < dim; ++e) {
            double v = (dyg[size_t(e)] - m1 - hatt[e] * m2) * rstd[t];
            if (accumulate)
                dxt[e] += v;
            else
                dxt[e] = v;
        }
    }
}

} // namespace

SegmentLayout build_neural_layout(const ArchitectureConfig& cfg, Model::NeuralLayout& out) {
    const int emb_rows = cfg.vocab_size + 1; // mask sentinel has its own row
    const int E = cfg.embed_dim, L = cfg.seq_len, F = cfg.hidden_dim, V = cfg.vocab_size;
    size_t off = 0;
    auto alloc = [&off](int rows, int cols) {
        TensorRef r{off, rows, cols};
        off += r.size();
        return r;
    };
    out.tok_emb = alloc(emb_rows, E);
    out.pos_emb = alloc(L, E);
    out.layer.resize(size_t(cfg.layers));
    for (auto& lr : out.layer) {
        lr.ln1_g = alloc(E, 1);
        lr.ln1_b = alloc(E, 1);
        lr.wq = alloc(E, E);
        lr.bq = alloc(E, 1);
        lr.wk = alloc(E, E);
        lr.bk = alloc(E, 1);
        lr.wv = alloc(E, E);
        lr.bv = alloc(E, 1);
        lr.wo = alloc(E, E);
        lr.bo = alloc(E, 1);
        lr.ln2_g = alloc(E, 1);
        lr.ln2_b = alloc(E, 1);
        lr.w1 = alloc(E, F);
        lr.b1 = alloc(F, 1);
        lr.w2 = alloc(F, E);
        lr.b2 = alloc(E, 1);
    }
    out.lnf_g = alloc(E, 1);
    out.lnf_b = alloc(E, 1);

    SegmentLayout seg;
    seg.backbone_begin = 0;
    seg.backbone_end = off;
    seg.unmask_begin = off;
    out.head_u_w = alloc(E, V);
    out.head_u_b = alloc(V, 1);
    seg.unmask_end = off;
    seg.quality_begin = off;
    out.head_q_w = alloc(E, 1);
    out.head_q_b = alloc(1, 1);
    seg.quality_end = off;
    seg.total = off;
    return seg;
}

void neural_init(const Model& model, ModelParams& params, Rng& rng) {
    const auto& nl = *model.neural_;
    auto fill_normal = [&](const TensorRef& r) {
        for (size_t i = 0; i < r.size(); ++i)
            params.values[r.off + i] = 0.02 * rng.normal();
    };
    auto fill_ones = [&](const TensorRef& r) {
        for (size_t i = 0; i < r.size(); ++i)
            params.values[r.off + i] = 1.0;
    };
    fill_normal(nl.tok_emb);
    fill_normal(nl.pos_emb);
    for (const auto& lr : nl.layer) {
        fill_ones(lr.ln1_g);
        fill_normal(lr.wq);
        fill_normal(lr.wk);
        fill_normal(lr.wv);
        fill_normal(lr.wo);
        fill_ones(lr.ln2_g);
        fill_normal(lr.w1);
        fill_normal(lr.w2);
    }
    fill_ones(nl.lnf_g);
    // biases, LN betas, and both heads stay zero
}

void neural_forward(const Model& model, const ModelParams& params, const MaskedSeq& z,
                    ModelOutputs& out, Tape* tape) {
    const auto& cfg = model.config();
    const auto& nl = *model.neural_;
    const int L = cfg.seq_len, E = cfg.embed_dim, H = cfg.heads, F = cfg.hidden_dim;
    const int V = cfg.vocab_size;
    const int Dh = E / H;
    const double scale = 1.0 / std::sqrt(double(Dh));
    const double* p = params.values.data();

    Tape local;
    Tape& tp = tape ? *tape : local;
    tp.tokens = z.tokens();
    tp.layers.resize(size_t(cfg.layers));

    std::vector<double> x(size_t(L) * size_t(E));
    for (int t = 0; t < L; ++t) {
        int row = z.is_masked(t) ? V : int(z.at(t));
        const double* te = p + nl.tok_emb.off + size_t(row) * size_t(E);
        const double* pe = p + nl.pos_emb.off + size_t(t) * size_t(E);
        double* xt = x.data() + size_t(t) * size_t(E);
        for (int e = 0; e < E; ++e)
            xt[e] = te[e] + pe[e];
    }

    std::vector<double> buf(size_t(L) * size_t(E));
    for (int li = 0; li < cfg.layers; ++li) {
        const auto& lr = nl.layer[size_t(li)];
        auto& acts = tp.layers[size_t(li)];
        acts.ln1_hat.resize(size_t(L) * size_t(E));
        acts.ln1_rstd.resize(size_t(L));
        acts.ln1_out.resize(size_t(L) * size_t(E));
        layernorm_fw(x.data(), p + lr.ln1_g.off, p + lr.ln1_b.off, acts.ln1_hat.data(),
                     acts.ln1_rstd.data(), acts.ln1_out.data(), L, E);

        acts.q.resize(size_t(L) * size_t(E));
        acts.k.resize(size_t(L) * size_t(E));
        acts.v.resize(size_t(L) * size_t(E));
        linear_fw(acts.ln1_out.data(), p + lr.wq.off, p + lr.bq.off, acts.q.data(), L, E, E);
        linear_fw(acts.ln1_out.data(), p + lr.wk.off, p + lr.bk.off, acts.k.data(), L, E, E);
        linear_fw(acts.ln1_out.data(), p + lr.wv.off, p + lr.bv.off, acts.v.data(), L, E, E);

        acts.att_p.assign(size_t(H) * size_t(L) * size_t(L), 0.0);
        acts.att_o.assign(size_t(L) * size_t(E), 0.0);
        std::vector<double> srow(static_cast<size_t>(L));
        for (int h = 0; h < H; ++h) {
            const int hoff = h * Dh;
            double* ph = acts.att_p.data() + size_t(h) * size_t(L) * size_t(L);
            for (int t = 0; t < L; ++t) {
                const double* qt = acts.q.data() + size_t(t) * size_t(E) + hoff;
                for (int u = 0; u < L; ++u) {
                    const double* ku = acts.k.data() + size_t(u) * size_t(E) + hoff;
                    double s = 0.0;
                    for (int e = 0; e < Dh; ++e)
                        s += qt[e] * ku[e];
                    srow[size_t(u)] = s * scale;
                }
                {
                    double mx = srow[0];
                    for (int u = 1; u < L; ++u)
                        mx = std::max(mx, srow[size_t(u)]);
                    double sum = 0.0;
                    for (int u = 0; u < L; ++u) {
                        srow[size_t(u)] = std::exp(srow[size_t(u)] - mx);
                        sum += srow[size_t(u)];
                    }
                    for (int u = 0; u < L; ++u)
                        srow[size_t(u)] /= sum;
                }
                double* prow = ph + size_t(t) * size_t(L);
                std::memcpy(prow, srow.data(), size_t(L) * sizeof(double));
                double* ot = acts.att_o.data() + size_t(t) * size_t(E) + hoff;
                for (int u = 0; u < L; ++u) {
                    double pv = prow[u];
                    const double* vu = acts.v.data() + size_t(u) * size_t(E) + hoff;
                    for (int e = 0; e < Dh; ++e)
                        ot[e] += pv * vu[e];
                }
            }
        }

        linear_fw(acts.att_o.data(), p + lr.wo.off, p + lr.bo.off, buf.data(), L, E, E);
        for (size_t i = 0; i < x.size(); ++i)
            x[i] += buf[i];

        acts.ln2_hat.resize(size_t(L) * size_t(E));
        acts.ln2_rstd.resize(size_t(L));
        acts.ln2_out.resize(size_t(L) * size_t(E));
        layernorm_fw(x.data(), p + lr.ln2_g.off, p + lr.ln2_b.off, acts.ln2_hat.data(),
                     acts.ln2_rstd.data(), acts.ln2_out.data(), L, E);

        acts.mlp_pre.resize(size_t(L) * size_t(F));
        acts.mlp_act.resize(size_t(L) * size_t(F));
        linear_fw(acts.ln2_out.data(), p + lr.w1.off, p + lr.b1.off, acts.mlp_pre.data(), L, E, F);
        for (size_t i = 0; i < acts.mlp_pre.size(); ++i)
            acts.mlp_act[i] = gelu(acts.mlp_pre[i]);
        linear_fw(acts.mlp_act.data(), p + lr.w2.off, p + lr.b2.off, buf.data(), L, F, E);
        for (size_t i = 0; i < x.size(); ++i)
            x[i] += buf[i];
    }

    tp.lnf_hat.resize(size_t(L) * size_t(E));
    tp.lnf_rstd.resize(size_t(L));
    tp.lnf_out.resize(size_t(L) * size_t(E));
    layernorm_fw(x.data(), p + nl.lnf_g.off, p + nl.lnf_b.off, tp.lnf_hat.data(),
                 tp.lnf_rstd.data(), tp.lnf_out.data(), L, E);

    tp.unmask_logits.resize(size_t(L) * size_t(V));
    tp.quality_logits.resize(size_t(L));
    linear_fw(tp.lnf_out.data(), p + nl.head_u_w.off, p + nl.head_u_b.off,
              tp.unmask_logits.data(), L, E, V);
    linear_fw(tp.lnf_out.data(), p + nl.head_q_w.off, p + nl.head_q_b.off,
              tp.quality_logits.data(), L, E, 1);

    out.posterior.assign(size_t(L), PosteriorRow{});
    out.quality.assign(size_t(L), 0.0);
    for (int t = 0; t < L; ++t) {
        auto& row = out.posterior[size_t(t)];
        row.probs.resize(size_t(V));
        softmax_shift_floor(tp.unmask_logits.data() + size_t(t) * size_t(V), V,
                            row.probs.data());
        double ql = clamp_logit(tp.quality_logits[size_t(t)]);
        out.quality[size_t(t)] = 1.0 / (1.0 + std::exp(-ql));
    }
}

void neural_backward(const Model& model, const ModelParams& params, const Tape& tape,
                     const LossAdjoint& adjoint, std::vector<double>& grad,
                     const GradFlags& flags) {
    const auto& cfg = model.config();
    const auto& nl = *model.neural_;
    const int L = cfg.seq_len, E = cfg.embed_dim, H = cfg.heads, F = cfg.hidden_dim;
    const int V = cfg.vocab_size;
    const int Dh = E / H;
    const double scale = 1.0 / std::sqrt(double(Dh));
    const double* p = params.values.data();
    double* g = grad.data();

    // head adjoints, gated by the logit clamp
    std::vector<double> du(size_t(L) * size_t(V), 0.0);
    std::vector<double> dq(size_t(L), 0.0);
    if (!adjoint.d_unmask.empty())
        for (int t = 0; t < L; ++t) {
            const double* raw = tape.unmask_logits.data() + size_t(t) * size_t(V);
            for (int v = 0; v < V; ++v) {
                size_t i = size_t(t) * size_t(V) + size_t(v);
                du[i] = softmax_grad_passes(raw, V, v) ? adjoint.d_unmask[i] : 0.0;
            }
        }
    if (!adjoint.d_quality.empty())
        for (size_t i = 0; i < dq.size(); ++i)
            dq[i] = clamp_passes(tape.quality_logits[i]) ? adjoint.d_quality[i] : 0.0;

    std::vector<double> d_lnf_out(size_t(L) * size_t(E), 0.0);
    if (!flags.freeze_unmask_head)
        linear_bw_param(tape.lnf_out.data(), du.data(), g + nl.head_u_w.off, g + nl.head_u_b.off,
                        L, E, V);
    linear_bw_data(du.data(), p + nl.head_u_w.off, d_lnf_out.data(), L, E, V, true);
    linear_bw_param(tape.lnf_out.data(), dq.data(), g + nl.head_q_w.off, g + nl.head_q_b.off, L,
                    E, 1);
    linear_bw_data(dq.data(), p + nl.head_q_w.off, d_lnf_out.data(), L, E, 1, true);

    if (flags.freeze_backbone)
        return;

    std::vector<double> dx(size_t(L) * size_t(E));
    layernorm_bw(d_lnf_out.data(), tape.lnf_hat.data(), tape.lnf_rstd.data(), p + nl.lnf_g.off,
                 dx.data(), g + nl.lnf_g.off, g + nl.lnf_b.off, L, E, false);

    std::vector<double> d_act(size_t(L) * size_t(F)), d_pre(size_t(L) * size_t(F));
    std::vector<double> d_ln(size_t(L) * size_t(E)), d_o(size_t(L) * size_t(E));
    std::vector<double> dqv(size_t(L) * size_t(E)), dkv(size_t(L) * size_t(E)),
        dvv(size_t(L) * size_t(E));
    std::vector<double> dprow(static_cast<size_t>(L));

    for (int li = cfg.layers - 1; li >= 0; --li) {
        const auto& lr = nl.layer[size_t(li)];
        const auto& acts = tape.layers[size_t(li)];

        // MLP: x_out = x_mid + W2(gelu(W1 ln2(x_mid)))
        linear_bw_data(dx.data(), p + lr.w2.off, d_act.data(), L, F, E, false);
        linear_bw_param(acts.mlp_act.data(), dx.data(), g + lr.w2.off, g + lr.b2.off, L, F, E);
        for (size_t i = 0; i < d_pre.size(); ++i)
            d_pre[i] = d_act[i] * gelu_grad(acts.mlp_pre[i]);
        linear_bw_data(d_pre.data(), p + lr.w1.off, d_ln.data(), L, E, F, false);
        linear_bw_param(acts.ln2_out.data(), d_pre.data(), g + lr.w1.off, g + lr.b1.off, L, E, F);
        // residual: dx continues to x_mid, plus the LN2 path
        layernorm_bw(d_ln.data(), acts.ln2_hat.data(), acts.ln2_rstd.data(), p + lr.ln2_g.off,
                     dx.data(), g + lr.ln2_g.off, g + lr.ln2_b.off, L, E, true);

        // attention: x_mid = x_in + Wo(attn(ln1(x_in)))
        linear_bw_data(dx.data(), p + lr.wo.off, d_o.data(), L, E, E, false);
        linear_bw_param(acts.att_o.data(), dx.data(), g + lr.wo.off, g + lr.bo.off, L, E, E);

        std::fill(dqv.begin(), dqv.end(), 0.0);
        std::fill(dkv.begin(), dkv.end(), 0.0);
        std::fill(dvv.begin(), dvv.end(), 0.0);
        for (int h = 0; h < H; ++h) {
            const int hoff = h * Dh;
            const double* ph = acts.att_p.data() + size_t(h) * size_t(L) * size_t(L);
            for (int t = 0; t < L; ++t) {
                const double* prow = ph + size_t(t) * size_t(L);
                const double* dot = d_o.data() + size_t(t) * size_t(E) + hoff;
                // dV and dP
                double dot_p = 0.0;
                for (int u = 0; u < L; ++u) {
                    const double* vu = acts.v.data() + size_t(u) * size_t(E) + hoff;
                    double* dvu = dvv.data() + size_t(u) * size_t(E) + hoff;
                    double dp = 0.0;
                    for (int e = 0; e < Dh; ++e) {
                        dvu[e] += prow[u] * dot[e];
                        dp += dot[e] * vu[e];
                    }
                    dprow[size_t(u)] = dp;
                    dot_p += dp * prow[u];
                }
                // softmax backward, then dQ/dK
                double* dqt = dqv.data() + size_t(t) * size_t(E) + hoff;
                const double* qt = acts.q.data() + size_t(t) * size_t(E) + hoff;
                for (int u = 0; u < L; ++u) {
                    double ds = prow[u] * (dprow[size_t(u)] - dot_p) * scale;
                    if (ds == 0.0)
                        continue;
                    const double* ku = acts.k.data() + size_t(u) * size_t(E) + hoff;
                    double* dku = dkv.data() + size_t(u) * size_t(E) + hoff;
                    for (int e = 0; e < Dh; ++e) {
                        dqt[e] += ds * ku[e];
                        dku[e] += ds * qt[e];
                    }
                }
            }
        }

        linear_bw_param(acts.ln1_out.data(), dqv.data(), g + lr.wq.off, g + lr.bq.off, L, E, E);
        linear_bw_param(acts.ln1_out.data(), dkv.data(), g + lr.wk.off, g + lr.bk.off, L, E, E);
        linear_bw_param(acts.ln1_out.data(), dvv.data(), g + lr.wv.off, g + lr.bv.off, L, E, E);
        linear_bw_data(dqv.data(), p + lr.wq.off, d_ln.data(), L, E, E, false);
        linear_bw_data(dkv.data(), p + lr.wk.off, d_ln.data(), L, E, E, true);
        linear_bw_data(dvv.data(), p + lr.wv.off, d_ln.data(), L, E, E, true);
        layernorm_bw(d_ln.data(), acts.ln1_hat.data(), acts.ln1_rstd.data(), p + lr.ln1_g.off,
                     dx.data(), g + lr.ln1_g.off, g + lr.ln1_b.off, L, E, true);
    }

    for (int t = 0; t < L; ++t) {
        int row = tape.tokens[size_t(t)] == TokenId(V) ? V : int(tape.tokens[size_t(t)]);
        double* dte = g + nl.tok_emb.off + size_t(row) * size_t(E);
        double* dpe = g + nl.pos_emb.off + size_t(t) * size_t(E);
        const double* dxt = dx.data() + size_t(t) * size_t(E);
        for (int e = 0; e < E; ++e) {
            dte[e] += dxt[e];
            dpe[e] += dxt[e];
        }
    }
}

} // namespace prism
