#include "prism/model.hpp"

#include "prism/training.hpp"
#include "prism/util.hpp"

#include <doctest.h>

#include <cmath>

using namespace prism;

namespace {

ArchitectureConfig tabular_arch(int vocab, int len) {
    ArchitectureConfig a;
    a.backend = Backend::tabular;
    a.vocab_size = vocab;
    a.seq_len = len;
    return a;
}

ArchitectureConfig small_neural(int vocab, int len) {
    ArchitectureConfig a;
    a.backend = Backend::neural;
    a.vocab_size = vocab;
    a.seq_len = len;
    a.embed_dim = 16;
    a.layers = 2;
    a.heads = 2;
    a.hidden_dim = 32;
    return a;
}

ExplicitDist small_dist() {
    Vocab v(3);
    return ExplicitDist(v, {{MaskedSeq(v, {0, 1}), 0.5}, {MaskedSeq(v, {0, 2}), 0.5}});
}

} // namespace

TEST_CASE("tabular zero init gives uniform posterior and quality one half") {
    Model model(tabular_arch(3, 2));
    Rng rng(1);
    ModelParams p = model.init_params(rng);
    ModelOutputs out = model.forward(p, MaskedSeq::all_masked(model.vocab(), 2));
    for (int i = 0; i < 2; ++i) {
        for (double q : out.posterior[size_t(i)].probs)
            CHECK(q == doctest::Approx(1.0 / 3));
        CHECK(out.quality[size_t(i)] == doctest::Approx(0.5));
    }
}

TEST_CASE("tabular fit matches oracle posteriors and qualities") {
    ExplicitDist d = small_dist();
    Model model(tabular_arch(3, 2));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    MaskedSeq z(model.vocab(), {0, model.vocab().mask_id()});
    ModelOutputs out = model.forward(fit, z);
    PosteriorRow truth = oracle_posterior(d, z, 1);
    for (int v = 0; v < 3; ++v)
        CHECK(std::abs(out.posterior[1].probs[size_t(v)] - truth.probs[size_t(v)]) < 1e-6);

    MaskedSeq y(model.vocab(), {0, 1});
    ModelOutputs oq = model.forward(fit, y);
    CHECK(std::abs(oq.quality[1] - oracle_quality(d, y, 1)) < 1e-6);
    CHECK(oq.quality[0] > 1.0 - 1e-6); // forced token
}

TEST_CASE("blurred posterior mixes with uniform") {
    ExplicitDist d = small_dist();
    Model model(tabular_arch(3, 2));
    ModelParams fit = fit_tabular_to_oracle(model, d);
    ModelParams blur = blur_tabular_posterior(model, fit, 0.5);

    MaskedSeq z(model.vocab(), {0, model.vocab().mask_id()});
    ModelOutputs out = model.forward(blur, z);
    PosteriorRow truth = oracle_posterior(d, z, 1);
    for (int v = 0; v < 3; ++v) {
        double expected = 0.5 * truth.probs[size_t(v)] + 0.5 / 3.0;
        CHECK(out.posterior[1].probs[size_t(v)] == doctest::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("tabular state cap refuses oversized spaces") {
    ArchitectureConfig a = tabular_arch(5, 19);
    CHECK_THROWS_AS(Model{a}, ConfigError);
}

TEST_CASE("neural init: zero heads give uniform posterior and 0.5 quality") {
    Model model(small_neural(4, 5));
    Rng rng(3);
    ModelParams p = model.init_params(rng);
    ModelOutputs out = model.forward(p, MaskedSeq::all_masked(model.vocab(), 5));
    for (int i = 0; i < 5; ++i) {
        for (double q : out.posterior[size_t(i)].probs)
            CHECK(q == doctest::Approx(0.25));
        CHECK(out.quality[size_t(i)] == doctest::Approx(0.5));
    }
}

TEST_CASE("neural forward is deterministic") {
    Model model(small_neural(4, 6));
    Rng rng(7);
    ModelParams p = model.init_params(rng);
    MaskedSeq z(model.vocab(), {0, 1, model.vocab().mask_id(), 3, model.vocab().mask_id(), 2});
    ModelOutputs a = model.forward(p, z);
    ModelOutputs b = model.forward(p, z);
    for (int i = 0; i < 6; ++i) {
        CHECK(a.quality[size_t(i)] == b.quality[size_t(i)]);
        for (int v = 0; v < 4; ++v)
            CHECK(a.posterior[size_t(i)].probs[size_t(v)] ==
                  b.posterior[size_t(i)].probs[size_t(v)]);
    }
}

TEST_CASE("zero adjoint produces zero gradient") {
    Model model(small_neural(3, 4));
    Rng rng(11);
    ModelParams p = model.init_params(rng);
    auto tape = model.make_tape();
    model.forward(p, MaskedSeq::all_masked(model.vocab(), 4), *tape);
    std::vector<double> grad(model.param_count(), 0.0);
    model.backward(p, *tape, LossAdjoint::zeros(4, 3), grad);
    for (double g : grad)
        CHECK(g == 0.0);
}

TEST_CASE("cross-entropy gradient at uniform tabular init") {
    Model model(tabular_arch(4, 3));
    Rng rng(2);
    ModelParams p = model.init_params(rng);
    Vocab v = model.vocab();
    MaskedSeq x(v, {2, 1, 3});
    MaskedSeq z(v, {2, v.mask_id(), 3});

    auto tape = model.make_tape();
    ModelOutputs out = model.forward(p, z, *tape);
    LossResult loss = mdm_loss(out, x, z);
    CHECK(loss.value == doctest::Approx(std::log(4.0)));

    std::vector<double> grad(model.param_count(), 0.0);
    model.backward(p, *tape, loss.adjoint, grad);
    // single masked position: logit gradient is softmax - onehot
    size_t base = model.layout().unmask_begin +
                  (size_t(model.state_index(z)) * 3 + 1) * 4;
    for (int tok = 0; tok < 4; ++tok) {
        double expected = 0.25 - (tok == 1 ? 1.0 : 0.0);
        CHECK(grad[base + size_t(tok)] == doctest::Approx(expected));
    }
}

TEST_CASE("analytic gradients match central differences (neural)") {
    Model model(small_neural(3, 5));
    Rng rng(13);
    ModelParams params = model.init_params(rng);
    // nonzero heads so gradient flows into the backbone
    for (size_t i = model.layout().unmask_begin; i < model.layout().total; ++i)
        params.values[i] = 0.05 * rng.normal();
    Vocab v = model.vocab();
    MaskedSeq x(v, {0, 1, 2, 1, 0});
    MaskedSeq z(v, {0, v.mask_id(), 2, v.mask_id(), v.mask_id()});

    auto loss_fn = [&](const std::vector<double>& values) {
        ModelParams p{values};
        ModelOutputs out = model.forward(p, z);
        LossResult mdm = mdm_loss(out, x, z);
        // add a quality-head term so every segment is exercised
        double q = out.quality[0];
        return mdm.value + bce(1, q);
    };

    auto tape = model.make_tape();
    ModelOutputs out = model.forward(params, z, *tape);
    LossResult mdm = mdm_loss(out, x, z);
    LossAdjoint adj = mdm.adjoint;
    adj.d_quality[0] = out.quality[0] - 1.0;
    std::vector<double> grad(model.param_count(), 0.0);
    model.backward(params, *tape, adj, grad);

    Rng coord_rng(17);
    GradCheckReport rep = check_gradient(loss_fn, params.values, grad, 80, 1e-4, 1e-3, coord_rng);
    CHECK(rep.passed);
    CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("gradient check on the tabular backend is near exact") {
    Model model(tabular_arch(3, 3));
    Rng rng(19);
    ModelParams params = model.init_params(rng);
    for (double& x : params.values)
        x = 0.2 * rng.normal(); // random interior point, away from the clamp
    Vocab v = model.vocab();
    MaskedSeq x(v, {0, 2, 1});
    MaskedSeq z(v, {v.mask_id(), 2, v.mask_id()});

    auto loss_fn = [&](const std::vector<double>& values) {
        ModelParams p{values};
        return mdm_loss(model.forward(p, z), x, z).value;
    };
    auto tape = model.make_tape();
    LossResult loss = mdm_loss(model.forward(params, z, *tape), x, z);
    std::vector<double> grad(model.param_count(), 0.0);
    model.backward(params, *tape, loss.adjoint, grad);

    Rng coord_rng(23);
    GradCheckReport rep = check_gradient(loss_fn, params.values, grad, 60, 1e-4, 1e-6, coord_rng);
    CHECK(rep.passed);
}

TEST_CASE("a corrupted gradient coordinate fails the check") {
    Model model(small_neural(3, 4));
    Rng rng(29);
    ModelParams params = model.init_params(rng);
    for (size_t i = model.layout().unmask_begin; i < model.layout().total; ++i)
        params.values[i] = 0.05 * rng.normal();
    Vocab v = model.vocab();
    MaskedSeq x(v, {0, 1, 2, 0});
    MaskedSeq z = mask_at(x, MaskSet{1, 3});

    auto loss_fn = [&](const std::vector<double>& values) {
        ModelParams p{values};
        return mdm_loss(model.forward(p, z), x, z).value;
    };
    auto tape = model.make_tape();
    LossResult loss = mdm_loss(model.forward(params, z, *tape), x, z);
    std::vector<double> grad(model.param_count(), 0.0);
    model.backward(params, *tape, loss.adjoint, grad);

    // inject a fault: double one embedding gradient that is certainly nonzero
    size_t victim = 0;
    for (size_t i = 0; i < grad.size(); ++i)
        if (std::abs(grad[i]) > 1e-4) {
            victim = i;
            break;
        }
    grad[victim] *= 2.0;

    // force the faulty coordinate into the checked subset by checking all
    // coordinates up front in chunks until it is covered
    Rng coord_rng(31);
    GradCheckReport rep = check_gradient(loss_fn, params.values, grad,
                                         int(model.param_count()), 1e-4, 1e-3, coord_rng);
    CHECK(!rep.passed);
}

TEST_CASE("stop-gradient: quality-only adjoint never touches the unmask head") {
    Model model(small_neural(3, 4));
    Rng rng(37);
    ModelParams params = model.init_params(rng);
    // zero-initialized heads carry no gradient path; give them weight
    for (size_t i = model.layout().unmask_begin; i < model.layout().total; ++i)
        params.values[i] = 0.05 * rng.normal();
    MaskedSeq y(model.vocab(), {0, 1, 2, 0});

    auto tape = model.make_tape();
    ModelOutputs out = model.forward(params, y, *tape);
    LossAdjoint adj = LossAdjoint::zeros(4, 3);
    for (int i = 0; i < 4; ++i)
        adj.d_quality[size_t(i)] = out.quality[size_t(i)] - 1.0;

    std::vector<double> grad(model.param_count(), 0.0);
    model.backward(params, *tape, adj, grad);

    const auto& seg = model.layout();
    for (size_t i = seg.unmask_begin; i < seg.unmask_end; ++i)
        CHECK(grad[i] == 0.0);
    // the backbone does receive gradient through the quality head
    double backbone_norm = 0.0;
    for (size_t i = seg.backbone_begin; i < seg.backbone_end; ++i)
        backbone_norm += std::abs(grad[i]);
    CHECK(backbone_norm > 0.0);

    // freezing the backbone zeroes it as well
    std::fill(grad.begin(), grad.end(), 0.0);
    GradFlags flags;
    flags.freeze_backbone = true;
    model.backward(params, *tape, adj, grad, flags);
    for (size_t i = seg.backbone_begin; i < seg.backbone_end; ++i)
        CHECK(grad[i] == 0.0);
    double head_norm = 0.0;
    for (size_t i = seg.quality_begin; i < seg.quality_end; ++i)
        head_norm += std::abs(grad[i]);
    CHECK(head_norm > 0.0);
}

TEST_CASE("tabular outputs are vocabulary-permutation equivariant") {
    ExplicitDist d = small_dist();
    Model model(tabular_arch(3, 2));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    const std::vector<TokenId> perm = {2, 0, 1}; // relabeling

    // permuted distribution
    std::vector<std::pair<MaskedSeq, double>> support;
    for (const auto& [x, w] : d.support()) {
        std::vector<TokenId> t;
        for (TokenId tok : x.tokens())
            t.push_back(perm[size_t(tok)]);
        support.emplace_back(MaskedSeq(d.vocab(), t), w);
    }
    ExplicitDist d_perm(d.vocab(), std::move(support));
    ModelParams fit_perm = fit_tabular_to_oracle(model, d_perm);

    MaskedSeq z(model.vocab(), {0, model.vocab().mask_id()});
    std::vector<TokenId> zt;
    for (TokenId tok : z.tokens())
        zt.push_back(tok == model.vocab().mask_id() ? tok : perm[size_t(tok)]);
    MaskedSeq z_perm(model.vocab(), zt);

    ModelOutputs a = model.forward(fit, z);
    ModelOutputs b = model.forward(fit_perm, z_perm);
    for (int v = 0; v < 3; ++v)
        CHECK(a.posterior[1].probs[size_t(v)] ==
              doctest::Approx(b.posterior[1].probs[size_t(perm[size_t(v)])]).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip and config mismatch refusal") {
    Model model(small_neural(3, 4));
    Rng rng(41);
    ModelParams params = model.init_params(rng);
    save_checkpoint("/tmp/prism_test_ck.ckpt", model, params, 99, 1234);

    Checkpoint ck = load_checkpoint("/tmp/prism_test_ck.ckpt");
    CHECK(ck.seed == 99);
    CHECK(ck.step == 1234);
    CHECK(ck.config == model.config());
    CHECK(ck.params.values == params.values);

    uint64_t seed = 0;
    int64_t step = 0;
    ModelParams again = load_params_for(model, "/tmp/prism_test_ck.ckpt", &seed, &step);
    CHECK(again.values == params.values);
    CHECK(seed == 99);

    Model other(small_neural(3, 5));
    CHECK_THROWS_AS(load_params_for(other, "/tmp/prism_test_ck.ckpt"), ConfigError);
}

TEST_CASE("non-finite activations raise a numeric error with diagnostics") {
    Model model(small_neural(3, 4));
    Rng rng(43);
    ModelParams params = model.init_params(rng);
    params.values[model.layout().backbone_end - 1] =
        std::numeric_limits<double>::infinity(); // final norm shift feeds every head
    CHECK_THROWS_AS(model.forward(params, MaskedSeq::all_masked(model.vocab(), 4)), NumericError);
}

TEST_CASE("forward counter instruments every evaluation") {
    Model model(tabular_arch(3, 2));
    Rng rng(47);
    ModelParams p = model.init_params(rng);
    model.reset_forward_count();
    model.forward(p, MaskedSeq::all_masked(model.vocab(), 2));
    model.forward(p, MaskedSeq::all_masked(model.vocab(), 2));
    CHECK(model.forward_count() == 2);
}

TEST_CASE("posterior rows normalize and quality stays strictly interior") {
    Model model(small_neural(4, 6));
    Rng rng(53);
    for (int trial = 0; trial < 10; ++trial) {
        ModelParams p = model.init_params(rng);
        for (double& x : p.values)
            x += 0.3 * rng.normal(); // rough, far-from-init parameters
        std::vector<TokenId> tokens;
        for (int i = 0; i < 6; ++i)
            tokens.push_back(TokenId(rng.uniform_int(5))); // may include masks
        ModelOutputs out = model.forward(p, MaskedSeq(model.vocab(), tokens));
        for (int i = 0; i < 6; ++i) {
            double sum = 0.0;
            for (double q : out.posterior[size_t(i)].probs)
                sum += q;
            CHECK(std::abs(sum - 1.0) < 1e-6);
            CHECK(out.quality[size_t(i)] > 0.0);
            CHECK(out.quality[size_t(i)] < 1.0);
        }
    }
}
