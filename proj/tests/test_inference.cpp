#include "prism/inference.hpp"

#include "prism/eval.hpp"
#include "prism/util.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <map>

using namespace prism;

namespace {

ArchitectureConfig tabular_arch(int vocab, int len) {
    ArchitectureConfig a;
    a.backend = Backend::tabular;
    a.vocab_size = vocab;
    a.seq_len = len;
    return a;
}

// three-token cyclic sequences over length 3
ExplicitDist cyclic_dist() {
    Vocab v(3);
    return ExplicitDist(v, {{MaskedSeq(v, {0, 1, 2}), 0.5},
                            {MaskedSeq(v, {1, 2, 0}), 0.25},
                            {MaskedSeq(v, {2, 0, 1}), 0.25}});
}

void check_step_invariants(const InferenceResult& res, const std::vector<bool>& frozen) {
    for (const auto& tr : res.trace) {
        MaskSet masked_before = masked_positions(tr.before);
        MaskSet clean_before = clean_positions(tr.before);
        for (int i : tr.unmasked.indices()) {
            CHECK(masked_before.contains(i));
            CHECK(!frozen[size_t(i)]);
            CHECK(!tr.remasked.contains(i));
        }
        for (int i : tr.remasked.indices()) {
            CHECK(clean_before.contains(i));
            CHECK(!frozen[size_t(i)]);
        }
        MaskSet expected = masked_before.minus(tr.unmasked).united(tr.remasked);
        CHECK(masked_positions(tr.after) == expected);
    }
}

} // namespace

TEST_CASE("exact sampler law equals the data law") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    InferencePlan plan;
    plan.steps = 3;
    plan.unmask_rule = UnmaskRule::random;
    plan.remask = RemaskPolicy::none;
    plan.nucleus_p = 1.0;

    auto law = enumerate_output_law(model, fit, plan);
    double tv = 0.0;
    KahanSum mass;
    for (const auto& [s, p] : law) {
        tv += std::abs(p - d.prob_of(s));
        mass.add(p);
    }
    // account for support elements the law may have missed entirely
    for (const auto& [x, w] : d.support()) {
        bool found = false;
        for (const auto& [s, p] : law)
            if (s == x)
                found = true;
        if (!found)
            tv += w;
    }
    CHECK(mass.value() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(tv / 2.0 < 1e-6);
}

TEST_CASE("enumeration is limited to the supported plan shape") {
    Model model(tabular_arch(3, 3));
    Rng rng(1);
    ModelParams p = model.init_params(rng);
    InferencePlan plan;
    plan.steps = 3;
    plan.remask = RemaskPolicy::prism;
    plan.remask_k = 1;
    CHECK_THROWS_AS(enumerate_output_law(model, p, plan), EnumerationCapError);
}

TEST_CASE("step invariants hold under remasking") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    InferencePlan plan;
    plan.steps = 4;
    plan.remask = RemaskPolicy::prism;
    plan.schedule = RemaskSchedule::fixed;
    plan.remask_k = 1;
    plan.l_on = 0;

    std::vector<bool> frozen(3, false);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        InferenceResult res = run_inference(model, fit, plan, seed);
        CHECK(res.sequence.fully_clean());
        check_step_invariants(res, frozen);
        // a single model evaluation per step, remasking or not
        for (const auto& tr : res.trace)
            CHECK(tr.forward_calls == 1);
    }
}

TEST_CASE("fixed-K remasks exactly K at every eligible step") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    InferencePlan plan;
    plan.steps = 6;
    plan.remask = RemaskPolicy::remdm_random;
    plan.schedule = RemaskSchedule::fixed;
    plan.remask_k = 1;
    plan.l_on = 0;

    InferenceResult res = run_inference(model, fit, plan, 5);
    int eligible = 0;
    for (const auto& tr : res.trace) {
        if (tr.final_sweep)
            continue;
        int masked = masked_positions(tr.before).size();
        bool guard = 1 <= masked && masked < 3 - 1;
        if (guard) {
            ++eligible;
            CHECK(tr.remasked.size() == 1);
        } else {
            CHECK(tr.remasked.size() == 0);
        }
    }
    CHECK(eligible > 0);
}

TEST_CASE("eta zero reduces the binomial policy to plain decoding") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    InferencePlan none;
    none.steps = 3;
    InferencePlan binom = none;
    binom.remask = RemaskPolicy::prism;
    binom.schedule = RemaskSchedule::binomial;
    binom.eta = 0.0;

    for (uint64_t seed = 0; seed < 10; ++seed) {
        InferenceResult a = run_inference(model, fit, none, seed);
        InferenceResult b = run_inference(model, fit, binom, seed);
        CHECK(a.sequence == b.sequence);
    }
}

TEST_CASE("remask draws do not perturb unmask draws: high l_on matches plain runs") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    InferencePlan none;
    none.steps = 3;
    InferencePlan prism_late = none;
    prism_late.remask = RemaskPolicy::prism;
    prism_late.schedule = RemaskSchedule::fixed;
    prism_late.remask_k = 1;
    prism_late.l_on = 1000000; // never activates

    for (uint64_t seed = 0; seed < 10; ++seed) {
        InferenceResult a = run_inference(model, fit, none, seed);
        InferenceResult b = run_inference(model, fit, prism_late, seed);
        REQUIRE(a.trace.size() == b.trace.size());
        for (size_t i = 0; i < a.trace.size(); ++i) {
            CHECK(a.trace[i].unmasked == b.trace[i].unmasked);
            CHECK(a.trace[i].after == b.trace[i].after);
            CHECK(b.trace[i].remasked.empty());
        }
    }
}

TEST_CASE("seeded runs reproduce exactly") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);
    InferencePlan plan;
    plan.steps = 4;
    plan.remask = RemaskPolicy::remdm_random;
    plan.schedule = RemaskSchedule::fixed;
    plan.remask_k = 1;
    InferenceResult a = run_inference(model, fit, plan, 77);
    InferenceResult b = run_inference(model, fit, plan, 77);
    CHECK(a.sequence == b.sequence);
    REQUIRE(a.trace.size() == b.trace.size());
    for (size_t i = 0; i < a.trace.size(); ++i)
        CHECK(a.trace[i].remasked == b.trace[i].remasked);
}

TEST_CASE("token scores per policy") {
    Vocab v(3);
    MaskedSeq state(v, {0, 2, v.mask_id()});
    std::vector<bool> frozen = {false, false, false};
    ModelOutputs out;
    out.posterior.assign(3, PosteriorRow{{1.0 / 3, 1.0 / 3, 1.0 / 3}});
    out.quality = {0.9, 0.1, 0.5};
    std::vector<double> stored = {1.0, std::numeric_limits<double>::infinity(), 0.0};
    Rng rng(3);

    auto prism = score_tokens(RemaskPolicy::prism, state, out, stored, frozen, rng);
    CHECK(prism[0] == doctest::Approx(0.9));
    CHECK(prism[1] == doctest::Approx(0.1)); // the low-quality token ranks first
    CHECK(std::isinf(prism[2]));             // masked: never a remask candidate

    // stored-confidence policy: position 1 was never unmasked in this run
    auto conf = score_tokens(RemaskPolicy::remdm_conf, state, out, stored, frozen, rng);
    CHECK(conf[0] == doctest::Approx(1.0)); // unmasked from a point mass: kept
    CHECK(std::isinf(conf[1]));

    Rng seeded_a(9), seeded_b(9);
    auto rnd1 = score_tokens(RemaskPolicy::remdm_random, state, out, stored, frozen, seeded_a);
    auto rnd2 = score_tokens(RemaskPolicy::remdm_random, state, out, stored, frozen, seeded_b);
    CHECK(rnd1[0] == rnd2[0]); // seeded
    CHECK(rnd1[1] == rnd2[1]);
}

TEST_CASE("oracle-fit quality ranks a corrupted token lowest") {
    Vocab v(3);
    ExplicitDist d(v, {{MaskedSeq(v, {0, 1}), 0.9}, {MaskedSeq(v, {0, 2}), 0.1}});
    Model model(tabular_arch(3, 2));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    MaskedSeq y(v, {0, 2}); // the unlikely continuation
    ModelOutputs out = model.forward(fit, y);
    std::vector<double> stored(2, 0.0);
    std::vector<bool> frozen(2, false);
    Rng rng(1);
    auto scores = score_tokens(RemaskPolicy::prism, y, out, stored, frozen, rng);
    CHECK(scores[1] < scores[0]);
    CHECK(scores[1] == doctest::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("conditioning freezes positions and single-step completion works") {
    Vocab v(3);
    ExplicitDist d(v, {{MaskedSeq(v, {0, 1, 2}), 1.0}});
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    MaskedSeq condition(v, {0, 1, v.mask_id()});
    InferencePlan plan;
    plan.steps = 1;
    InferenceResult res = run_inference(model, fit, plan, 3, condition);
    CHECK(res.sequence == MaskedSeq(v, {0, 1, 2}));

    // frozen positions appear in no unmask or remask set; the remask budget
    // must stay below the free position count
    MaskedSeq one_clue(v, {0, v.mask_id(), v.mask_id()});
    plan.steps = 4;
    plan.remask = RemaskPolicy::prism;
    plan.schedule = RemaskSchedule::fixed;
    plan.remask_k = 1;
    std::vector<bool> frozen = {true, false, false};
    for (uint64_t seed = 0; seed < 10; ++seed) {
        InferenceResult r = run_inference(model, fit, plan, seed, one_clue);
        check_step_invariants(r, frozen);
        CHECK(r.sequence.at(0) == 0);
    }
    CHECK_THROWS_AS(run_inference(model, fit, plan, 0, condition), ConfigError);
}

TEST_CASE("straggler sweep finishes remask-starved runs") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    InferencePlan plan;
    plan.steps = 2; // base budget 2, remask keeps returning tokens to the pool
    plan.remask = RemaskPolicy::remdm_random;
    plan.schedule = RemaskSchedule::fixed;
    plan.remask_k = 1;
    plan.l_on = 0;

    int sweeps = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        InferenceResult res = run_inference(model, fit, plan, seed);
        CHECK(res.sequence.fully_clean());
        for (const auto& tr : res.trace)
            if (tr.final_sweep) {
                ++sweeps;
                CHECK(tr.remasked.empty());
            }
    }
    CHECK(sweeps > 0);
}

TEST_CASE("loop refinement: zero iterations is the identity, outputs stay on support") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    InferencePlan base;
    base.steps = 3;
    InferencePlan with_loop = base;
    with_loop.loop_steps = 3;
    with_loop.loop_m = 2;

    for (uint64_t seed = 0; seed < 10; ++seed) {
        InferenceResult a = run_inference(model, fit, base, seed);
        InferenceResult b = run_loop(model, fit, base, seed);
        CHECK(a.sequence == b.sequence); // N_l = 0

        InferenceResult c = run_loop(model, fit, with_loop, seed);
        CHECK(c.sequence.fully_clean());
        // exact-posterior refreshes keep the sample inside the support
        CHECK(d.prob_of(c.sequence) > 0.0);
        int loop_records = 0;
        for (const auto& tr : c.trace)
            if (tr.loop_phase) {
                ++loop_records;
                CHECK(tr.unmasked.size() == 2);
                CHECK(tr.forward_calls == 1);
            }
        CHECK(loop_records == 3);
    }
}

TEST_CASE("semi-autoregressive decoding fills earlier blocks first") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);

    InferencePlan plan;
    plan.steps = 3;
    plan.unmask_rule = UnmaskRule::semi_ar;
    plan.n_blocks = 3;

    InferenceResult res = run_inference(model, fit, plan, 11);
    CHECK(res.sequence.fully_clean());
    REQUIRE(res.trace.size() >= 3);
    CHECK(res.trace[0].unmasked == MaskSet{0});
    CHECK(res.trace[1].unmasked == MaskSet{1});
    CHECK(res.trace[2].unmasked == MaskSet{2});
}

TEST_CASE("plan validation rejects inconsistent settings") {
    InferencePlan plan;
    plan.steps = 0;
    CHECK_THROWS_AS(plan.validate(3), ConfigError);
    plan.steps = 2;
    plan.remask = RemaskPolicy::prism;
    plan.remask_k = 3;
    CHECK_THROWS_AS(plan.validate(3), ConfigError); // K >= L
    plan.remask_k = 1;
    plan.eta = 1.5;
    CHECK_THROWS_AS(plan.validate(3), ConfigError);
    plan.eta = 0.2;
    plan.loop_steps = 1;
    plan.loop_m = 9;
    CHECK_THROWS_AS(plan.validate(3), ConfigError);
    plan.loop_m = 2;
    plan.validate(3);
}

TEST_CASE("trace export writes one record per step") {
    ExplicitDist d = cyclic_dist();
    Model model(tabular_arch(3, 3));
    ModelParams fit = fit_tabular_to_oracle(model, d);
    InferencePlan plan;
    plan.steps = 3;
    InferenceResult res = run_inference(model, fit, plan, 2);
    write_trace_jsonl("/tmp/prism_test_trace.jsonl", res);

    std::ifstream in("/tmp/prism_test_trace.jsonl");
    std::string line;
    size_t lines = 0;
    while (std::getline(in, line))
        if (!line.empty())
            ++lines;
    CHECK(lines == res.trace.size());
}

TEST_CASE("binomial schedule draws the stated remask budget") {
    InferencePlan plan;
    plan.steps = 8;
    plan.remask = RemaskPolicy::prism;
    plan.schedule = RemaskSchedule::binomial;
    plan.eta = 2.56 / 8.0;
    plan.l_on = 0;

    // L=19, 10 clean, 9 masked: base budget ceil(19/8) = 3, K ~ Binom(10, 0.32)
    Rng rng(41);
    double mean_k = 0.0;
    const int trials = 20000;
    for (int t = 0; t < trials; ++t) {
        StepSizes s = sample_step_sizes(plan, 2, 9, 10, 19, rng);
        CHECK(s.remask <= 9);
        if (s.remask > 0)
            CHECK(s.unmask == std::min(3 + s.remask, 9));
        mean_k += double(s.remask);
    }
    mean_k /= trials;
    CHECK(std::abs(mean_k - 3.2) < 0.1);

    // before l_on the remask budget is forced to zero
    plan.l_on = 5;
    Rng rng2(43);
    for (int t = 0; t < 50; ++t) {
        CHECK(sample_step_sizes(plan, 4, 9, 10, 19, rng2).remask == 0);
        CHECK(sample_step_sizes(plan, 5, 9, 10, 19, rng2).remask >= 0);
    }

    // eta 0 never remasks
    plan.l_on = 0;
    plan.eta = 0.0;
    Rng rng3(47);
    CHECK(sample_step_sizes(plan, 2, 9, 10, 19, rng3).remask == 0);
}
