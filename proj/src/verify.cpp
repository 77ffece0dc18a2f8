#include "prism/verify.hpp"

#include "model_internal.hpp"

#include "prism/eval.hpp"
#include "prism/masking.hpp"
#include "prism/model.hpp"
#include "prism/sudoku.hpp"
#include "prism/training.hpp"
#include "prism/util.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

namespace prism {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void zero_quality_segment(const Model& model, ModelParams& params) {
    for (size_t i = model.layout().quality_begin; i < model.layout().quality_end; ++i)
        params.values[i] = 0.0;
}

// quality-head convergence run on the tabular backend: batch 1, n_y 1,
// Robbins-Monro estimator, proposal model frozen through lambda = 0
ModelParams run_quality_finetune(const Model& model, ModelParams start, const ExplicitDist& d,
                                 int k, int64_t triples, uint64_t seed) {
    FinetuneConfig cfg;
    cfg.k = k;
    cfg.n_y = 1;
    cfg.nucleus_p = 1.0;
    cfg.lambda = 0.0;
    cfg.select_rule = SelectRule::uniform;
    cfg.optimizer.kind = OptimizerKind::fisher_sgd;
    cfg.optimizer.lr = double(k); // undo the 1/|S| adjoint scale
    cfg.batch = 1;
    cfg.steps = triples;
    cfg.threads = 1;
    cfg.log_every = 1 << 30;
    return finetune(model, std::move(start), DataDistribution(d), cfg, seed);
}

} // namespace

ExplicitDist verify_distribution() {
    Vocab vocab(3);
    auto seq = [&](TokenId t) {
        return MaskedSeq(vocab, std::vector<TokenId>(4, t));
    };
    return ExplicitDist(vocab, {{seq(0), 0.4}, {seq(1), 0.3}, {seq(2), 0.3}});
}

VerifyResult verify_masking_equivalence(uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    VerifyResult res;
    res.name = "masking-equivalence";

    Rng rng(derive_seed(seed, 0xe0));
    EquivalenceReport rep = check_equivalence(8, 100000, rng);
    res.seconds = seconds_since(t0);

    bool counts_ok = rep.max_count_dev_by_count < 0.01 && rep.max_count_dev_by_bernoulli < 0.01;
    bool patterns_ok = rep.max_pattern_dev_between < 0.01;
    res.passed = counts_ok && patterns_ok && res.seconds < 10.0;

    std::ostringstream d;
    d << "count dev " << format_double(rep.max_count_dev_by_count) << "/"
      << format_double(rep.max_count_dev_by_bernoulli) << ", pattern dev between "
      << format_double(rep.max_pattern_dev_between) << ", chi2 "
      << format_double(rep.chi2_by_count) << "/" << format_double(rep.chi2_by_bernoulli) << " on "
      << rep.degrees_of_freedom << " dof (tol 0.01, 1e5 samples)";
    res.detail = d.str();
    return res;
}

VerifyResult verify_quality_convergence(uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    VerifyResult res;
    res.name = "quality-convergence";

    ExplicitDist d = verify_distribution();
    ArchitectureConfig arch;
    arch.backend = Backend::tabular;
    arch.vocab_size = d.vocab().size;
    arch.seq_len = d.length();
    Model model(arch);

    const int64_t triples = 200000;

    ModelParams exact_fit = fit_tabular_to_oracle(model, d);
    ModelParams start_exact = exact_fit;
    zero_quality_segment(model, start_exact);
    ModelParams trained_exact =
        run_quality_finetune(model, std::move(start_exact), d, 1, triples, seed);
    // states below the floor cannot be visited within the triple budget
    // (expected visits << 1); the closed-form fit leaves zero-probability
    // tokens at exp(-30) mass, which would otherwise enumerate as states
    const double reach_floor = 1e-6;
    OracleGapReport gap_exact =
        oracle_gap(model, trained_exact, d, 1, SelectRule::uniform, 1.0,
                   model.posterior_fn(trained_exact), reach_floor);

    ModelParams blurred = blur_tabular_posterior(model, exact_fit, 0.5);
    zero_quality_segment(model, blurred);
    ModelParams trained_blur =
        run_quality_finetune(model, std::move(blurred), d, 1, triples, seed + 1);
    OracleGapReport gap_blur = oracle_gap(model, trained_blur, d, 1, SelectRule::uniform, 1.0,
                                          model.posterior_fn(trained_blur), reach_floor);

    res.seconds = seconds_since(t0);
    res.passed =
        gap_exact.max_quality_gap < 0.02 && gap_blur.max_quality_gap < 0.03 &&
        res.seconds < 300.0;

    std::ostringstream out;
    out << "max |g - oracle| = " << format_double(gap_exact.max_quality_gap) << " over "
        << gap_exact.quality_states << " states (tol 0.02); blurred proposal "
        << format_double(gap_blur.max_quality_gap) << " over " << gap_blur.quality_states
        << " states (tol 0.03); " << triples << " triples each";
    res.detail = out.str();
    return res;
}

VerifyResult verify_extended_quality_convergence(uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    VerifyResult res;
    res.name = "extended-quality-convergence";

    ExplicitDist d = verify_distribution();
    ArchitectureConfig arch;
    arch.backend = Backend::tabular;
    arch.vocab_size = d.vocab().size;
    arch.seq_len = d.length();
    Model model(arch);

    const int64_t triples = 2000000;
    ModelParams start = fit_tabular_to_oracle(model, d);
    zero_quality_segment(model, start);
    ModelParams trained = run_quality_finetune(model, std::move(start), d, 2, triples, seed);
    OracleGapReport gap = oracle_gap(model, trained, d, 2, SelectRule::uniform, 1.0,
                                     model.posterior_fn(trained), 1e-6);

    res.seconds = seconds_since(t0);
    res.passed = gap.max_quality_gap < 0.03 && res.seconds < 600.0;

    std::ostringstream out;
    out << "max |g - extended oracle| = " << format_double(gap.max_quality_gap) << " over "
        << gap.quality_states << " states (tol 0.03, k=2, " << triples << " triples)";
    res.detail = out.str();
    return res;
}

VerifyResult verify_gradient_correctness(uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    VerifyResult res;
    res.name = "gradient-correctness";

    ArchitectureConfig arch;
    arch.backend = Backend::neural;
    arch.vocab_size = 5;
    arch.seq_len = 19;
    Model model(arch);

    Rng rng(derive_seed(seed, 0xa1));
    ModelParams params = model.init_params(rng);
    // zero-initialized heads would zero every backbone gradient; perturb them
    // so the check exercises all three segments
    for (size_t i = model.layout().unmask_begin; i < model.layout().total; ++i)
        params.values[i] = 0.05 * rng.normal();

    Rng data_rng(derive_seed(seed, 0xa2));
    std::vector<Board> boards = generate_boards(4, 6, data_rng);
    std::vector<MaskedSeq> seqs;
    for (const auto& b : boards)
        seqs.push_back(tokenize(b));
    EmpiricalDist d(sudoku_vocab(4), seqs);

    FinetuneConfig fcfg;
    fcfg.k = 4;
    fcfg.n_y = 1;
    fcfg.nucleus_p = 1.0;
    const double lambda = 5.0;

    Rng triple_rng(derive_seed(seed, 0xa3));
    auto triples =
        build_triples(DataDistribution(d), model, params, fcfg, triple_rng);
    if (!triples || triples->empty())
        throw NumericError("verify_gradient_correctness: triple construction failed");
    const TrainTriple triple = triples->front();

    auto loss_fn = [&](const std::vector<double>& values) {
        ModelParams p{values};
        ModelOutputs on_y = model.forward(p, triple.candidate);
        ModelOutputs on_z = model.forward(p, triple.context);
        return total_loss(on_y, on_z, triple, lambda).value;
    };

    auto tape_y = model.make_tape();
    auto tape_z = model.make_tape();
    ModelOutputs on_y = model.forward(params, triple.candidate, *tape_y);
    ModelOutputs on_z = model.forward(params, triple.context, *tape_z);
    TotalLoss loss = total_loss(on_y, on_z, triple, lambda);
    std::vector<double> grad(model.param_count(), 0.0);
    model.backward(params, *tape_y, loss.adj_candidate, grad);
    model.backward(params, *tape_z, loss.adj_context, grad);

    Rng coord_rng(derive_seed(seed, 0xa4));
    GradCheckReport rep =
        check_gradient(loss_fn, params.values, grad, 100, 1e-4, 1e-3, coord_rng);

    res.seconds = seconds_since(t0);
    res.passed = rep.passed && res.seconds < 60.0;

    std::ostringstream out;
    out << "max rel error " << format_double(rep.max_rel_error) << " over "
        << rep.coords_checked << " coordinates (tol 1e-3, step 1e-4, loss "
        << format_double(loss.value) << ")";
    res.detail = out.str();
    return res;
}

std::vector<VerifyResult> run_verification_suite(uint64_t seed) {
    return {
        verify_masking_equivalence(seed),
        verify_quality_convergence(seed),
        verify_extended_quality_convergence(seed),
        verify_gradient_correctness(seed),
    };
}

} // namespace prism
