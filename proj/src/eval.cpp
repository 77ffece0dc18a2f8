#include "prism/eval.hpp"

#include "prism/util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace prism {

void EvalReport::validate() const {
    if (sample_count <= 0)
        throw NumericError("EvalReport: sample count must be positive");
    for (const auto& [name, value] : metrics)
        if (!std::isfinite(value))
            throw NumericError("EvalReport: metric '" + name + "' is not finite");
}

std::string EvalReport::csv_header() const {
    std::string h = "samples,seed,plan";
    for (const auto& [name, value] : metrics)
        h += "," + name;
    return h;
}

std::string EvalReport::csv_row() const {
    std::string r = std::to_string(sample_count) + "," + std::to_string(seed) + "," +
                    plan_fingerprint;
    for (const auto& [name, value] : metrics)
        r += "," + format_double(value);
    return r;
}

std::string EvalReport::summary() const {
    std::ostringstream out;
    out << "plan " << plan_fingerprint << ", " << sample_count << " samples, seed " << seed
        << "\n";
    for (const auto& [name, value] : metrics)
        out << "  " << name << " = " << format_double(value) << "\n";
    return out.str();
}

WilsonInterval wilson_interval(int successes, int trials, double z) {
    if (trials <= 0)
        return {0.0, 1.0};
    double n = double(trials);
    double p = double(successes) / n;
    double z2 = z * z;
    double denom = 1.0 + z2 / n;
    double center = (p + z2 / (2.0 * n)) / denom;
    double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

SuccessReport success_rate(const Model& model, const ModelParams& params,
                           const InferencePlan& plan, int n_samples, uint64_t seed,
                           const std::optional<MaskedSeq>& condition) {
    const int side = sudoku_side_for(model.config().vocab_size, model.config().seq_len);
    if (side == 0)
        throw std::invalid_argument("success_rate: model shape is not a sudoku task");
    if (n_samples < 1)
        throw std::invalid_argument("success_rate: need at least one sample");

    SuccessReport rep;
    rep.trials = n_samples;
    int hits = 0;
    for (int s = 0; s < n_samples; ++s) {
        uint64_t run_seed = derive_seed(seed, 0x5a17, uint64_t(s));
        InferenceResult res = run_loop(model, params, plan, run_seed, condition, false);
        bool ok = false;
        try {
            Board b = detokenize(res.sequence);
            ok = is_valid(b);
        } catch (const std::invalid_argument&) {
            rep.structural_failures++;
        }
        if (ok && condition) {
            for (int i = 0; i < condition->length(); ++i)
                if (!condition->is_masked(i) && res.sequence.at(i) != condition->at(i))
                    ok = false;
        }
        hits += ok ? 1 : 0;
    }
    rep.rate = double(hits) / double(n_samples);
    rep.ci = wilson_interval(hits, n_samples);
    return rep;
}

double score_label_auroc(std::vector<std::pair<double, int>> scored) {
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    int64_t n_pos = 0, n_neg = 0;
    for (const auto& [s, label] : scored)
        label ? ++n_pos : ++n_neg;
    if (n_pos == 0 || n_neg == 0)
        return 0.5;
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < scored.size()) {
        size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first)
            ++j;
        double avg_rank = 0.5 * double(i + 1 + j); // ranks are 1-based
        for (size_t t = i; t < j; ++t)
            if (scored[t].second)
                rank_sum_pos += avg_rank;
        i = j;
    }
    double u = rank_sum_pos - double(n_pos) * double(n_pos + 1) / 2.0;
    return u / (double(n_pos) * double(n_neg));
}

DetectionReport detection_metrics(const Model& model, const ModelParams& params,
                                  const std::vector<Board>& boards, int corruptions,
                                  int n_trials, uint64_t seed) {
    if (boards.empty())
        throw std::invalid_argument("detection_metrics: no boards");
    if (n_trials < 1)
        throw std::invalid_argument("detection_metrics: need at least one trial");
    const int side = boards.front().side;
    if (sudoku_side_for(model.config().vocab_size, model.config().seq_len) != side)
        throw std::invalid_argument("detection_metrics: board/model shape mismatch");

    DetectionReport rep;
    rep.trials = n_trials;
    rep.corruptions = corruptions;
    if (corruptions == 0) {
        rep.hit_at_c = 1.0; // vacuous by convention
        rep.auroc = 0.5;
        return rep;
    }

    int hits = 0;
    std::vector<std::pair<double, int>> pooled; // (1 - quality, corrupted?)
    for (int t = 0; t < n_trials; ++t) {
        Rng rng(derive_seed(seed, 0xde7ec7, uint64_t(t)));
        const Board& base = boards[size_t(rng.uniform_below(boards.size()))];
        auto [bad, cells] = corrupt(base, corruptions, rng);
        MaskedSeq seq = tokenize(bad);
        ModelOutputs out = model.forward(params, seq);

        std::set<int> corrupted_pos;
        for (int cell : cells.indices())
            corrupted_pos.insert(cell_token_pos(side, cell));

        double worst_corrupted = 0.0, best_clean = 1.0;
        for (int i = 0; i < seq.length(); ++i) {
            bool is_corrupted = corrupted_pos.count(i) > 0;
            double q = out.quality[size_t(i)];
            pooled.emplace_back(1.0 - q, is_corrupted ? 1 : 0);
            if (is_corrupted)
                worst_corrupted = std::max(worst_corrupted, q);
            else
                best_clean = std::min(best_clean, q);
        }
        if (worst_corrupted < best_clean)
            ++hits;
    }
    rep.hit_at_c = double(hits) / double(n_trials);
    rep.auroc = score_label_auroc(std::move(pooled));
    return rep;
}

void write_quality_heatmap(const std::string& path, const Model& model,
                           const ModelParams& params, const Board& corrupted,
                           const MaskSet& corrupted_cells) {
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("write_quality_heatmap: cannot open " + path);
    MaskedSeq seq = tokenize(corrupted);
    ModelOutputs mo = model.forward(params, seq);
    const int side = corrupted.side;
    out << "row,col,digit,quality,corrupted\n";
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
            int cell = r * side + c;
            out << r << ',' << c << ',' << corrupted.cells[size_t(cell)] << ','
                << format_double(mo.quality[size_t(cell_token_pos(side, cell))]) << ','
                << (corrupted_cells.contains(cell) ? 1 : 0) << '\n';
        }
}

OracleGapReport oracle_gap(const Model& model, const ModelParams& params, const ExplicitDist& d,
                           int k, SelectRule rule, double nucleus_p,
                           const PosteriorFn& proposal_fn, double reach_floor, int64_t op_cap) {
    if (model.config().vocab_size != d.vocab().size || model.config().seq_len != d.length())
        throw std::invalid_argument("oracle_gap: model/distribution shape mismatch");
    const int len = d.length();

    // posterior gap over all masked views of the support
    double ops = double(d.support().size()) * std::pow(2.0, double(len)) * double(len);
    if (ops > double(op_cap))
        throw EnumerationCapError("oracle_gap: posterior state space exceeds cap");

    OracleGapReport rep;
    std::set<std::vector<TokenId>> seen;
    for (const auto& [x, w] : d.support()) {
        if (w <= 0.0)
            continue;
        for (uint32_t bits = 1; bits < (uint32_t(1) << len); ++bits) {
            std::vector<int> idx;
            for (int i = 0; i < len; ++i)
                if (bits & (uint32_t(1) << i))
                    idx.push_back(i);
            MaskedSeq z = mask_at(x, MaskSet(idx));
            if (!seen.insert(z.tokens()).second)
                continue;
            ModelOutputs out = model.forward(params, z);
            for (int i : idx) {
                PosteriorRow truth = oracle_posterior(d, z, i);
                for (int v = 0; v < d.vocab().size; ++v)
                    rep.max_posterior_gap = std::max(
                        rep.max_posterior_gap, std::abs(out.posterior[size_t(i)].probs[size_t(v)] -
                                                        truth.probs[size_t(v)]));
            }
            rep.posterior_states++;
        }
    }

    FinetuneJoint joint = enumerate_finetune_joint(d, proposal_fn, rule, k, nucleus_p, op_cap);
    for (const auto& st : joint.states) {
        if (st.reach_prob < reach_floor)
            continue;
        ModelOutputs out = model.forward(params, st.y);
        rep.max_quality_gap = std::max(
            rep.max_quality_gap, std::abs(out.quality[size_t(st.pos)] - st.extended_quality));
        rep.quality_states++;
    }
    return rep;
}

NllReport sequence_nll(const ExplicitDist& d, const std::vector<MaskedSeq>& samples) {
    if (samples.empty())
        throw std::invalid_argument("sequence_nll: no samples");
    NllReport rep;
    rep.samples = int64_t(samples.size());
    KahanSum nll;
    int64_t off = 0, on = 0;
    for (const auto& s : samples) {
        if (!s.fully_clean())
            throw std::invalid_argument("sequence_nll: sample contains a mask");
        double p = d.prob_of(s);
        if (p <= 0.0) {
            ++off;
        } else {
            nll.add(-std::log(p));
            ++on;
        }
    }
    rep.off_support_fraction = double(off) / double(samples.size());
    rep.nll = on > 0 ? nll.value() / double(on) : 0.0;
    return rep;
}

double sample_entropy(const std::vector<MaskedSeq>& samples) {
    if (samples.empty())
        throw std::invalid_argument("sample_entropy: no samples");
    std::map<std::vector<TokenId>, int64_t> counts;
    for (const auto& s : samples)
        counts[s.tokens()]++;
    KahanSum h;
    const double n = double(samples.size());
    for (const auto& [tokens, c] : counts) {
        double p = double(c) / n;
        h.add(-p * std::log(p));
    }
    return h.value();
}

} // namespace prism
