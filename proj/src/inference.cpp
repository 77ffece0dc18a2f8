#include "prism/inference.hpp"

#include "prism/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

namespace prism {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// substream labels: unrelated draws must not perturb each other
constexpr uint64_t kStreamRemaskSize = 0x502;
constexpr uint64_t kStreamUnmaskSel = 0x503;
constexpr uint64_t kStreamRemaskScore = 0x504;
constexpr uint64_t kStreamTokens = 0x505;
constexpr uint64_t kStreamLoop = 0x601;

} // namespace

UnmaskRule parse_unmask_rule(const std::string& name) {
    if (name == "random")
        return UnmaskRule::random;
    if (name == "confidence")
        return UnmaskRule::confidence;
    if (name == "semi_ar")
        return UnmaskRule::semi_ar;
    throw ConfigError("unknown unmask rule '" + name + "' (expected random|confidence|semi_ar)");
}

RemaskPolicy parse_remask_policy(const std::string& name) {
    if (name == "none")
        return RemaskPolicy::none;
    if (name == "prism")
        return RemaskPolicy::prism;
    if (name == "remdm_random")
        return RemaskPolicy::remdm_random;
    if (name == "remdm_conf")
        return RemaskPolicy::remdm_conf;
    throw ConfigError("unknown remask policy '" + name +
                      "' (expected none|prism|remdm_random|remdm_conf)");
}

RemaskSchedule parse_remask_schedule(const std::string& name) {
    if (name == "fixed")
        return RemaskSchedule::fixed;
    if (name == "binomial")
        return RemaskSchedule::binomial;
    throw ConfigError("unknown remask schedule '" + name + "' (expected fixed|binomial)");
}

std::string unmask_rule_name(UnmaskRule r) {
    switch (r) {
    case UnmaskRule::random:
        return "random";
    case UnmaskRule::confidence:
        return "confidence";
    case UnmaskRule::semi_ar:
        return "semi_ar";
    }
    return "?";
}

std::string remask_policy_name(RemaskPolicy p) {
    switch (p) {
    case RemaskPolicy::none:
        return "none";
    case RemaskPolicy::prism:
        return "prism";
    case RemaskPolicy::remdm_random:
        return "remdm_random";
    case RemaskPolicy::remdm_conf:
        return "remdm_conf";
    }
    return "?";
}

std::string remask_schedule_name(RemaskSchedule s) {
    return s == RemaskSchedule::fixed ? "fixed" : "binomial";
}

void InferencePlan::validate(int seq_len) const {
    if (steps < 1)
        throw ConfigError("plan: steps must be positive");
    if (eta < 0.0 || eta > 1.0)
        throw ConfigError("plan: eta must lie in [0, 1]");
    if (nucleus_p < 0.0 || nucleus_p > 1.0)
        throw ConfigError("plan: nucleus_p must lie in [0, 1]");
    if (remask_k < 0)
        throw ConfigError("plan: remask K must be nonnegative");
    if (remask != RemaskPolicy::none && schedule == RemaskSchedule::fixed &&
        remask_k >= seq_len)
        throw ConfigError("plan: remask K must be below the sequence length");
    if (n_blocks < 1 || n_blocks > seq_len)
        throw ConfigError("plan: n_blocks must lie in [1, L]");
    if (loop_steps < 0 || loop_m < 0 || loop_m > seq_len)
        throw ConfigError("plan: loop settings out of range (M must not exceed L)");
    if (loop_steps > 0 && loop_m == 0)
        throw ConfigError("plan: loop steps require M > 0");
    if (l_on < 0)
        throw ConfigError("plan: l_on must be nonnegative");
}

std::string InferencePlan::fingerprint() const {
    std::string s = "N" + std::to_string(steps) + "-" + unmask_rule_name(unmask_rule);
    if (unmask_rule == UnmaskRule::semi_ar)
        s += std::to_string(n_blocks);
    s += "-" + remask_policy_name(remask);
    if (remask != RemaskPolicy::none) {
        s += "-" + remask_schedule_name(schedule);
        s += schedule == RemaskSchedule::fixed ? ("K" + std::to_string(remask_k))
                                               : ("eta" + format_double(eta));
        s += "-lon" + std::to_string(l_on);
    }
    if (loop_steps > 0)
        s += "-loop" + std::to_string(loop_steps) + "x" + std::to_string(loop_m);
    s += "-p" + format_double(nucleus_p);
    return s;
}

std::vector<double> score_tokens(RemaskPolicy policy, const MaskedSeq& state,
                                 const ModelOutputs& outputs,
                                 const std::vector<double>& stored_confidence,
                                 const std::vector<bool>& frozen, Rng& rng) {
    const int len = state.length();
    std::vector<double> scores(size_t(len), kInf);
    for (int i = 0; i < len; ++i) {
        if (state.is_masked(i) || frozen[size_t(i)])
            continue;
        switch (policy) {
        case RemaskPolicy::none:
            break;
        case RemaskPolicy::prism:
            scores[size_t(i)] = outputs.quality[size_t(i)];
            break;
        case RemaskPolicy::remdm_random:
            scores[size_t(i)] = rng.uniform01();
            break;
        case RemaskPolicy::remdm_conf:
            scores[size_t(i)] = stored_confidence[size_t(i)]; // +inf if never unmasked
            break;
        }
    }
    return scores;
}

StepSizes sample_step_sizes(const InferencePlan& plan, int step, int masked_count,
                            int clean_count, int free_count, Rng& remask_rng) {
    const int base = (free_count + plan.steps - 1) / plan.steps; // ceil(free / N)
    StepSizes sizes{base, 0};
    if (plan.remask != RemaskPolicy::none) {
        int k = plan.schedule == RemaskSchedule::binomial
                    ? remask_rng.binomial(clean_count, plan.eta)
                    : plan.remask_k;
        if (k > 0 && k <= masked_count && masked_count < free_count - k && step >= plan.l_on) {
            sizes.remask = k;
            sizes.unmask = base + k;
        }
    }
    sizes.unmask = std::min(sizes.unmask, masked_count);
    sizes.remask = std::min(sizes.remask, clean_count);
    return sizes;
}

namespace {

std::vector<int> pick_lowest(const std::vector<double>& scores, const std::vector<int>& pool,
                             int count) {
    std::vector<int> order = pool;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[size_t(a)] < scores[size_t(b)];
    });
    order.resize(size_t(std::min<size_t>(order.size(), size_t(count))));
    std::sort(order.begin(), order.end());
    return order;
}

std::vector<int> select_unmask_set(const InferencePlan& plan, const MaskedSeq& state,
                                   const ModelOutputs& outputs, const std::vector<bool>& frozen,
                                   const std::vector<int>& free_order, int count, Rng& rng) {
    std::vector<int> masked;
    for (int i : free_order)
        if (state.is_masked(i))
            masked.push_back(i);
    if (count >= int(masked.size()))
        return masked;

    auto confidence_of = [&](int i) {
        const auto& row = outputs.posterior[size_t(i)].probs;
        return *std::max_element(row.begin(), row.end());
    };

    switch (plan.unmask_rule) {
    case UnmaskRule::random: {
        std::vector<int> pick = rng.sample_indices(int(masked.size()), count);
        std::vector<int> out;
        for (int idx : pick)
            out.push_back(masked[size_t(idx)]);
        return out;
    }
    case UnmaskRule::confidence: {
        std::vector<int> order = masked;
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return confidence_of(a) > confidence_of(b); });
        order.resize(size_t(count));
        std::sort(order.begin(), order.end());
        return order;
    }
    case UnmaskRule::semi_ar: {
        // blocks partition the free positions left to right; decode the
        // lowest unfinished block first (most confident within the block),
        // spilling leftover budget into later blocks
        const int free_count = int(free_order.size());
        const int block = (free_count + plan.n_blocks - 1) / plan.n_blocks;
        std::vector<int> out;
        for (int b = 0; b < plan.n_blocks && int(out.size()) < count; ++b) {
            std::vector<int> block_masked;
            for (int j = b * block; j < std::min((b + 1) * block, free_count); ++j)
                if (state.is_masked(free_order[size_t(j)]))
                    block_masked.push_back(free_order[size_t(j)]);
            if (block_masked.empty())
                continue;
            std::stable_sort(block_masked.begin(), block_masked.end(),
                             [&](int a, int b2) { return confidence_of(a) > confidence_of(b2); });
            for (int i : block_masked) {
                if (int(out.size()) >= count)
                    break;
                out.push_back(i);
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }
    }
    return masked;
}

// restricts remasking to the active (lowest unfinished) block
void restrict_remask_to_block(const InferencePlan& plan, const MaskedSeq& state,
                              const std::vector<int>& free_order, std::vector<int>& pool) {
    if (plan.unmask_rule != UnmaskRule::semi_ar || plan.n_blocks <= 1)
        return;
    const int free_count = int(free_order.size());
    const int block = (free_count + plan.n_blocks - 1) / plan.n_blocks;
    for (int b = 0; b < plan.n_blocks; ++b) {
        bool has_masked = false;
        for (int j = b * block; j < std::min((b + 1) * block, free_count); ++j)
            if (state.is_masked(free_order[size_t(j)]))
                has_masked = true;
        if (!has_masked)
            continue;
        std::vector<int> in_block;
        for (int j = b * block; j < std::min((b + 1) * block, free_count); ++j) {
            int pos = free_order[size_t(j)];
            if (std::find(pool.begin(), pool.end(), pos) != pool.end())
                in_block.push_back(pos);
        }
        pool = std::move(in_block);
        return;
    }
    pool.clear();
}

std::vector<double> quality_snapshot(const MaskedSeq& state, const ModelOutputs& outputs) {
    std::vector<double> snap(size_t(state.length()), -1.0);
    for (int i = 0; i < state.length(); ++i)
        if (!state.is_masked(i))
            snap[size_t(i)] = outputs.quality[size_t(i)];
    return snap;
}

} // namespace

InferenceResult run_inference(const Model& model, const ModelParams& params,
                              const InferencePlan& plan, uint64_t seed,
                              const std::optional<MaskedSeq>& condition, bool record_trace) {
    const int len = model.config().seq_len;
    plan.validate(len);

    std::vector<bool> frozen(size_t(len), false);
    MaskedSeq state = MaskedSeq::all_masked(model.vocab(), len);
    if (condition) {
        if (condition->length() != len)
            throw ConfigError("run_inference: condition length mismatch");
        for (int i = 0; i < len; ++i) {
            if (!condition->is_masked(i)) {
                state = state.with_token(i, condition->at(i));
                frozen[size_t(i)] = true;
            }
        }
    }
    std::vector<int> free_order;
    for (int i = 0; i < len; ++i)
        if (!frozen[size_t(i)])
            free_order.push_back(i);
    const int free_count = int(free_order.size());
    if (free_count == 0)
        return InferenceResult{state, {}};
    if (plan.remask != RemaskPolicy::none && plan.schedule == RemaskSchedule::fixed &&
        plan.remask_k >= free_count)
        throw ConfigError("run_inference: remask K must be below the free position count");

    std::vector<double> stored_conf(size_t(len), kInf);
    InferenceResult result;

    for (int step = 0; step < plan.steps; ++step) {
        uint64_t fw_before = model.forward_count();
        ModelOutputs outputs = model.forward(params, state);

        std::vector<int> masked_pool, clean_pool;
        for (int i : free_order)
            (state.is_masked(i) ? masked_pool : clean_pool).push_back(i);

        Rng remask_size_rng(derive_seed(seed, kStreamRemaskSize, uint64_t(step)));
        StepSizes sizes = sample_step_sizes(plan, step, int(masked_pool.size()),
                                            int(clean_pool.size()), free_count, remask_size_rng);

        Rng sel_rng(derive_seed(seed, kStreamUnmaskSel, uint64_t(step)));
        std::vector<int> unmask_set =
            select_unmask_set(plan, state, outputs, frozen, free_order, sizes.unmask, sel_rng);

        std::vector<int> remask_set;
        if (sizes.remask > 0) {
            Rng score_rng(derive_seed(seed, kStreamRemaskScore, uint64_t(step)));
            std::vector<double> scores =
                score_tokens(plan.remask, state, outputs, stored_conf, frozen, score_rng);
            std::vector<int> pool = clean_pool;
            restrict_remask_to_block(plan, state, free_order, pool);
            remask_set = pick_lowest(scores, pool, sizes.remask);
        }

        MaskedSeq before = state;
        Rng tok_rng(derive_seed(seed, kStreamTokens, uint64_t(step)));
        std::vector<TokenId> tokens = state.tokens();
        for (int i : unmask_set) {
            PosteriorRow row = nucleus_truncate(outputs.posterior[size_t(i)], plan.nucleus_p);
            TokenId tok = sample_from_row(row, tok_rng);
            tokens[size_t(i)] = tok;
            stored_conf[size_t(i)] = outputs.posterior[size_t(i)].probs[size_t(tok)];
        }
        for (int i : remask_set)
            tokens[size_t(i)] = model.vocab().mask_id();
        state = MaskedSeq(model.vocab(), std::move(tokens));

        if (record_trace) {
            StepTrace tr;
            tr.step = step;
            tr.unmasked = MaskSet(unmask_set);
            tr.remasked = MaskSet(remask_set);
            tr.quality = quality_snapshot(before, outputs);
            tr.before = std::move(before);
            tr.after = state;
            tr.forward_calls = model.forward_count() - fw_before;
            result.trace.push_back(std::move(tr));
        }
    }

    // final sweep: remasking can leave stragglers past the last grid step
    if (!state.fully_clean()) {
        uint64_t fw_before = model.forward_count();
        ModelOutputs outputs = model.forward(params, state);
        MaskedSeq before = state;
        std::vector<TokenId> tokens = state.tokens();
        std::vector<int> swept;
        for (int i : free_order) {
            if (!state.is_masked(i))
                continue;
            tokens[size_t(i)] = argmax_token(outputs.posterior[size_t(i)]);
            swept.push_back(i);
        }
        state = MaskedSeq(model.vocab(), std::move(tokens));
        if (record_trace) {
            StepTrace tr;
            tr.step = plan.steps;
            tr.unmasked = MaskSet(swept);
            tr.quality = quality_snapshot(before, outputs);
            tr.before = std::move(before);
            tr.after = state;
            tr.final_sweep = true;
            tr.forward_calls = model.forward_count() - fw_before;
            result.trace.push_back(std::move(tr));
        }
    }

    result.sequence = std::move(state);
    return result;
}

InferenceResult run_loop(const Model& model, const ModelParams& params, const InferencePlan& plan,
                         uint64_t seed, const std::optional<MaskedSeq>& condition,
                         bool record_trace) {
    InferenceResult result = run_inference(model, params, plan, seed, condition, record_trace);
    if (plan.loop_steps == 0)
        return result;

    const int len = model.config().seq_len;
    std::vector<bool> frozen(size_t(len), false);
    if (condition)
        for (int i = 0; i < len; ++i)
            if (!condition->is_masked(i))
                frozen[size_t(i)] = true;
    std::vector<int> free_order;
    for (int i = 0; i < len; ++i)
        if (!frozen[size_t(i)])
            free_order.push_back(i);

    MaskedSeq state = result.sequence;
    const int m = std::min(plan.loop_m, int(free_order.size()));
    for (int it = 0; it < plan.loop_steps; ++it) {
        Rng rng(derive_seed(seed, kStreamLoop, uint64_t(it)));
        std::vector<int> pick = rng.sample_indices(int(free_order.size()), m);
        std::vector<int> chosen;
        for (int idx : pick)
            chosen.push_back(free_order[size_t(idx)]);

        MaskedSeq remasked = mask_at(state, MaskSet(chosen));
        uint64_t fw_before = model.forward_count();
        ModelOutputs outputs = model.forward(params, remasked);
        std::vector<TokenId> tokens = remasked.tokens();
        for (int i : chosen) {
            PosteriorRow row = nucleus_truncate(outputs.posterior[size_t(i)], plan.nucleus_p);
            tokens[size_t(i)] = sample_from_row(row, rng);
        }
        MaskedSeq next(model.vocab(), std::move(tokens));
        if (record_trace) {
            StepTrace tr;
            tr.step = plan.steps + 1 + it;
            tr.unmasked = MaskSet(chosen);
            tr.remasked = MaskSet(chosen);
            tr.quality = quality_snapshot(remasked, outputs);
            tr.before = state;
            tr.after = next;
            tr.loop_phase = true;
            tr.forward_calls = model.forward_count() - fw_before;
            result.trace.push_back(std::move(tr));
        }
        state = std::move(next);
    }
    result.sequence = std::move(state);
    return result;
}

namespace {

void enumerate_paths(const Model& model, const ModelParams& params, const InferencePlan& plan,
                     const MaskedSeq& state, int step, double prob,
                     std::map<std::vector<TokenId>, KahanSum>& law, int64_t& paths,
                     int64_t path_cap) {
    if (++paths > path_cap)
        throw EnumerationCapError("enumerate_output_law: path count exceeds cap " +
                                  std::to_string(path_cap));
    const int len = state.length();
    if (step >= plan.steps || state.fully_clean()) {
        MaskedSeq final_state = state;
        if (!final_state.fully_clean()) {
            ModelOutputs outputs = model.forward(params, final_state);
            std::vector<TokenId> tokens = final_state.tokens();
            for (int i = 0; i < len; ++i)
                if (final_state.is_masked(i))
                    tokens[size_t(i)] = argmax_token(outputs.posterior[size_t(i)]);
            final_state = MaskedSeq(final_state.vocab(), std::move(tokens));
        }
        law[final_state.tokens()].add(prob);
        return;
    }

    ModelOutputs outputs = model.forward(params, state);
    std::vector<int> masked = masked_positions(state).indices();
    const int base = (len + plan.steps - 1) / plan.steps;
    const int count = std::min<int>(base, int(masked.size()));

    // all size-`count` subsets, uniform; then all token assignments
    std::vector<int> cursor(static_cast<size_t>(count));
    std::iota(cursor.begin(), cursor.end(), 0);
    const int n = int(masked.size());
    double n_subsets = 1.0;
    for (int i = 1; i <= count; ++i)
        n_subsets *= double(n - count + i) / double(i);

    while (true) {
        std::vector<int> subset;
        for (int c : cursor)
            subset.push_back(masked[size_t(c)]);

        std::vector<PosteriorRow> rows;
        for (int i : subset)
            rows.push_back(nucleus_truncate(outputs.posterior[size_t(i)], plan.nucleus_p));

        std::vector<TokenId> choice(subset.size());
        std::function<void(size_t, double)> assign = [&](size_t depth, double p_tok) {
            if (depth == subset.size()) {
                std::vector<TokenId> tokens = state.tokens();
                for (size_t j = 0; j < subset.size(); ++j)
                    tokens[size_t(subset[j])] = choice[j];
                enumerate_paths(model, params, plan, MaskedSeq(state.vocab(), std::move(tokens)),
                                step + 1, prob / n_subsets * p_tok, law, paths, path_cap);
                return;
            }
            const auto& row = rows[depth];
            for (size_t v = 0; v < row.probs.size(); ++v) {
                if (row.probs[v] <= 0.0)
                    continue;
                choice[depth] = TokenId(v);
                assign(depth + 1, p_tok * row.probs[v]);
            }
        };
        assign(0, 1.0);

        int i = count - 1;
        while (i >= 0 && cursor[size_t(i)] == n - count + i)
            --i;
        if (i < 0)
            break;
        cursor[size_t(i)]++;
        for (int j = i + 1; j < count; ++j)
            cursor[size_t(j)] = cursor[size_t(j - 1)] + 1;
    }
}

} // namespace

std::vector<std::pair<MaskedSeq, double>> enumerate_output_law(const Model& model,
                                                               const ModelParams& params,
                                                               const InferencePlan& plan,
                                                               int64_t path_cap) {
    plan.validate(model.config().seq_len);
    if (plan.remask != RemaskPolicy::none || plan.unmask_rule != UnmaskRule::random ||
        plan.loop_steps != 0)
        throw EnumerationCapError(
            "enumerate_output_law: only remask none + random rule + no loop is enumerable");

    MaskedSeq start = MaskedSeq::all_masked(model.vocab(), model.config().seq_len);
    std::map<std::vector<TokenId>, KahanSum> law;
    int64_t paths = 0;
    enumerate_paths(model, params, plan, start, 0, 1.0, law, paths, path_cap);

    std::vector<std::pair<MaskedSeq, double>> out;
    out.reserve(law.size());
    for (const auto& [tokens, mass] : law)
        out.emplace_back(MaskedSeq(model.vocab(), tokens), mass.value());
    return out;
}

void write_trace_jsonl(const std::string& path, const InferenceResult& result) {
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("write_trace_jsonl: cannot open " + path);
    for (const auto& tr : result.trace) {
        nlohmann::json j;
        j["step"] = tr.step;
        j["unmask"] = tr.unmasked.indices();
        j["remask"] = tr.remasked.indices();
        j["quality"] = tr.quality;
        j["before"] = format_seq(tr.before);
        j["after"] = format_seq(tr.after);
        j["final_sweep"] = tr.final_sweep;
        j["loop_phase"] = tr.loop_phase;
        j["forward_calls"] = tr.forward_calls;
        out << j.dump() << '\n';
    }
}

} // namespace prism
