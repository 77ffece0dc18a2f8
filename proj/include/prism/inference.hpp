#pragma once

#include "prism/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace prism {

enum class UnmaskRule { random, confidence, semi_ar };
enum class RemaskPolicy { none, prism, remdm_random, remdm_conf };
enum class RemaskSchedule { fixed, binomial };

UnmaskRule parse_unmask_rule(const std::string& name);
RemaskPolicy parse_remask_policy(const std::string& name);
RemaskSchedule parse_remask_schedule(const std::string& name);
std::string unmask_rule_name(UnmaskRule r);
std::string remask_policy_name(RemaskPolicy p);
std::string remask_schedule_name(RemaskSchedule s);

struct InferencePlan {
    int steps = 1; // N
    UnmaskRule unmask_rule = UnmaskRule::random;
    int n_blocks = 1; // semi-autoregressive blocks
    RemaskPolicy remask = RemaskPolicy::none;
    RemaskSchedule schedule = RemaskSchedule::fixed;
    double eta = 0.0;  // binomial remask ratio
    int remask_k = 0;  // fixed remask count K
    int l_on = 0;      // first step index at which remasking may activate
    int loop_steps = 0; // terminal refinement iterations
    int loop_m = 0;     // positions refreshed per loop iteration
    double nucleus_p = 1.0;

    // Checks the plan against a sequence length; throws ConfigError.
    void validate(int seq_len) const;
    std::string fingerprint() const;
};

struct StepTrace {
    int step = 0;
    MaskSet unmasked; // S
    MaskSet remasked; // T
    // quality snapshot at step start; -1 at masked positions
    std::vector<double> quality;
    MaskedSeq before, after;
    bool final_sweep = false;
    bool loop_phase = false;
    uint64_t forward_calls = 0;
};

struct InferenceResult {
    MaskedSeq sequence;
    std::vector<StepTrace> trace;
};

// Per-position remask scores at one step; lower means remasked sooner. Masked
// and frozen positions and, for the stored-confidence policy, positions that
// were never unmasked in this run score +infinity.
std::vector<double> score_tokens(RemaskPolicy policy, const MaskedSeq& state,
                                 const ModelOutputs& outputs,
                                 const std::vector<double>& stored_confidence,
                                 const std::vector<bool>& frozen, Rng& rng);

// Unmask/remask set sizes for one step; both sets are later capped by the
// available masked/clean counts.
struct StepSizes {
    int unmask = 0;
    int remask = 0;
};
StepSizes sample_step_sizes(const InferencePlan& plan, int step, int masked_count,
                            int clean_count, int free_count, Rng& remask_rng);

// Runs the unmask/remask loop from an all-mask start (condition positions,
// when given, are placed first and frozen: never unmasked, remasked, or
// counted as remaskable). Any position still masked after the last step is
// unmasked greedily in one final sweep. Deterministic in (params, plan, seed).
InferenceResult run_inference(const Model& model, const ModelParams& params,
                              const InferencePlan& plan, uint64_t seed,
                              const std::optional<MaskedSeq>& condition = std::nullopt,
                              bool record_trace = true);

// run_inference followed by plan.loop_steps refinement iterations: uniformly
// pick loop_m non-frozen positions, remask them, and immediately resample
// them from the posterior of the remasked state.
InferenceResult run_loop(const Model& model, const ModelParams& params,
                         const InferencePlan& plan, uint64_t seed,
                         const std::optional<MaskedSeq>& condition = std::nullopt,
                         bool record_trace = true);

// Exact output law of the sampler by full path enumeration (no sampling).
// Supported for remask none + random rule + no loop; guarded by a path cap.
std::vector<std::pair<MaskedSeq, double>> enumerate_output_law(const Model& model,
                                                               const ModelParams& params,
                                                               const InferencePlan& plan,
                                                               int64_t path_cap = 1'000'000);

// Line-delimited trace export, one JSON object per step.
void write_trace_jsonl(const std::string& path, const InferenceResult& result);

} // namespace prism
