#pragma once

#include "prism/inference.hpp"
#include "prism/model.hpp"
#include "prism/training.hpp"

#include <map>
#include <string>

namespace prism {

// Flat key=value configuration with dotted section keys. Every key has a
// default; a key outside the schema is a hard error naming the offender.
struct RunConfig {
    std::string task = "sudoku4"; // sudoku4 | sudoku9 | explicit-file | dataset-file
    std::string data_path;
    int data_vocab_size = 0; // 0 = infer from the data file
    uint64_t seed = 1;
    std::string out_dir = "runs";
    int threads = 2;

    ArchitectureConfig arch; // vocab_size/seq_len resolved from the task

    PretrainConfig pretrain;
    std::string finetune_init;
    FinetuneConfig finetune;
    int finetune_eval_every = 0; // success-vs-step curve cadence (0 = off)
    int finetune_eval_samples = 64;

    InferencePlan plan;
    int plan_steps_raw = 0; // 0 = one step per position (N = L)

    int sample_count = 16;
    std::string sample_checkpoint;
    bool sample_traces = true;

    int gen_train_count = 250;
    int gen_eval_count = 38;

    std::string eval_metric = "success"; // success | detection | nll
    std::string eval_checkpoint;
    int eval_samples = 200;
    int eval_trials = 500;
    int eval_corruptions = 3;
    std::string eval_boards;
};

RunConfig default_run_config();
// Empty path returns the defaults.
RunConfig load_run_config(const std::string& path);

// Canonical "key = value" dump of the effective configuration (sorted keys).
std::string serialize_config(const RunConfig& cfg);
// FNV-1a hash of the canonical dump, hex, 16 chars.
std::string config_fingerprint(const RunConfig& cfg);

// N for a resolved sequence length (plan.steps of 0 means N = L).
InferencePlan plan_for_length(const RunConfig& cfg, int seq_len);

} // namespace prism
