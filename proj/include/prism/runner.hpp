#pragma once

#include "prism/config.hpp"
#include "prism/distribution.hpp"
#include "prism/sudoku.hpp"

#include <optional>
#include <string>
#include <vector>

namespace prism {

// Data resolved from cfg.task: the training distribution, the held-out
// boards for sudoku tasks, and the model shape.
struct TaskData {
    DataDistribution train;
    std::vector<Board> eval_boards;
    Vocab vocab;
    int seq_len = 0;
    int sudoku_side = 0;

    TaskData(DataDistribution d, Vocab v, int len)
        : train(std::move(d)), vocab(v), seq_len(len) {}
};

TaskData resolve_task(const RunConfig& cfg);

// Creates <out>/<timestamp>_<confighash>_<command>/ and writes the effective
// configuration into it.
std::string make_run_dir(const RunConfig& cfg, const std::string& command);

// Each command returns its run directory (gen returns the corpus directory).
std::string cmd_gen(const RunConfig& cfg);
std::string cmd_pretrain(const RunConfig& cfg, const std::string& resume = "");
std::string cmd_finetune(const RunConfig& cfg, const std::string& resume = "");
std::string cmd_sample(const RunConfig& cfg);
std::string cmd_eval(const RunConfig& cfg);
// prints one line per suite; returns 0 on success, 2 on verification failure
int cmd_verify(const RunConfig& cfg);

} // namespace prism
