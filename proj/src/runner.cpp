#include "prism/runner.hpp"

#include "prism/eval.hpp"
#include "prism/inference.hpp"
#include "prism/training.hpp"
#include "prism/util.hpp"
#include "prism/verify.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace prism {

namespace {

constexpr uint64_t kGenStream = 0x6e6;
constexpr uint64_t kEvalStream = 0xe7a1;

void require_file(const std::string& path, const std::string& what) {
    if (path.empty())
        throw ConfigError(what + " is required but not set");
    if (!fs::exists(path))
        throw ConfigError(what + " does not exist: " + path);
}

int infer_vocab_size(const std::string& path, bool tab_weighted) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open data file: " + path);
    int max_id = -1;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::string body = line;
        if (tab_weighted) {
            size_t tab = line.find('\t');
            if (tab == std::string::npos)
                throw ConfigError("explicit data file line missing tab: " + line);
            body = line.substr(tab + 1);
        }
        std::istringstream ls(body);
        std::string tok;
        while (ls >> tok) {
            if (tok == "_")
                continue;
            max_id = std::max(max_id, std::stoi(tok));
        }
    }
    if (max_id < 1)
        throw ConfigError("data file has no usable tokens: " + path);
    return max_id + 1;
}

std::vector<Board> split_eval_boards(const RunConfig& cfg, int side) {
    // deterministic corpus: the same seed always yields the same split
    Rng rng(derive_seed(cfg.seed, kGenStream));
    std::vector<Board> all =
        generate_boards(side, cfg.gen_train_count + cfg.gen_eval_count, rng);
    return {all.begin() + cfg.gen_train_count, all.end()};
}

std::string timestamp_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

class MetricsWriter {
  public:
    MetricsWriter(const std::string& path, bool with_gaps) : out_(path), with_gaps_(with_gaps) {
        if (!out_)
            throw std::runtime_error("cannot open metrics file " + path);
        out_ << "step,mdm_loss,prism_loss,total,wall_ms";
        if (with_gaps_)
            out_ << ",posterior_gap,quality_gap";
        out_ << "\n";
    }

    void row(const TrainMetricsRow& r, const OracleGapReport* gap) {
        out_ << r.step << ',' << format_double(r.mdm_loss) << ',' << format_double(r.prism_loss)
             << ',' << format_double(r.total) << ',' << format_double(r.wall_ms);
        if (with_gaps_) {
            out_ << ',' << (gap ? format_double(gap->max_posterior_gap) : "");
            out_ << ',' << (gap ? format_double(gap->max_quality_gap) : "");
        }
        out_ << '\n';
        out_.flush();
    }

  private:
    std::ofstream out_;
    bool with_gaps_;
};

// oracle-gap columns are emitted when the exact oracles stay affordable
bool gaps_available(const RunConfig& cfg, const TaskData& td) {
    if (cfg.arch.backend != Backend::tabular || !td.train.is_explicit())
        return false;
    double states = std::pow(2.0, double(td.seq_len)) * double(td.train.as_explicit().support().size());
    return states <= 1e5;
}

Model build_model(const RunConfig& cfg, const TaskData& td) {
    ArchitectureConfig arch = cfg.arch;
    arch.vocab_size = td.vocab.size;
    arch.seq_len = td.seq_len;
    return Model(arch);
}

void save_both(const std::string& dir, const Model& model, const ModelParams& params,
               uint64_t seed, int64_t step, const std::string& stem) {
    save_checkpoint(dir + "/" + stem + ".ckpt", model, params, seed, step);
    save_checkpoint(dir + "/checkpoint_latest.ckpt", model, params, seed, step);
}

} // namespace

TaskData resolve_task(const RunConfig& cfg) {
    if (cfg.task == "sudoku4" || cfg.task == "sudoku9") {
        const int side = cfg.task == "sudoku4" ? 4 : 9;
        Vocab vocab = sudoku_vocab(side);
        const int len = sudoku_seq_len(side);
        std::vector<Board> train_boards, eval_boards;
        if (!cfg.data_path.empty()) {
            require_file(cfg.data_path + "/train.txt", "corpus train split");
            require_file(cfg.data_path + "/eval.txt", "corpus eval split");
            train_boards = read_board_corpus(cfg.data_path + "/train.txt", side);
            eval_boards = read_board_corpus(cfg.data_path + "/eval.txt", side);
        } else {
            Rng rng(derive_seed(cfg.seed, kGenStream));
            std::vector<Board> all =
                generate_boards(side, cfg.gen_train_count + cfg.gen_eval_count, rng);
            train_boards.assign(all.begin(), all.begin() + cfg.gen_train_count);
            eval_boards.assign(all.begin() + cfg.gen_train_count, all.end());
        }
        std::vector<MaskedSeq> seqs;
        seqs.reserve(train_boards.size());
        for (const auto& b : train_boards)
            seqs.push_back(tokenize(b));
        TaskData td(DataDistribution(EmpiricalDist(vocab, std::move(seqs))), vocab, len);
        td.eval_boards = std::move(eval_boards);
        td.sudoku_side = side;
        return td;
    }

    require_file(cfg.data_path, "data.path");
    const bool explicit_task = cfg.task == "explicit-file";
    int vocab_size = cfg.data_vocab_size > 0
                         ? cfg.data_vocab_size
                         : infer_vocab_size(cfg.data_path, explicit_task);
    Vocab vocab(vocab_size);
    if (explicit_task) {
        ExplicitDist d = load_explicit(cfg.data_path, vocab);
        int len = d.length();
        return TaskData(DataDistribution(std::move(d)), vocab, len);
    }
    EmpiricalDist d = load_empirical(cfg.data_path, vocab);
    int len = d.length();
    return TaskData(DataDistribution(std::move(d)), vocab, len);
}

std::string make_run_dir(const RunConfig& cfg, const std::string& command) {
    std::string dir = cfg.out_dir + "/" + timestamp_now() + "_" +
                      config_fingerprint(cfg).substr(0, 8) + "_" + command;
    fs::create_directories(dir);
    std::ofstream conf(dir + "/config.txt");
    conf << serialize_config(cfg);
    return dir;
}

std::string cmd_gen(const RunConfig& cfg) {
    if (cfg.task != "sudoku4" && cfg.task != "sudoku9")
        throw ConfigError("gen: only sudoku tasks have a generated corpus");
    const int side = cfg.task == "sudoku4" ? 4 : 9;
    std::string dir = make_run_dir(cfg, "gen");

    Rng rng(derive_seed(cfg.seed, kGenStream));
    std::vector<Board> all = generate_boards(side, cfg.gen_train_count + cfg.gen_eval_count, rng);
    std::vector<Board> train(all.begin(), all.begin() + cfg.gen_train_count);
    std::vector<Board> eval(all.begin() + cfg.gen_train_count, all.end());
    write_board_corpus(dir + "/train.txt", train);
    write_board_corpus(dir + "/eval.txt", eval);
    write_manifest(dir + "/manifest.json",
                   CorpusManifest{side, int(train.size()), int(eval.size()), cfg.seed});
    std::cout << "corpus: " << train.size() << " train / " << eval.size() << " eval boards -> "
              << dir << "\n";
    return dir;
}

std::string cmd_pretrain(const RunConfig& cfg, const std::string& resume) {
    TaskData td = resolve_task(cfg);
    Model model = build_model(cfg, td);
    std::string dir = make_run_dir(cfg, "pretrain");

    PretrainConfig pcfg = cfg.pretrain;
    ModelParams init;
    if (!resume.empty()) {
        uint64_t ck_seed = 0;
        int64_t ck_step = 0;
        init = load_params_for(model, resume, &ck_seed, &ck_step);
        pcfg.start_step = ck_step;
        if (ck_seed != cfg.seed)
            throw ConfigError("resume checkpoint was produced under a different seed");
    }

    MetricsWriter metrics(dir + "/metrics.csv", false);
    TrainHooks hooks;
    hooks.on_log = [&](const TrainMetricsRow& row, const ModelParams&) {
        metrics.row(row, nullptr);
    };
    hooks.on_checkpoint = [&](int64_t step, const ModelParams& p) {
        save_both(dir, model, p, cfg.seed, step, "checkpoint_" + std::to_string(step));
    };

    ModelParams params = pretrain(model, td.train, pcfg, cfg.seed, hooks, std::move(init));
    save_both(dir, model, params, cfg.seed, cfg.pretrain.steps, "checkpoint_final");
    std::cout << "pretrain: " << cfg.pretrain.steps << " steps -> " << dir << "\n";
    return dir;
}

std::string cmd_finetune(const RunConfig& cfg, const std::string& resume) {
    TaskData td = resolve_task(cfg);
    Model model = build_model(cfg, td);
    std::string dir = make_run_dir(cfg, "finetune");

    FinetuneConfig fcfg = cfg.finetune;
    ModelParams start;
    if (!resume.empty()) {
        uint64_t ck_seed = 0;
        int64_t ck_step = 0;
        start = load_params_for(model, resume, &ck_seed, &ck_step);
        fcfg.start_step = ck_step;
    } else {
        require_file(cfg.finetune_init, "finetune.init checkpoint");
        start = load_params_for(model, cfg.finetune_init);
    }

    const bool gaps = gaps_available(cfg, td);
    MetricsWriter metrics(dir + "/metrics.csv", gaps);
    std::ofstream curve;
    if (cfg.finetune_eval_every > 0) {
        curve.open(dir + "/success_curve.csv");
        curve << "step,success_rate,ci_low,ci_high\n";
    }

    TrainHooks hooks;
    hooks.on_log = [&](const TrainMetricsRow& row, const ModelParams& p) {
        if (gaps) {
            OracleGapReport gap =
                oracle_gap(model, p, td.train.as_explicit(), fcfg.k, fcfg.select_rule,
                           fcfg.nucleus_p, model.posterior_fn(p));
            metrics.row(row, &gap);
        } else {
            metrics.row(row, nullptr);
        }
        if (cfg.finetune_eval_every > 0 && td.sudoku_side > 0 &&
            row.step % cfg.finetune_eval_every == 0) {
            SuccessReport sr = success_rate(model, p, plan_for_length(cfg, td.seq_len),
                                            cfg.finetune_eval_samples,
                                            derive_seed(cfg.seed, kEvalStream, uint64_t(row.step)));
            curve << row.step << ',' << format_double(sr.rate) << ',' << format_double(sr.ci.low)
                  << ',' << format_double(sr.ci.high) << "\n";
            curve.flush();
        }
    };
    hooks.on_checkpoint = [&](int64_t step, const ModelParams& p) {
        save_both(dir, model, p, cfg.seed, step, "checkpoint_" + std::to_string(step));
    };

    ModelParams params = finetune(model, std::move(start), td.train, fcfg, cfg.seed, hooks);
    save_both(dir, model, params, cfg.seed, cfg.finetune.steps, "checkpoint_final");
    std::cout << "finetune: " << cfg.finetune.steps << " steps -> " << dir << "\n";
    return dir;
}

std::string cmd_sample(const RunConfig& cfg) {
    require_file(cfg.sample_checkpoint, "sample.checkpoint");
    Checkpoint ck = load_checkpoint(cfg.sample_checkpoint);
    Model model(ck.config);
    std::string dir = make_run_dir(cfg, "sample");
    InferencePlan plan = plan_for_length(cfg, ck.config.seq_len);
    plan.validate(ck.config.seq_len);

    if (cfg.sample_traces)
        fs::create_directories(dir + "/traces");
    std::vector<MaskedSeq> samples;
    int valid = 0, sudoku_shaped = sudoku_side_for(ck.config.vocab_size, ck.config.seq_len);
    for (int s = 0; s < cfg.sample_count; ++s) {
        uint64_t run_seed = derive_seed(cfg.seed, 0x5a17, uint64_t(s));
        InferenceResult res =
            run_loop(model, ck.params, plan, run_seed, std::nullopt, cfg.sample_traces);
        if (cfg.sample_traces)
            write_trace_jsonl(dir + "/traces/sample_" + std::to_string(s) + ".jsonl", res);
        if (sudoku_shaped) {
            try {
                valid += is_valid(detokenize(res.sequence)) ? 1 : 0;
            } catch (const std::invalid_argument&) {
            }
        }
        samples.push_back(std::move(res.sequence));
    }
    write_seq_file(dir + "/samples.txt", samples);
    std::cout << "sample: " << cfg.sample_count << " sequences (plan " << plan.fingerprint()
              << ")";
    if (sudoku_shaped)
        std::cout << ", " << valid << " valid boards";
    std::cout << " -> " << dir << "\n";
    return dir;
}

std::string cmd_eval(const RunConfig& cfg) {
    require_file(cfg.eval_checkpoint, "eval.checkpoint");
    Checkpoint ck = load_checkpoint(cfg.eval_checkpoint);
    Model model(ck.config);
    std::string dir = make_run_dir(cfg, "eval");
    InferencePlan plan = plan_for_length(cfg, ck.config.seq_len);

    EvalReport report;
    report.seed = cfg.seed;
    report.plan_fingerprint = plan.fingerprint();

    if (cfg.eval_metric == "success") {
        SuccessReport sr = success_rate(model, ck.params, plan, cfg.eval_samples,
                                        derive_seed(cfg.seed, kEvalStream));
        report.sample_count = sr.trials;
        report.metrics["success_rate"] = sr.rate;
        report.metrics["ci_low"] = sr.ci.low;
        report.metrics["ci_high"] = sr.ci.high;
        report.metrics["structural_failures"] = double(sr.structural_failures);
    } else if (cfg.eval_metric == "detection") {
        std::vector<Board> boards;
        if (!cfg.eval_boards.empty()) {
            require_file(cfg.eval_boards, "eval.boards");
            boards = read_board_corpus(cfg.eval_boards,
                                       sudoku_side_for(ck.config.vocab_size, ck.config.seq_len));
        } else if (cfg.task == "sudoku4" || cfg.task == "sudoku9") {
            boards = cfg.data_path.empty()
                         ? split_eval_boards(cfg, cfg.task == "sudoku4" ? 4 : 9)
                         : read_board_corpus(cfg.data_path + "/eval.txt",
                                             cfg.task == "sudoku4" ? 4 : 9);
        } else {
            throw ConfigError("eval detection: set eval.boards or a sudoku task");
        }
        DetectionReport dr = detection_metrics(model, ck.params, boards, cfg.eval_corruptions,
                                               cfg.eval_trials, derive_seed(cfg.seed, kEvalStream));
        report.sample_count = dr.trials;
        report.metrics["hit_at_c"] = dr.hit_at_c;
        report.metrics["auroc"] = dr.auroc;
        report.metrics["corruptions"] = double(dr.corruptions);

        Rng hm_rng(derive_seed(cfg.seed, 0x8ea7));
        auto [bad, cells] = corrupt(boards.front(), cfg.eval_corruptions, hm_rng);
        write_quality_heatmap(dir + "/quality_heatmap.csv", model, ck.params, bad, cells);
    } else { // nll
        if (cfg.task != "explicit-file")
            throw ConfigError("eval nll: requires an explicit-file task");
        TaskData td = resolve_task(cfg);
        if (td.vocab.size != ck.config.vocab_size || td.seq_len != ck.config.seq_len)
            throw ConfigError("eval nll: checkpoint shape does not match the data file");
        std::vector<MaskedSeq> samples;
        for (int s = 0; s < cfg.eval_samples; ++s) {
            uint64_t run_seed = derive_seed(cfg.seed, 0x5a17, uint64_t(s));
            samples.push_back(run_loop(model, ck.params, plan, run_seed, std::nullopt, false)
                                  .sequence);
        }
        NllReport nr = sequence_nll(td.train.as_explicit(), samples);
        report.sample_count = nr.samples;
        report.metrics["nll"] = nr.nll;
        report.metrics["off_support_fraction"] = nr.off_support_fraction;
        report.metrics["entropy"] = sample_entropy(samples);
    }

    report.validate();
    std::ofstream csv(dir + "/eval.csv");
    csv << report.csv_header() << "\n" << report.csv_row() << "\n";
    std::ofstream txt(dir + "/report.txt");
    txt << report.summary();
    std::cout << report.summary();
    std::cout << "eval -> " << dir << "\n";
    return dir;
}

int cmd_verify(const RunConfig& cfg) {
    std::vector<VerifyResult> results = run_verification_suite(cfg.seed);
    bool all_ok = true;
    for (const auto& r : results) {
        std::printf("[%s] %s — %s (%.1fs)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                    r.detail.c_str(), r.seconds);
        all_ok = all_ok && r.passed;
    }
    return all_ok ? 0 : 2;
}

} // namespace prism
