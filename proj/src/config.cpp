#include "prism/config.hpp"

#include "prism/util.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace prism {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos)
        return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// raw key -> value text, validated against the schema on extraction
class KeyValues {
  public:
    explicit KeyValues(const std::string& path) {
        if (path.empty())
            return;
        std::ifstream in(path);
        if (!in)
            throw ConfigError("config file not found: " + path);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::string s = trim(line);
            if (s.empty() || s[0] == '#')
                continue;
            size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": expected 'key = value', got '" + s + "'");
            std::string key = trim(s.substr(0, eq));
            std::string value = trim(s.substr(eq + 1));
            if (key.empty())
                throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
            if (!values_.emplace(key, value).second)
                throw ConfigError("config: duplicate key '" + key + "'");
        }
    }

    std::string take_string(const std::string& key, const std::string& fallback) {
        seen_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    int64_t take_int(const std::string& key, int64_t fallback) {
        std::string raw = take_string(key, "");
        if (raw.empty())
            return fallback;
        try {
            size_t used = 0;
            int64_t v = std::stoll(raw, &used);
            if (used != raw.size())
                throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected integer, got '" + raw + "'");
        }
    }

    double take_double(const std::string& key, double fallback) {
        std::string raw = take_string(key, "");
        if (raw.empty())
            return fallback;
        try {
            size_t used = 0;
            double v = std::stod(raw, &used);
            if (used != raw.size())
                throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected number, got '" + raw + "'");
        }
    }

    bool take_bool(const std::string& key, bool fallback) {
        std::string raw = take_string(key, "");
        if (raw.empty())
            return fallback;
        if (raw == "true" || raw == "1")
            return true;
        if (raw == "false" || raw == "0")
            return false;
        throw ConfigError("config key '" + key + "': expected true|false, got '" + raw + "'");
    }

    void reject_unknown() const {
        for (const auto& [key, value] : values_)
            if (!seen_.count(key))
                throw ConfigError("config: unknown key '" + key + "'");
    }

  private:
    std::map<std::string, std::string> values_;
    std::set<std::string> seen_;
};

} // namespace

RunConfig default_run_config() { return load_run_config(""); }

RunConfig load_run_config(const std::string& path) {
    KeyValues kv(path);
    RunConfig cfg;

    cfg.task = kv.take_string("task", "sudoku4");
    if (cfg.task != "sudoku4" && cfg.task != "sudoku9" && cfg.task != "explicit-file" &&
        cfg.task != "dataset-file")
        throw ConfigError("config key 'task': unknown task '" + cfg.task + "'");
    cfg.data_path = kv.take_string("data.path", "");
    cfg.data_vocab_size = int(kv.take_int("data.vocab_size", 0));
    cfg.seed = uint64_t(kv.take_int("seed", 1));
    cfg.out_dir = kv.take_string("out", "runs");
    cfg.threads = int(kv.take_int("threads", 2));

    cfg.arch.backend = parse_backend(kv.take_string("arch.backend", "neural"));
    cfg.arch.embed_dim = int(kv.take_int("arch.embed_dim", 64));
    cfg.arch.layers = int(kv.take_int("arch.layers", 4));
    cfg.arch.heads = int(kv.take_int("arch.heads", 4));
    cfg.arch.hidden_dim = int(kv.take_int("arch.hidden_dim", 256));
    cfg.arch.tabular_state_cap = kv.take_int("arch.tabular_state_cap", int64_t(1) << 24);

    cfg.pretrain.steps = kv.take_int("pretrain.steps", 4000);
    cfg.pretrain.batch = int(kv.take_int("pretrain.batch", 64));
    cfg.pretrain.optimizer.kind = parse_optimizer(kv.take_string("pretrain.optimizer", "adamw"));
    cfg.pretrain.optimizer.lr = kv.take_double("pretrain.lr", 3e-4);
    cfg.pretrain.optimizer.weight_decay = kv.take_double("pretrain.weight_decay", 0.0);
    cfg.pretrain.optimizer.schedule =
        parse_lr_schedule(kv.take_string("pretrain.lr_schedule", "cosine"));
    cfg.pretrain.optimizer.warmup_steps = kv.take_int("pretrain.warmup", 100);
    cfg.pretrain.log_every = int(kv.take_int("pretrain.log_every", 50));
    cfg.pretrain.checkpoint_every = int(kv.take_int("pretrain.checkpoint_every", 1000));

    cfg.finetune_init = kv.take_string("finetune.init", "");
    cfg.finetune.steps = kv.take_int("finetune.steps", 1200);
    cfg.finetune.batch = int(kv.take_int("finetune.batch", 64));
    cfg.finetune.optimizer.kind = parse_optimizer(kv.take_string("finetune.optimizer", "adamw"));
    cfg.finetune.optimizer.lr = kv.take_double("finetune.lr", 3e-4);
    cfg.finetune.optimizer.weight_decay = kv.take_double("finetune.weight_decay", 0.0);
    cfg.finetune.optimizer.schedule =
        parse_lr_schedule(kv.take_string("finetune.lr_schedule", "cosine"));
    cfg.finetune.optimizer.warmup_steps = kv.take_int("finetune.warmup", 50);
    cfg.finetune.k = int(kv.take_int("finetune.k", 4));
    cfg.finetune.n_y = int(kv.take_int("finetune.n_y", 1));
    cfg.finetune.nucleus_p = kv.take_double("finetune.nucleus_p", 1.0);
    cfg.finetune.lambda = kv.take_double("finetune.lambda", 5.0);
    cfg.finetune.select_rule =
        parse_select_rule(kv.take_string("finetune.select_rule", "uniform"));
    cfg.finetune.freeze_backbone = kv.take_bool("finetune.freeze_backbone", false);
    cfg.finetune.log_every = int(kv.take_int("finetune.log_every", 50));
    cfg.finetune.checkpoint_every = int(kv.take_int("finetune.checkpoint_every", 1000));
    cfg.finetune_eval_every = int(kv.take_int("finetune.eval_every", 0));
    cfg.finetune_eval_samples = int(kv.take_int("finetune.eval_samples", 64));

    cfg.plan_steps_raw = int(kv.take_int("plan.steps", 0));
    cfg.plan.unmask_rule = parse_unmask_rule(kv.take_string("plan.unmask_rule", "random"));
    cfg.plan.n_blocks = int(kv.take_int("plan.n_blocks", 1));
    cfg.plan.remask = parse_remask_policy(kv.take_string("plan.remask", "none"));
    cfg.plan.schedule =
        parse_remask_schedule(kv.take_string("plan.remask_schedule", "fixed"));
    cfg.plan.eta = kv.take_double("plan.eta", 0.0);
    cfg.plan.remask_k = int(kv.take_int("plan.remask_k", 4));
    cfg.plan.l_on = int(kv.take_int("plan.l_on", 0));
    cfg.plan.loop_steps = int(kv.take_int("plan.loop_steps", 0));
    cfg.plan.loop_m = int(kv.take_int("plan.loop_m", 0));
    cfg.plan.nucleus_p = kv.take_double("plan.nucleus_p", 1.0);

    cfg.sample_count = int(kv.take_int("sample.count", 16));
    cfg.sample_checkpoint = kv.take_string("sample.checkpoint", "");
    cfg.sample_traces = kv.take_bool("sample.traces", true);

    cfg.gen_train_count = int(kv.take_int("gen.train_count", 250));
    cfg.gen_eval_count = int(kv.take_int("gen.eval_count", 38));

    cfg.eval_metric = kv.take_string("eval.metric", "success");
    if (cfg.eval_metric != "success" && cfg.eval_metric != "detection" &&
        cfg.eval_metric != "nll")
        throw ConfigError("config key 'eval.metric': expected success|detection|nll, got '" +
                          cfg.eval_metric + "'");
    cfg.eval_checkpoint = kv.take_string("eval.checkpoint", "");
    cfg.eval_samples = int(kv.take_int("eval.samples", 200));
    cfg.eval_trials = int(kv.take_int("eval.trials", 500));
    cfg.eval_corruptions = int(kv.take_int("eval.corruptions", 3));
    cfg.eval_boards = kv.take_string("eval.boards", "");

    kv.reject_unknown();

    // threads participate in gradient-reduction order; pin them to the config
    if (cfg.threads < 1)
        throw ConfigError("config key 'threads': must be positive");
    cfg.pretrain.threads = cfg.threads;
    cfg.finetune.threads = cfg.threads;
    return cfg;
}

std::string serialize_config(const RunConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["task"] = cfg.task;
    kv["data.path"] = cfg.data_path;
    kv["data.vocab_size"] = std::to_string(cfg.data_vocab_size);
    kv["seed"] = std::to_string(cfg.seed);
    kv["out"] = cfg.out_dir;
    kv["threads"] = std::to_string(cfg.threads);
    kv["arch.backend"] = backend_name(cfg.arch.backend);
    kv["arch.embed_dim"] = std::to_string(cfg.arch.embed_dim);
    kv["arch.layers"] = std::to_string(cfg.arch.layers);
    kv["arch.heads"] = std::to_string(cfg.arch.heads);
    kv["arch.hidden_dim"] = std::to_string(cfg.arch.hidden_dim);
    kv["arch.tabular_state_cap"] = std::to_string(cfg.arch.tabular_state_cap);
    kv["pretrain.steps"] = std::to_string(cfg.pretrain.steps);
    kv["pretrain.batch"] = std::to_string(cfg.pretrain.batch);
    kv["pretrain.optimizer"] = optimizer_name(cfg.pretrain.optimizer.kind);
    kv["pretrain.lr"] = format_double(cfg.pretrain.optimizer.lr);
    kv["pretrain.weight_decay"] = format_double(cfg.pretrain.optimizer.weight_decay);
    kv["pretrain.lr_schedule"] =
        cfg.pretrain.optimizer.schedule == LrSchedule::cosine ? "cosine" : "constant";
    kv["pretrain.warmup"] = std::to_string(cfg.pretrain.optimizer.warmup_steps);
    kv["pretrain.log_every"] = std::to_string(cfg.pretrain.log_every);
    kv["pretrain.checkpoint_every"] = std::to_string(cfg.pretrain.checkpoint_every);
    kv["finetune.init"] = cfg.finetune_init;
    kv["finetune.steps"] = std::to_string(cfg.finetune.steps);
    kv["finetune.batch"] = std::to_string(cfg.finetune.batch);
    kv["finetune.optimizer"] = optimizer_name(cfg.finetune.optimizer.kind);
    kv["finetune.lr"] = format_double(cfg.finetune.optimizer.lr);
    kv["finetune.weight_decay"] = format_double(cfg.finetune.optimizer.weight_decay);
    kv["finetune.lr_schedule"] =
        cfg.finetune.optimizer.schedule == LrSchedule::cosine ? "cosine" : "constant";
    kv["finetune.warmup"] = std::to_string(cfg.finetune.optimizer.warmup_steps);
    kv["finetune.k"] = std::to_string(cfg.finetune.k);
    kv["finetune.n_y"] = std::to_string(cfg.finetune.n_y);
    kv["finetune.nucleus_p"] = format_double(cfg.finetune.nucleus_p);
    kv["finetune.lambda"] = format_double(cfg.finetune.lambda);
    kv["finetune.select_rule"] =
        cfg.finetune.select_rule == SelectRule::uniform ? "uniform" : "confidence";
    kv["finetune.freeze_backbone"] = cfg.finetune.freeze_backbone ? "true" : "false";
    kv["finetune.log_every"] = std::to_string(cfg.finetune.log_every);
    kv["finetune.checkpoint_every"] = std::to_string(cfg.finetune.checkpoint_every);
    kv["finetune.eval_every"] = std::to_string(cfg.finetune_eval_every);
    kv["finetune.eval_samples"] = std::to_string(cfg.finetune_eval_samples);
    kv["plan.steps"] = std::to_string(cfg.plan_steps_raw);
    kv["plan.unmask_rule"] = unmask_rule_name(cfg.plan.unmask_rule);
    kv["plan.n_blocks"] = std::to_string(cfg.plan.n_blocks);
    kv["plan.remask"] = remask_policy_name(cfg.plan.remask);
    kv["plan.remask_schedule"] = remask_schedule_name(cfg.plan.schedule);
    kv["plan.eta"] = format_double(cfg.plan.eta);
    kv["plan.remask_k"] = std::to_string(cfg.plan.remask_k);
    kv["plan.l_on"] = std::to_string(cfg.plan.l_on);
    kv["plan.loop_steps"] = std::to_string(cfg.plan.loop_steps);
    kv["plan.loop_m"] = std::to_string(cfg.plan.loop_m);
    kv["plan.nucleus_p"] = format_double(cfg.plan.nucleus_p);
    kv["sample.count"] = std::to_string(cfg.sample_count);
    kv["sample.checkpoint"] = cfg.sample_checkpoint;
    kv["sample.traces"] = cfg.sample_traces ? "true" : "false";
    kv["gen.train_count"] = std::to_string(cfg.gen_train_count);
    kv["gen.eval_count"] = std::to_string(cfg.gen_eval_count);
    kv["eval.metric"] = cfg.eval_metric;
    kv["eval.checkpoint"] = cfg.eval_checkpoint;
    kv["eval.samples"] = std::to_string(cfg.eval_samples);
    kv["eval.trials"] = std::to_string(cfg.eval_trials);
    kv["eval.corruptions"] = std::to_string(cfg.eval_corruptions);
    kv["eval.boards"] = cfg.eval_boards;

    std::string out;
    for (const auto& [key, value] : kv)
        out += key + " = " + value + "\n";
    return out;
}

std::string config_fingerprint(const RunConfig& cfg) {
    std::string text = serialize_config(cfg);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

InferencePlan plan_for_length(const RunConfig& cfg, int seq_len) {
    InferencePlan plan = cfg.plan;
    plan.steps = cfg.plan_steps_raw > 0 ? cfg.plan_steps_raw : seq_len;
    return plan;
}

} // namespace prism
