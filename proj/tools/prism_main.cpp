#include "prism/runner.hpp"
#include "prism/util.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"masked-diffusion engine with self-correction fine-tuning"};
    app.require_subcommand(1);

    std::string config_path, out_override, resume_path;
    int64_t seed_override = -1;
    app.add_option("--config", config_path, "configuration file (key = value lines)");
    app.add_option("--seed", seed_override, "override the configured seed");
    app.add_option("--out", out_override, "override the output directory");

    auto* gen = app.add_subcommand("gen", "generate a board corpus");
    auto* pre = app.add_subcommand("pretrain", "train the unmasking posterior");
    auto* fin = app.add_subcommand("finetune", "attach and train the quality head");
    auto* smp = app.add_subcommand("sample", "draw sequences from a checkpoint");
    auto* evl = app.add_subcommand("eval", "compute metrics for a checkpoint");
    auto* ver = app.add_subcommand("verify", "run the verification suites");
    pre->add_option("--resume", resume_path, "continue from a checkpoint");
    fin->add_option("--resume", resume_path, "continue from a checkpoint");

    CLI11_PARSE(app, argc, argv);

    try {
        prism::RunConfig cfg = prism::load_run_config(config_path);
        if (seed_override >= 0)
            cfg.seed = uint64_t(seed_override);
        if (!out_override.empty())
            cfg.out_dir = out_override;

        if (gen->parsed())
            prism::cmd_gen(cfg);
        else if (pre->parsed())
            prism::cmd_pretrain(cfg, resume_path);
        else if (fin->parsed())
            prism::cmd_finetune(cfg, resume_path);
        else if (smp->parsed())
            prism::cmd_sample(cfg);
        else if (evl->parsed())
            prism::cmd_eval(cfg);
        else if (ver->parsed())
            return prism::cmd_verify(cfg);
        return 0;
    } catch (const prism::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const prism::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const prism::EnumerationCapError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
