// marval <stage> --config <path> [--seed N] [--resume]
//
// Exit codes: 0 ok, 2 configuration error, 3 missing prerequisite stage,
// 4 numeric abort, 1 anything else (including a failed verification).

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <optional>

#include "marval/config.hpp"
#include "marval/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale masked autoregressive distillation pipeline"};
    std::string stage;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool resume = false;
    bool allow_mismatch = false;
    bool quiet = false;
    app.add_option("stage", stage, "train-teacher | distill | verify-identities | rl | eval | sample")->required();
    app.add_option("--config,-c", config_path, "YAML run configuration")->required();
    app.add_option("--seed", seed, "override the config seed");
    app.add_flag("--resume", resume, "continue from this stage's last checkpoint");
    app.add_flag("--allow-config-mismatch", allow_mismatch, "load checkpoints written under a different config");
    app.add_flag("--quiet,-q", quiet, "no progress lines");
    CLI11_PARSE(app, argc, argv);

    try {
        marval::RunConfig cfg = marval::load_config(config_path);
        cfg.stage = marval::parse_stage(stage);
        if (seed) cfg.seed = *seed;

        marval::RunOptions opts;
        opts.resume = resume;
        opts.allow_config_mismatch = allow_mismatch;
        opts.log = quiet ? nullptr : &std::cerr;
        if (const char* at = std::getenv("MARVAL_INTERRUPT_AT_STEP"); at != nullptr && *at != '\0') {
            opts.interrupt_at_step = std::atol(at);
        }
        return marval::run_stage(cfg, opts) ? 0 : 1;
    } catch (const marval::Interrupted& e) {
        std::cerr << "marval: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        const int code = marval::exit_code_for(e);
        std::cerr << "marval: " << e.what() << "\n";
        if (const auto* dep = dynamic_cast<const marval::DependencyError*>(&e)) {
            std::cerr << "marval: missing prerequisite stage: " << dep->needed_stage() << "\n";
        }
        return code;
    }
}
