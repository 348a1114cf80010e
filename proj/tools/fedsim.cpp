// fedsim: federated-learning simulator with activity-based device selection.
//
// Subcommands: gen (synthesize datasets), train (run FL cells), eval
// (decile perplexity / RCP / innovation reports), report (plot tables).
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedsim/experiment.hpp"
#include "fedsim/version.hpp"

namespace {

struct CommonArgs {
    std::string preset = "desk";
    std::optional<std::string> config_path;
    std::optional<std::string> out_dir;
    std::optional<uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--preset", args.preset, "Base preset: desk or paper")->default_val("desk");
    cmd->add_option("--config", args.config_path, "JSON config file merged over the preset")
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", args.out_dir, "Output directory (overrides config output_dir)");
    cmd->add_option("--seed", args.seed, "Run a single replication seed instead of the configured list");
}

fedsim::ExperimentConfig make_config(const CommonArgs& args) {
    fedsim::ConfigOverrides overrides;
    overrides.out_dir = args.out_dir;
    overrides.seed = args.seed;
    return fedsim::build_config(args.preset, args.config_path, overrides);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedsim: federated-learning simulator with activity-based device selection"};
    app.set_version_flag("--version", fedsim::kVersion);
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, report_args;
    bool force = false;

    CLI::App* gen = app.add_subcommand("gen", "Generate synthetic dataset files (one per seed)");
    add_common(gen, gen_args);
    gen->add_flag("--force", force, "Overwrite existing dataset files");

    CLI::App* train = app.add_subcommand("train", "Train every (algorithm, strategy, seed) cell");
    add_common(train, train_args);

    CLI::App* eval = app.add_subcommand("eval", "Evaluate checkpoints: decile perplexity, RCP, innovation");
    add_common(eval, eval_args);

    CLI::App* report = app.add_subcommand("report", "Aggregate eval CSVs into plot-ready tables");
    add_common(report, report_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            fedsim::run_gen(make_config(gen_args), force, std::cout);
        } else if (train->parsed()) {
            const size_t failures = fedsim::run_train(make_config(train_args), std::cout);
            if (failures > 0) {
                std::cerr << failures << " cell(s) failed\n";
                return 2;
            }
        } else if (eval->parsed()) {
            fedsim::run_eval(make_config(eval_args), std::cout);
        } else if (report->parsed()) {
            fedsim::run_report(make_config(report_args), std::cout);
        }
    } catch (const fedsim::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
