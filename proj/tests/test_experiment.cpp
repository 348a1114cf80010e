#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedsim/experiment.hpp"

using namespace fedsim;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_config(const std::string& out_dir, const std::string& mode) {
    nlohmann::json cfg = preset_config("desk");
    cfg["dataset"]["devices"] = 40;
    cfg["dataset"]["vocab_size"] = 12;
    cfg["dataset"]["months"] = 6;
    cfg["dataset"]["max_count"] = 30;
    cfg["model"]["dim"] = 4;
    cfg["train_window"] = {{"start_month", 0}, {"end_month", 4}};
    cfg["test_window"] = {{"start_month", 4}, {"end_month", 6}};
    cfg["mode"] = mode;
    cfg["delta_months"] = 2;
    cfg["cells"] = nlohmann::json::array({{{"algorithm", "fedavg"}, {"strategy", "uniform"}},
                                          {{"algorithm", "fedopt"}, {"strategy", "log"}}});
    cfg["rounds"]["cohort_size"] = 6;
    cfg["rounds"]["rounds"] = 3;
    cfg["replication_seeds"] = {1, 2};
    cfg["output_dir"] = out_dir;
    return cfg;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "fedsim_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

/// Every regular file under root, relative path -> content. Manifests are
/// normalized by dropping the wall-time line.
std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
    std::map<std::string, std::string> snapshot;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::string content = read_file(entry.path());
        if (entry.path().filename() == "manifest.json") {
            auto manifest = nlohmann::json::parse(content);
            manifest.erase("wall_time_seconds");
            content = manifest.dump(2);
        }
        snapshot[fs::relative(entry.path(), root).string()] = std::move(content);
    }
    return snapshot;
}

struct ThreadsGuard {
    explicit ThreadsGuard(const char* value) { setenv("FEDSIM_THREADS", value, 1); }
    ~ThreadsGuard() { unsetenv("FEDSIM_THREADS"); }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FEDSIM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("presets parse and carry the documented scales", "[experiment]") {
    const auto desk = parse_experiment_config(preset_config("desk"));
    CHECK(desk.dataset_spec->device_count == 1000);
    CHECK(desk.dataset_spec->vocab_size == 200);
    CHECK(desk.model_dim == 16);
    CHECK(desk.round.cohort_size == 50);
    CHECK(desk.round.rounds == 200);
    CHECK(desk.seeds == std::vector<uint64_t>{1, 2, 3});

    const auto paper = parse_experiment_config(preset_config("paper"));
    CHECK(paper.dataset_spec->device_count == 10000);
    CHECK(paper.round.cohort_size == 800);
    CHECK(paper.dataset_spec->activity.max_count / paper.dataset_spec->activity.min_count >= 10000);
    CHECK(paper.cells.size() == 14);  // 7 strategies x 2 algorithms

    CHECK_THROWS_AS(preset_config("unknown"), UsageError);
}

TEST_CASE("config validation rejects malformed experiments", "[experiment]") {
    auto bad = tiny_config("out", "one_shot");
    bad["mode"] = "sometimes";
    CHECK_THROWS_AS(parse_experiment_config(bad), UsageError);

    bad = tiny_config("out", "continual");
    bad["delta_months"] = 3;  // 4-month window not divisible
    CHECK_THROWS_AS(parse_experiment_config(bad), UsageError);

    bad = tiny_config("out", "one_shot");
    bad["cells"] = nlohmann::json::array();
    CHECK_THROWS_AS(parse_experiment_config(bad), UsageError);

    bad = tiny_config("out", "one_shot");
    bad["replication_seeds"] = {3, 3};
    CHECK_THROWS_AS(parse_experiment_config(bad), UsageError);

    bad = tiny_config("out", "one_shot");
    bad["train_window"]["end_month"] = 9;  // beyond the 6-month dataset
    CHECK_THROWS_AS(parse_experiment_config(bad), UsageError);

    bad = tiny_config("out", "one_shot");
    bad["rounds"]["local_lr"] = 0.0;
    CHECK_THROWS_AS(parse_experiment_config(bad), UsageError);

    bad = tiny_config("out", "one_shot");
    bad["cells"][0]["strategy"] = "bogus";
    CHECK_THROWS_AS(parse_experiment_config(bad), UsageError);
}

TEST_CASE("config merging layers file values over the preset", "[experiment]") {
    nlohmann::json over = {{"dataset", {{"devices", 77}}}, {"mode", "continual"}};
    const auto merged = merge_config(preset_config("desk"), over);
    CHECK(merged["dataset"]["devices"] == 77);
    CHECK(merged["dataset"]["vocab_size"] == 200);  // untouched
    CHECK(merged["mode"] == "continual");
}

TEST_CASE("gen writes per-seed datasets and honors --force", "[experiment]") {
    const auto dir = fresh_dir("gen");
    const auto cfg = parse_experiment_config(tiny_config(dir.string(), "one_shot"));
    std::ostringstream log;
    run_gen(cfg, false, log);

    const auto path1 = paths::dataset(cfg, 1);
    const auto path2 = paths::dataset(cfg, 2);
    REQUIRE(fs::exists(path1));
    REQUIRE(fs::exists(path2));
    CHECK(read_file(path1) != read_file(path2));

    const std::string first = read_file(path1);
    CHECK_THROWS_WITH(run_gen(cfg, false, log), Catch::Matchers::ContainsSubstring("--force"));
    run_gen(cfg, true, log);
    CHECK(read_file(path1) == first);  // regeneration is deterministic

    // A path-only dataset cannot be generated.
    auto path_only = tiny_config(dir.string(), "one_shot");
    path_only["dataset"] = {{"path", (dir / "data" / "dataset_seed{seed}.jsonl").string()}};
    CHECK_THROWS_AS(run_gen(parse_experiment_config(path_only), true, log), UsageError);
}

TEST_CASE("train writes checkpoints and manifests per cell and seed", "[experiment]") {
    const auto dir = fresh_dir("train");
    const auto cfg = parse_experiment_config(tiny_config(dir.string(), "one_shot"));
    std::ostringstream log;
    run_gen(cfg, false, log);
    REQUIRE(run_train(cfg, log) == 0);

    for (const auto& cell : cfg.cells) {
        for (const uint64_t seed : cfg.seeds) {
            const auto cell_dir = paths::train_cell_dir(cfg, "one_shot", cell, seed);
            REQUIRE(fs::exists(cell_dir / "checkpoint.bin"));
            const auto manifest = nlohmann::json::parse(read_file(cell_dir / "manifest.json"));
            CHECK(manifest.at("seed") == seed);
            CHECK(manifest.at("config_hash") == cfg.config_hash());
            CHECK(manifest.at("version") == std::string(kVersion));
            CHECK(manifest.at("segments").size() == 1);
            CHECK(manifest.at("segments")[0].at("diagnostics").size() == cfg.round.rounds);
        }
    }

    // rounds = 0 -> checkpoint equals the shared per-seed initialization.
    auto zero_rounds = tiny_config(dir.string(), "one_shot");
    zero_rounds["rounds"]["rounds"] = 0;
    zero_rounds["output_dir"] = (dir / "zero").string();
    zero_rounds["dataset"]["path"] = (paths::dataset(cfg, 1).parent_path() / "dataset_seed{seed}.jsonl").string();
    zero_rounds["replication_seeds"] = {1};
    const auto zero_cfg = parse_experiment_config(zero_rounds);
    REQUIRE(run_train(zero_cfg, log) == 0);
    const auto checkpoint =
        load_params(paths::train_cell_dir(zero_cfg, "one_shot", zero_cfg.cells[0], 1) / "checkpoint.bin");
    const Population pop = load_population(paths::dataset(zero_cfg, 1));
    CHECK(checkpoint == init_params(zero_cfg.model_kind, pop.vocab_size, zero_cfg.model_dim, init_seed(1)));
}

TEST_CASE("continual training emits one checkpoint per period", "[experiment]") {
    const auto dir = fresh_dir("continual");
    const auto cfg = parse_experiment_config(tiny_config(dir.string(), "continual"));
    std::ostringstream log;
    run_gen(cfg, false, log);
    REQUIRE(run_train(cfg, log) == 0);

    const auto cell_dir = paths::train_cell_dir(cfg, "continual", cfg.cells[0], 1);
    CHECK(fs::exists(cell_dir / "period1.bin"));
    CHECK(fs::exists(cell_dir / "period2.bin"));
    CHECK_FALSE(fs::exists(cell_dir / "period3.bin"));
    const auto manifest = nlohmann::json::parse(read_file(cell_dir / "manifest.json"));
    REQUIRE(manifest.at("segments").size() == 2);
    CHECK(manifest.at("segments")[1].at("initial_params_hash") ==
          manifest.at("segments")[0].at("final_params_hash"));
}

TEST_CASE("eval produces per-seed reports, a summary, and baseline RCP zero", "[experiment]") {
    const auto dir = fresh_dir("eval");
    const auto cfg = parse_experiment_config(tiny_config(dir.string(), "one_shot"));
    std::ostringstream log;
    run_gen(cfg, false, log);
    REQUIRE(run_train(cfg, log) == 0);
    run_eval(cfg, log);

    const auto eval_dir = paths::eval_cell_dir(cfg, "one_shot", cfg.cells[0]);
    REQUIRE(fs::exists(eval_dir / "decile_report_seed1.csv"));
    REQUIRE(fs::exists(eval_dir / "summary.csv"));

    // The baseline cell evaluated against itself has overall RCP 0 +- 0.
    const auto rows = detail::read_csv(eval_dir / "summary.csv");
    REQUIRE(rows.size() == 12);  // header + 10 deciles + overall
    CHECK(rows[0] == std::vector<std::string>{"period", "decile", "ppl_mean", "ppl_std", "rcp_mean",
                                              "rcp_std"});
    const auto& overall = rows.back();
    CHECK(overall[1] == "overall");
    CHECK(std::abs(std::stod(overall[4])) < 1e-9);
    CHECK(std::abs(std::stod(overall[5])) < 1e-9);

    // Non-baseline cells have a populated std column across 2 seeds.
    const auto other = detail::read_csv(paths::eval_cell_dir(cfg, "one_shot", cfg.cells[1]) / "summary.csv");
    CHECK(std::stod(other.back()[3]) >= 0.0);

    // Missing baseline checkpoint is an error.
    auto missing = tiny_config(dir.string(), "one_shot");
    missing["baseline"] = {{"algorithm", "fedavg"}, {"strategy", "heavy"}};
    CHECK_THROWS_WITH(run_eval(parse_experiment_config(missing), log),
                      Catch::Matchers::ContainsSubstring("baseline"));
}

TEST_CASE("continual eval writes innovation tables and period summaries", "[experiment]") {
    const auto dir = fresh_dir("eval_continual");
    const auto cfg = parse_experiment_config(tiny_config(dir.string(), "continual"));
    std::ostringstream log;
    run_gen(cfg, false, log);
    REQUIRE(run_train(cfg, log) == 0);

    // The continual baseline must exist: train the baseline cell one-shot too.
    auto one_shot_json = tiny_config(dir.string(), "one_shot");
    const auto one_shot_cfg = parse_experiment_config(one_shot_json);
    REQUIRE(run_train(one_shot_cfg, log) == 0);

    run_eval(cfg, log);
    REQUIRE(fs::exists(fs::path(cfg.out_dir) / "eval" / "innovation.csv"));
    REQUIRE(fs::exists(fs::path(cfg.out_dir) / "eval" / "innovation_seed1.csv"));

    const auto summary =
        detail::read_csv(paths::eval_cell_dir(cfg, "continual", cfg.cells[0]) / "summary.csv");
    CHECK(summary.size() == 1 + 2 * 11);  // two periods

    // Innovation rows sum to one.
    const auto innovation_rows = detail::read_csv(fs::path(cfg.out_dir) / "eval" / "innovation.csv");
    for (size_t r = 1; r < innovation_rows.size(); ++r) {
        const double total = std::stod(innovation_rows[r][1]) + std::stod(innovation_rows[r][2]) +
                             std::stod(innovation_rows[r][3]);
        CHECK(std::abs(total - 1.0) < 1e-9);
    }

    // A single segment cannot support the innovation metric.
    auto single = tiny_config((dir / "single").string(), "continual");
    single["delta_months"] = 4;
    single["dataset"]["path"] = (fs::path(cfg.out_dir) / "data" / "dataset_seed{seed}.jsonl").string();
    single["baseline"] = {{"algorithm", "fedavg"}, {"strategy", "uniform"}, {"mode", "continual"}};
    const auto single_cfg = parse_experiment_config(single);
    REQUIRE(run_train(single_cfg, log) == 0);
    CHECK_THROWS_WITH(run_eval(single_cfg, log), Catch::Matchers::ContainsSubstring("2 segments"));
}

TEST_CASE("report aggregates summaries into plot tables", "[experiment]") {
    const auto dir = fresh_dir("report");
    const auto cfg = parse_experiment_config(tiny_config(dir.string(), "one_shot"));
    std::ostringstream log;

    CHECK_THROWS_WITH(run_report(cfg, log), Catch::Matchers::ContainsSubstring("eval"));

    run_gen(cfg, false, log);
    REQUIRE(run_train(cfg, log) == 0);
    run_eval(cfg, log);
    const auto continual_cfg = parse_experiment_config(tiny_config(dir.string(), "continual"));
    REQUIRE(run_train(continual_cfg, log) == 0);
    run_eval(continual_cfg, log);
    run_report(cfg, log);

    const auto report_dir = fs::path(cfg.out_dir) / "report";
    const auto vs_decile = detail::read_csv(report_dir / "rcp_vs_decile.csv");
    CHECK(vs_decile[0] ==
          std::vector<std::string>{"algorithm", "strategy", "mode", "decile", "rcp_mean", "rcp_std"});
    // 2 cells x 2 modes x 10 deciles
    CHECK(vs_decile.size() == 1 + 40);

    const auto vs_period = detail::read_csv(report_dir / "rcp_vs_period.csv");
    CHECK(vs_period.size() == 1 + 2 * 2);  // 2 continual cells x 2 periods
    const auto overall = detail::read_csv(report_dir / "rcp_overall.csv");
    CHECK(overall.size() == 1 + 4);  // 2 cells x 2 modes
    CHECK(fs::exists(report_dir / "innovation.csv"));
}

TEST_CASE("the full pipeline is byte-deterministic across thread counts", "[experiment][slow]") {
    std::ostringstream log;
    std::map<std::string, std::string> first, second;
    {
        ThreadsGuard threads("1");
        const auto dir = fresh_dir("determinism_a");
        auto json = tiny_config(dir.string(), "continual");
        const auto cfg = parse_experiment_config(json);
        run_gen(cfg, false, log);
        REQUIRE(run_train(cfg, log) == 0);
        const auto one_shot = parse_experiment_config(tiny_config(dir.string(), "one_shot"));
        REQUIRE(run_train(one_shot, log) == 0);
        run_eval(cfg, log);
        run_report(cfg, log);
        first = snapshot_tree(dir);
    }
    {
        ThreadsGuard threads("3");
        const auto dir = fresh_dir("determinism_b");
        auto json = tiny_config(dir.string(), "continual");
        const auto cfg = parse_experiment_config(json);
        run_gen(cfg, false, log);
        REQUIRE(run_train(cfg, log) == 0);
        const auto one_shot = parse_experiment_config(tiny_config(dir.string(), "one_shot"));
        REQUIRE(run_train(one_shot, log) == 0);
        run_eval(cfg, log);
        run_report(cfg, log);
        second = snapshot_tree(dir);
    }
    REQUIRE(first.size() == second.size());
    for (const auto& [path, content] : first) {
        INFO(path);
        REQUIRE(second.count(path) == 1);
        CHECK(content == second.at(path));
    }
}

TEST_CASE("the CLI wires subcommands and exit codes", "[experiment][cli]") {
    const auto dir = fresh_dir("cli");
    const auto config_path = dir / "config.json";
    {
        std::ofstream out(config_path);
        out << tiny_config((dir / "out").string(), "one_shot").dump(2);
    }

    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("--version") == 0);
    CHECK(run_cli("definitely-not-a-subcommand") == 1);
    CHECK(run_cli("gen --preset nope") == 1);
    CHECK(run_cli("train --config /nonexistent.json") == 1);

    // train before gen -> runtime failure (2)
    CHECK(run_cli("train --config " + config_path.string()) == 2);

    CHECK(run_cli("gen --config " + config_path.string()) == 0);
    // gen again without --force -> runtime failure
    CHECK(run_cli("gen --config " + config_path.string()) == 2);
    CHECK(run_cli("gen --config " + config_path.string() + " --force") == 0);
    CHECK(run_cli("train --config " + config_path.string()) == 0);
    CHECK(run_cli("eval --config " + config_path.string()) == 0);
    CHECK(run_cli("report --config " + config_path.string()) == 0);

    REQUIRE(fs::exists(dir / "out" / "report" / "rcp_vs_decile.csv"));

    // --seed narrows the replication list; --out redirects the tree.
    CHECK(run_cli("gen --config " + config_path.string() + " --out " + (dir / "alt").string() +
                  " --seed 5") == 0);
    CHECK(fs::exists(dir / "alt" / "data" / "dataset_seed5.jsonl"));
}
