#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsim/common.hpp"
#include "fedsim/engine.hpp"
#include "fedsim/eval.hpp"
#include "fedsim/models.hpp"
#include "fedsim/population.hpp"
#include "fedsim/strategies.hpp"
#include "fedsim/version.hpp"

namespace fedsim {

/// Configuration or command-line misuse; the CLI maps this to exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CellSpec {
    Algorithm algorithm = Algorithm::fedavg;
    SelectionStrategy strategy;
};

inline std::string cell_name(const CellSpec& cell) {
    std::string name = algorithm_name(cell.algorithm) + "_" + strategy_name(cell.strategy);
    if (cell.strategy.is_quantile_filter() && cell.strategy.quantile != 0.20) {
        name += "_q" + std::to_string(static_cast<int>(std::lround(cell.strategy.quantile * 100)));
    }
    return name;
}

struct ExperimentConfig {
    std::optional<DatasetSpec> dataset_spec;
    std::optional<std::string> dataset_path;  // may contain "{seed}"
    int train_start_month = 5;
    int train_end_month = 11;
    int test_start_month = 11;
    int test_end_month = 12;
    std::string mode = "one_shot";  // "one_shot" | "continual"
    int delta_months = 2;
    std::vector<CellSpec> cells;
    std::optional<CellSpec> baseline;
    std::string baseline_mode = "one_shot";
    ModelKind model_kind = ModelKind::bigram;
    uint32_t model_dim = 16;
    RoundConfig round;
    std::vector<uint64_t> seeds;
    std::string out_dir = "out";
    bool rank_full_window = false;
    bool aggregate_full_window = false;

    nlohmann::json merged;  // post-merge JSON, hashed into manifests

    TimeWindow train_window() const { return months_window(train_start_month, train_end_month); }
    TimeWindow test_window() const { return months_window(test_start_month, test_end_month); }
    /// Hash of the experiment identity: everything except where the outputs
    /// are stored.
    std::string config_hash() const {
        nlohmann::json identity = merged;
        identity.erase("output_dir");
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a64(identity.dump())));
        return buf;
    }
};

// ---------------------------------------------------------------------------
// Presets and config parsing. Precedence: preset < config file < CLI flags.
// ---------------------------------------------------------------------------

inline nlohmann::json preset_config(const std::string& name) {
    nlohmann::json desk = {
        {"dataset",
         {{"devices", 1000},
          {"vocab_size", 200},
          {"months", 12},
          {"zipf_exponent", 1.3},
          {"min_count", 1},
          {"max_count", 2000},
          {"mixing_alpha", 0.5},
          {"novelty_rate", 0.3}}},
        {"model", {{"kind", "bigram"}, {"dim", 16}}},
        {"train_window", {{"start_month", 5}, {"end_month", 11}}},
        {"test_window", {{"start_month", 11}, {"end_month", 12}}},
        {"mode", "one_shot"},
        {"delta_months", 2},
        {"cells", nlohmann::json::array({{{"algorithm", "fedavg"}, {"strategy", "uniform"}}})},
        {"baseline", {{"algorithm", "fedavg"}, {"strategy", "uniform"}, {"mode", "one_shot"}}},
        {"rounds",
         {{"cohort_size", 50},
          {"local_epochs", 1},
          {"local_lr", 0.1},
          {"local_batch_size", 32},
          {"server_lr", 0.1},
          {"beta1", 0.9},
          {"beta2", 0.99},
          {"tau", 1e-3},
          {"rounds", 200}}},
        {"replication_seeds", {1, 2, 3}},
        {"output_dir", "out"},
        {"rank_full_window", false},
        {"aggregate_full_window", false},
    };
    if (name == "desk") return desk;
    if (name == "paper") {
        nlohmann::json paper = desk;
        paper["dataset"]["devices"] = 10000;
        paper["dataset"]["max_count"] = 20000;
        paper["rounds"]["cohort_size"] = 800;
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& algorithm : {"fedavg", "fedopt"})
            for (const auto& strategy : all_strategy_names())
                cells.push_back({{"algorithm", algorithm}, {"strategy", strategy}});
        paper["cells"] = cells;
        return paper;
    }
    throw UsageError("unknown preset \"" + name + "\" (expected: desk, paper)");
}

/// Objects merge key-wise; anything else in `over` replaces the base value.
inline nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& over) {
    if (!base.is_object() || !over.is_object()) return over;
    for (const auto& [key, value] : over.items()) {
        if (base.contains(key))
            base[key] = merge_config(base[key], value);
        else
            base[key] = value;
    }
    return base;
}

namespace detail {

template <typename T>
T config_get(const nlohmann::json& j, const std::string& key) {
    if (!j.contains(key)) throw UsageError("config: missing key \"" + key + "\"");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw UsageError("config: bad value for key \"" + key + "\"");
    }
}

inline CellSpec parse_cell(const nlohmann::json& j) {
    CellSpec cell;
    try {
        cell.algorithm = parse_algorithm(config_get<std::string>(j, "algorithm"));
        cell.strategy = parse_strategy(config_get<std::string>(j, "strategy"),
                                       j.value("quantile", 0.20));
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    return cell;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config_impl(const nlohmann::json& merged);

inline ExperimentConfig parse_experiment_config(const nlohmann::json& merged) {
    try {
        return parse_experiment_config_impl(merged);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
}

inline ExperimentConfig parse_experiment_config_impl(const nlohmann::json& merged) {
    using detail::config_get;
    ExperimentConfig cfg;
    cfg.merged = merged;

    const auto& dataset = merged.at("dataset");
    if (dataset.contains("path")) {
        cfg.dataset_path = dataset.at("path").get<std::string>();
    }
    if (dataset.contains("devices")) {
        DatasetSpec spec;
        spec.device_count = config_get<size_t>(dataset, "devices");
        spec.vocab_size = config_get<uint32_t>(dataset, "vocab_size");
        spec.months = config_get<int>(dataset, "months");
        spec.activity.zipf_exponent = config_get<double>(dataset, "zipf_exponent");
        spec.activity.min_count = config_get<size_t>(dataset, "min_count");
        spec.activity.max_count = config_get<size_t>(dataset, "max_count");
        spec.mixing_alpha = config_get<double>(dataset, "mixing_alpha");
        spec.novelty_rate = config_get<double>(dataset, "novelty_rate");
        try {
            validate_spec(spec);
        } catch (const std::invalid_argument& e) {
            throw UsageError(std::string("config: ") + e.what());
        }
        cfg.dataset_spec = spec;
    }
    if (!cfg.dataset_spec && !cfg.dataset_path)
        throw UsageError("config: dataset needs either a generator spec or a \"path\"");

    cfg.train_start_month = config_get<int>(merged.at("train_window"), "start_month");
    cfg.train_end_month = config_get<int>(merged.at("train_window"), "end_month");
    cfg.test_start_month = config_get<int>(merged.at("test_window"), "start_month");
    cfg.test_end_month = config_get<int>(merged.at("test_window"), "end_month");
    if (cfg.train_start_month >= cfg.train_end_month) throw UsageError("config: empty train window");
    if (cfg.test_start_month >= cfg.test_end_month) throw UsageError("config: empty test window");
    if (cfg.dataset_spec) {
        const int months = cfg.dataset_spec->months;
        if (cfg.train_start_month < 0 || cfg.train_end_month > months ||
            cfg.test_start_month < 0 || cfg.test_end_month > months)
            throw UsageError("config: train/test windows must lie within the dataset months");
    }

    cfg.mode = config_get<std::string>(merged, "mode");
    if (cfg.mode != "one_shot" && cfg.mode != "continual")
        throw UsageError("config: mode must be \"one_shot\" or \"continual\"");
    cfg.delta_months = merged.value("delta_months", 2);
    if (cfg.mode == "continual") {
        const int length = cfg.train_end_month - cfg.train_start_month;
        if (cfg.delta_months < 1 || length % cfg.delta_months != 0)
            throw UsageError("config: train window of " + std::to_string(length) +
                             " months is not divisible by delta_months");
    }

    if (!merged.contains("cells") || merged.at("cells").empty())
        throw UsageError("config: at least one (algorithm, strategy) cell is required");
    for (const auto& cell : merged.at("cells")) cfg.cells.push_back(detail::parse_cell(cell));

    if (merged.contains("baseline")) {
        cfg.baseline = detail::parse_cell(merged.at("baseline"));
        cfg.baseline_mode = merged.at("baseline").value("mode", "one_shot");
        if (cfg.baseline_mode != "one_shot" && cfg.baseline_mode != "continual")
            throw UsageError("config: baseline mode must be \"one_shot\" or \"continual\"");
    }

    try {
        cfg.model_kind = parse_model_kind(config_get<std::string>(merged.at("model"), "kind"));
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    cfg.model_dim = config_get<uint32_t>(merged.at("model"), "dim");
    if (cfg.model_dim < 1) throw UsageError("config: model dim must be >= 1");

    const auto& rounds = merged.at("rounds");
    cfg.round.cohort_size = config_get<size_t>(rounds, "cohort_size");
    cfg.round.local_epochs = config_get<size_t>(rounds, "local_epochs");
    cfg.round.local_lr = config_get<double>(rounds, "local_lr");
    cfg.round.local_batch_size = config_get<size_t>(rounds, "local_batch_size");
    cfg.round.server_lr = config_get<double>(rounds, "server_lr");
    cfg.round.beta1 = config_get<double>(rounds, "beta1");
    cfg.round.beta2 = config_get<double>(rounds, "beta2");
    cfg.round.tau = config_get<double>(rounds, "tau");
    cfg.round.rounds = config_get<size_t>(rounds, "rounds");
    if (cfg.round.cohort_size < 1) throw UsageError("config: cohort_size must be >= 1");
    if (cfg.round.local_epochs < 1) throw UsageError("config: local_epochs must be >= 1");
    if (!(cfg.round.local_lr > 0.0)) throw UsageError("config: local_lr must be positive");
    if (cfg.round.local_batch_size < 1) throw UsageError("config: local_batch_size must be >= 1");
    if (!(cfg.round.server_lr > 0.0)) throw UsageError("config: server_lr must be positive");
    if (!(cfg.round.tau > 0.0)) throw UsageError("config: tau must be positive");

    cfg.seeds = config_get<std::vector<uint64_t>>(merged, "replication_seeds");
    if (cfg.seeds.empty()) throw UsageError("config: replication_seeds must be nonempty");
    for (size_t i = 0; i < cfg.seeds.size(); ++i)
        for (size_t j = i + 1; j < cfg.seeds.size(); ++j)
            if (cfg.seeds[i] == cfg.seeds[j]) throw UsageError("config: replication seeds must be distinct");

    cfg.out_dir = merged.value("output_dir", "out");
    cfg.rank_full_window = merged.value("rank_full_window", false);
    cfg.aggregate_full_window = merged.value("aggregate_full_window", false);
    return cfg;
}

struct ConfigOverrides {
    std::optional<std::string> out_dir;
    std::optional<uint64_t> seed;
};

inline ExperimentConfig build_config(const std::string& preset, const std::optional<std::string>& config_path,
                                     const ConfigOverrides& overrides = {}) {
    nlohmann::json merged = preset_config(preset);
    if (config_path) {
        nlohmann::json file;
        try {
            file = nlohmann::json::parse(read_file(*config_path));
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("config file " + *config_path + ": " + e.what());
        } catch (const std::runtime_error& e) {
            throw UsageError(e.what());
        }
        merged = merge_config(merged, file);
    }
    if (overrides.out_dir) merged["output_dir"] = *overrides.out_dir;
    if (overrides.seed) merged["replication_seeds"] = {*overrides.seed};
    return parse_experiment_config(merged);
}

// ---------------------------------------------------------------------------
// Output layout under the output directory:
//   data/dataset_seed<S>.jsonl
//   train/<mode>/<cell>/seed<S>/{checkpoint.bin | period<k>.bin, manifest.json}
//   eval/<mode>/<cell>/{decile_report_seed<S>[_period<k>].csv, summary.csv}
//   eval/{innovation_seed<S>.csv, innovation.csv}
//   report/{rcp_vs_decile.csv, rcp_vs_period.csv, rcp_overall.csv, innovation.csv}
// ---------------------------------------------------------------------------

namespace paths {

inline std::filesystem::path dataset(const ExperimentConfig& cfg, uint64_t seed) {
    if (cfg.dataset_path) {
        std::string p = *cfg.dataset_path;
        const std::string token = "{seed}";
        if (const auto at = p.find(token); at != std::string::npos)
            p.replace(at, token.size(), std::to_string(seed));
        return p;
    }
    return std::filesystem::path(cfg.out_dir) / "data" / ("dataset_seed" + std::to_string(seed) + ".jsonl");
}

inline std::filesystem::path train_cell_dir(const ExperimentConfig& cfg, const std::string& mode,
                                            const CellSpec& cell, uint64_t seed) {
    return std::filesystem::path(cfg.out_dir) / "train" / mode / cell_name(cell) /
           ("seed" + std::to_string(seed));
}

inline std::filesystem::path eval_cell_dir(const ExperimentConfig& cfg, const std::string& mode,
                                           const CellSpec& cell) {
    return std::filesystem::path(cfg.out_dir) / "eval" / mode / cell_name(cell);
}

}  // namespace paths

namespace detail {

inline Population load_dataset(const ExperimentConfig& cfg, uint64_t seed) {
    const auto path = paths::dataset(cfg, seed);
    if (!std::filesystem::exists(path))
        throw std::runtime_error("dataset " + path.string() + " not found (run `fedsim gen` first)");
    return load_population(path);
}

inline std::vector<std::string> checkpoint_names(const ExperimentConfig& cfg) {
    std::vector<std::string> names;
    if (cfg.mode == "one_shot") {
        names.push_back("checkpoint.bin");
    } else {
        const int segments = (cfg.train_end_month - cfg.train_start_month) / cfg.delta_months;
        for (int k = 1; k <= segments; ++k) names.push_back("period" + std::to_string(k) + ".bin");
    }
    return names;
}

inline nlohmann::json diagnostics_json(const std::vector<RoundDiagnostic>& diagnostics) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& d : diagnostics) {
        out.push_back({{"round", d.round},
                       {"selected", d.cohort_selected},
                       {"trained", d.cohort_trained},
                       {"examples", d.example_total},
                       {"mean_local_loss", d.mean_local_loss},
                       {"skipped", d.skipped}});
    }
    return out;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace detail

/// gen: synthesize one dataset file per replication seed.
inline void run_gen(const ExperimentConfig& cfg, bool force, std::ostream& log) {
    if (!cfg.dataset_spec)
        throw UsageError("gen requires a dataset generator spec in the config");
    for (const uint64_t seed : cfg.seeds) {
        const auto path = paths::dataset(cfg, seed);
        if (std::filesystem::exists(path) && !force)
            throw std::runtime_error("refusing to overwrite " + path.string() + " without --force");
        std::filesystem::create_directories(path.parent_path());

        DatasetSpec spec = *cfg.dataset_spec;
        spec.seed = seed;
        const Population pop = generate_population(spec);
        save_population(pop, path);

        size_t max_count = 0, min_nonzero = SIZE_MAX;
        for (const auto& shard : pop.shards) {
            max_count = std::max(max_count, shard.size());
            if (!shard.empty()) min_nonzero = std::min(min_nonzero, shard.size());
        }
        log << "gen seed " << seed << ": " << pop.device_count() << " devices, "
            << pop.total_utterances() << " utterances, activity spread "
            << max_count << "/" << min_nonzero << " = "
            << (min_nonzero ? static_cast<double>(max_count) / static_cast<double>(min_nonzero) : 0.0)
            << " -> " << path.string() << "\n";
    }
}

/// train: run every (cell x seed); failures are reported and skipped.
/// Returns the number of failed cells.
inline size_t run_train(const ExperimentConfig& cfg, std::ostream& log) {
    size_t failures = 0;
    for (const uint64_t seed : cfg.seeds) {
        const Population pop = detail::load_dataset(cfg, seed);
        const ModelParams initial =
            init_params(cfg.model_kind, pop.vocab_size, cfg.model_dim, init_seed(seed));
        for (const CellSpec& cell : cfg.cells) {
            const auto start = std::chrono::steady_clock::now();
            try {
                RoundConfig round = cfg.round;
                round.seed = seed;
                RunOptions options{cfg.rank_full_window, cfg.aggregate_full_window};

                std::vector<RunResult> results;
                if (cfg.mode == "one_shot") {
                    results.push_back(run_one_shot(pop, cfg.train_window(), cell.strategy,
                                                   cell.algorithm, round, initial));
                } else {
                    results = run_continual(pop, cfg.train_window(), cfg.delta_months, cell.strategy,
                                            cell.algorithm, round, initial, options);
                }

                const auto dir = paths::train_cell_dir(cfg, cfg.mode, cell, seed);
                std::filesystem::create_directories(dir);
                const auto names = detail::checkpoint_names(cfg);
                nlohmann::json segments = nlohmann::json::array();
                for (size_t i = 0; i < results.size(); ++i) {
                    save_params(results[i].final_params, dir / names[i]);
                    segments.push_back(
                        {{"index", i},
                         {"checkpoint", names[i]},
                         {"start_day", results[i].provenance.train_window.start_day},
                         {"end_day", results[i].provenance.train_window.end_day},
                         {"initial_params_hash", detail::hash_hex(results[i].provenance.initial_params_hash)},
                         {"final_params_hash", detail::hash_hex(results[i].provenance.final_params_hash)},
                         {"diagnostics", detail::diagnostics_json(results[i].diagnostics)}});
                }
                const double wall =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                nlohmann::json manifest = {
                    {"version", kVersion},
                    {"config_hash", cfg.config_hash()},
                    {"algorithm", algorithm_name(cell.algorithm)},
                    {"strategy", strategy_name(cell.strategy)},
                    {"quantile", cell.strategy.quantile},
                    {"mode", cfg.mode},
                    {"seed", seed},
                    {"replication_seeds", cfg.seeds},
                    {"model",
                     {{"kind", model_kind_name(cfg.model_kind)},
                      {"dim", cfg.model_dim},
                      {"vocab_size", pop.vocab_size}}},
                    {"train_window",
                     {{"start_day", cfg.train_window().start_day}, {"end_day", cfg.train_window().end_day}}},
                    {"test_window",
                     {{"start_day", cfg.test_window().start_day}, {"end_day", cfg.test_window().end_day}}},
                    {"delta_months", cfg.delta_months},
                    {"rounds", cfg.merged.at("rounds")},
                    {"rank_full_window", cfg.rank_full_window},
                    {"aggregate_full_window", cfg.aggregate_full_window},
                    {"segments", segments},
                    {"wall_time_seconds", wall},
                };
                atomic_write_file(dir / "manifest.json", manifest.dump(2) + "\n");
                log << "train " << cfg.mode << "/" << cell_name(cell) << " seed " << seed << ": "
                    << results.size() << " checkpoint(s) in " << format_double(wall) << "s\n";
            } catch (const std::exception& e) {
                ++failures;
                log << "train " << cfg.mode << "/" << cell_name(cell) << " seed " << seed
                    << " FAILED: " << e.what() << "\n";
            }
        }
    }
    return failures;
}

namespace detail {

struct EvaluatedCheckpoint {
    DecileReport report;
    RcpReport rcp_report;
};

struct SummaryAccumulator {
    std::vector<double> values;
    void add(double v) { values.push_back(v); }
    double mean() const {
        double total = 0.0;
        for (double v : values) total += v;
        return total / static_cast<double>(values.size());
    }
    /// Sample standard deviation (n - 1); 0 for a single replicate.
    double stddev() const {
        if (values.size() < 2) return 0.0;
        const double m = mean();
        double ss = 0.0;
        for (double v : values) ss += (v - m) * (v - m);
        return std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
};

}  // namespace detail

/// eval: decile perplexity + RCP per checkpoint, mean and std across the
/// replication seeds, and the innovation repartition for continual configs.
inline void run_eval(const ExperimentConfig& cfg, std::ostream& log) {
    if (!cfg.baseline) throw UsageError("eval requires a \"baseline\" cell in the config");

    // Baseline overall perplexity per seed (denominator for every RCP).
    std::map<uint64_t, double> baseline_ppl;
    std::map<uint64_t, Population> test_pops;
    std::map<uint64_t, Population> datasets;
    for (const uint64_t seed : cfg.seeds) {
        datasets.emplace(seed, detail::load_dataset(cfg, seed));
        test_pops.emplace(seed, restrict_to_window(datasets.at(seed), cfg.test_window()));

        const auto dir = paths::train_cell_dir(cfg, cfg.baseline_mode, *cfg.baseline, seed);
        std::string name = "checkpoint.bin";
        if (cfg.baseline_mode == "continual") {
            const int segments = (cfg.train_end_month - cfg.train_start_month) / cfg.delta_months;
            name = "period" + std::to_string(segments) + ".bin";
        }
        const auto path = dir / name;
        if (!std::filesystem::exists(path))
            throw std::runtime_error("missing baseline checkpoint " + path.string() +
                                     " (train the baseline cell first)");
        const auto params = load_params(path);
        baseline_ppl[seed] = evaluate(params, test_pops.at(seed)).overall.perplexity;
    }

    const auto names = detail::checkpoint_names(cfg);
    for (const CellSpec& cell : cfg.cells) {
        const auto eval_dir = paths::eval_cell_dir(cfg, cfg.mode, cell);
        std::filesystem::create_directories(eval_dir);

        // (seed, period) -> evaluated report, computed in parallel.
        std::vector<std::pair<uint64_t, size_t>> jobs;
        for (const uint64_t seed : cfg.seeds)
            for (size_t p = 0; p < names.size(); ++p) jobs.emplace_back(seed, p);
        std::vector<detail::EvaluatedCheckpoint> evaluated(jobs.size());
        std::vector<std::string> missing(jobs.size());
        parallel_for_index(jobs.size(), [&](size_t i) {
            const auto [seed, p] = jobs[i];
            const auto path = paths::train_cell_dir(cfg, cfg.mode, cell, seed) / names[p];
            if (!std::filesystem::exists(path)) {
                missing[i] = path.string();
                return;
            }
            const auto params = load_params(path);
            evaluated[i].report = evaluate(params, test_pops.at(seed));
            evaluated[i].rcp_report = rcp(evaluated[i].report, baseline_ppl.at(seed));
        });
        for (const auto& m : missing)
            if (!m.empty()) throw std::runtime_error("missing checkpoint " + m + " (train first)");

        for (size_t i = 0; i < jobs.size(); ++i) {
            const auto [seed, p] = jobs[i];
            std::string file = "decile_report_seed" + std::to_string(seed);
            if (cfg.mode == "continual") file += "_period" + std::to_string(p + 1);
            file += ".csv";
            atomic_write_file(eval_dir / file,
                              decile_report_csv(evaluated[i].report, &evaluated[i].rcp_report));
        }

        // summary.csv: mean and sample std across seeds per (period, row).
        std::string summary = "period,decile,ppl_mean,ppl_std,rcp_mean,rcp_std\n";
        for (size_t p = 0; p < names.size(); ++p) {
            const auto row = [&](const std::string& label, auto metric_ppl, auto metric_rcp) {
                detail::SummaryAccumulator ppl, rcp_acc;
                for (size_t i = 0; i < jobs.size(); ++i) {
                    if (jobs[i].second != p) continue;
                    ppl.add(metric_ppl(evaluated[i]));
                    rcp_acc.add(metric_rcp(evaluated[i]));
                }
                summary += std::to_string(p + 1) + "," + label + "," + format_double(ppl.mean()) + "," +
                           format_double(ppl.stddev()) + "," + format_double(rcp_acc.mean()) + "," +
                           format_double(rcp_acc.stddev()) + "\n";
            };
            for (size_t d = 0; d < 10; ++d) {
                row(std::to_string(d + 1),
                    [d](const auto& e) { return e.report.deciles[d].perplexity; },
                    [d](const auto& e) { return e.rcp_report.decile_rcp[d]; });
            }
            row("overall", [](const auto& e) { return e.report.overall.perplexity; },
                [](const auto& e) { return e.rcp_report.overall_rcp; });
        }
        atomic_write_file(eval_dir / "summary.csv", summary);
        log << "eval " << cfg.mode << "/" << cell_name(cell) << ": " << jobs.size()
            << " checkpoint(s) evaluated\n";
    }

    if (cfg.mode == "continual") {
        // The innovation repartition is a property of the data segments.
        InnovationReport mean_report;
        std::vector<InnovationReport> reports;
        for (const uint64_t seed : cfg.seeds) {
            const auto segments =
                segment_periods(datasets.at(seed), cfg.train_window(), cfg.delta_months);
            if (segments.size() < 2)
                throw std::runtime_error("innovation needs at least 2 segments, got " +
                                         std::to_string(segments.size()));
            const auto report = innovation(segments);
            reports.push_back(report);
            atomic_write_file(std::filesystem::path(cfg.out_dir) / "eval" /
                                  ("innovation_seed" + std::to_string(seed) + ".csv"),
                              innovation_csv(report));
        }
        // Mean across seeds, counting only seeds whose row has devices.
        const auto average_row = [&](InnovationRow& out, auto pick) {
            size_t populated = 0;
            for (const auto& r : reports) {
                const InnovationRow& row = pick(r);
                if (row.device_count == 0) continue;
                ++populated;
                out.device_count += row.device_count;
                out.seen_self += row.seen_self;
                out.seen_others += row.seen_others;
                out.completely_new += row.completely_new;
            }
            if (populated == 0) return;
            out.seen_self /= static_cast<double>(populated);
            out.seen_others /= static_cast<double>(populated);
            out.completely_new /= static_cast<double>(populated);
        };
        for (size_t d = 0; d < 10; ++d)
            average_row(mean_report.deciles[d],
                        [d](const InnovationReport& r) -> const InnovationRow& { return r.deciles[d]; });
        average_row(mean_report.overall,
                    [](const InnovationReport& r) -> const InnovationRow& { return r.overall; });
        atomic_write_file(std::filesystem::path(cfg.out_dir) / "eval" / "innovation.csv",
                          innovation_csv(mean_report));
        log << "eval innovation: " << reports.size() << " seed(s)\n";
    }
}

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string field;
        std::istringstream fs(line);
        while (std::getline(fs, field, ',')) fields.push_back(field);
        if (line.back() == ',') fields.push_back("");
        rows.push_back(std::move(fields));
    }
    return rows;
}

}  // namespace detail

/// report: aggregate the eval CSVs into long-format plot tables.
inline void run_report(const ExperimentConfig& cfg, std::ostream& log) {
    const std::filesystem::path report_dir = std::filesystem::path(cfg.out_dir) / "report";
    std::string vs_decile = "algorithm,strategy,mode,decile,rcp_mean,rcp_std\n";
    std::string vs_period = "algorithm,strategy,period,rcp_mean,rcp_std\n";
    std::string overall = "algorithm,strategy,mode,rcp_mean,rcp_std\n";
    size_t found = 0;
    bool any_period = false;

    for (const std::string mode : {"one_shot", "continual"}) {
        for (const CellSpec& cell : cfg.cells) {
            const auto summary_path =
                std::filesystem::path(cfg.out_dir) / "eval" / mode / cell_name(cell) / "summary.csv";
            if (!std::filesystem::exists(summary_path)) continue;
            ++found;
            const auto rows = detail::read_csv(summary_path);
            size_t last_period = 1;
            for (size_t r = 1; r < rows.size(); ++r)
                last_period = std::max(last_period, static_cast<size_t>(std::stoul(rows[r][0])));
            for (size_t r = 1; r < rows.size(); ++r) {
                const auto& row = rows[r];
                const std::string& period = row[0];
                const std::string& decile = row[1];
                const std::string& rcp_mean = row[4];
                const std::string& rcp_std = row[5];
                const std::string prefix = algorithm_name(cell.algorithm) + "," +
                                           strategy_name(cell.strategy) + ",";
                if (decile == "overall") {
                    if (mode == "continual") {
                        vs_period += prefix + period + "," + rcp_mean + "," + rcp_std + "\n";
                        any_period = true;
                    }
                    if (period == std::to_string(last_period))
                        overall += prefix + mode + "," + rcp_mean + "," + rcp_std + "\n";
                } else if (period == std::to_string(last_period)) {
                    vs_decile += prefix + mode + "," + decile + "," + rcp_mean + "," + rcp_std + "\n";
                }
            }
        }
    }
    if (found == 0)
        throw std::runtime_error("no evaluation summaries under " +
                                 (std::filesystem::path(cfg.out_dir) / "eval").string() +
                                 " (run `fedsim eval` first)");

    std::filesystem::create_directories(report_dir);
    atomic_write_file(report_dir / "rcp_vs_decile.csv", vs_decile);
    if (any_period) atomic_write_file(report_dir / "rcp_vs_period.csv", vs_period);
    atomic_write_file(report_dir / "rcp_overall.csv", overall);

    const auto innovation_path = std::filesystem::path(cfg.out_dir) / "eval" / "innovation.csv";
    if (std::filesystem::exists(innovation_path))
        atomic_write_file(report_dir / "innovation.csv", read_file(innovation_path));
    log << "report: " << found << " cell summaries aggregated -> " << report_dir.string() << "\n";
}

}  // namespace fedsim
