#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedsim/common.hpp"
#include "fedsim/models.hpp"
#include "fedsim/population.hpp"
#include "fedsim/strategies.hpp"

namespace fedsim {

enum class Algorithm { fedavg, fedopt };

inline std::string algorithm_name(Algorithm a) { return a == Algorithm::fedavg ? "fedavg" : "fedopt"; }

inline Algorithm parse_algorithm(const std::string& name) {
    if (name == "fedavg") return Algorithm::fedavg;
    if (name == "fedopt") return Algorithm::fedopt;
    throw std::invalid_argument("unknown algorithm \"" + name + "\"");
}

struct RoundConfig {
    size_t cohort_size = 50;
    size_t local_epochs = 1;
    double local_lr = 0.05;
    size_t local_batch_size = 32;
    double server_lr = 0.1;   // FedOpt
    double beta1 = 0.9;       // FedOpt
    double beta2 = 0.99;      // FedOpt
    double tau = 1e-3;        // FedOpt adaptivity epsilon
    size_t rounds = 200;
    uint64_t seed = 1;
};

/// Continual-training count scoping. By default selection ranking and
/// aggregation weights use the counts of the current training window
/// (segment); these switch both to the counts of the whole train window.
struct RunOptions {
    bool rank_full_window = false;
    bool aggregate_full_window = false;
};

/// Result of one device's local training pass.
struct LocalUpdate {
    std::string device_id;
    size_t example_count = 0;  // n_m used for aggregation weighting
    ModelParams params;
    double mean_loss = 0.0;  // pre-step training loss, first epoch
    size_t pair_count = 0;
};

struct ServerState {
    size_t round = 0;
    ModelParams params;
    std::vector<double> first_moment;   // FedOpt; empty for FedAvg
    std::vector<double> second_moment;  // FedOpt; empty for FedAvg
};

inline ServerState init_server_state(ModelParams params, Algorithm algorithm) {
    ServerState state;
    state.params = std::move(params);
    if (algorithm == Algorithm::fedopt) {
        state.first_moment.assign(state.params.values.size(), 0.0);
        state.second_moment.assign(state.params.values.size(), 0.0);
    }
    return state;
}

struct RoundDiagnostic {
    size_t round = 0;
    size_t cohort_selected = 0;   // devices in S_t
    size_t cohort_trained = 0;    // devices that produced updates
    size_t example_total = 0;     // N_t
    double mean_local_loss = std::numeric_limits<double>::quiet_NaN();
    bool skipped = false;         // cohort held no trainable data
};

struct Provenance {
    std::string algorithm;
    std::string strategy;
    TimeWindow train_window;
    uint64_t seed = 0;
    size_t segment_index = 0;
    uint64_t initial_params_hash = 0;
    uint64_t final_params_hash = 0;
};

struct RunResult {
    ModelParams final_params;
    std::vector<RoundDiagnostic> diagnostics;
    Provenance provenance;
};

// Stream tags keep the cohort, per-device, and init streams disjoint.
inline constexpr uint64_t kCohortStream = 0x636f686f72740000ULL;
inline constexpr uint64_t kDeviceStream = 0x6465766963650000ULL;
inline constexpr uint64_t kInitStream = 0x696e697400000000ULL;

inline uint64_t cohort_seed(uint64_t global_seed, size_t round) {
    return mix_seed(mix_seed(global_seed, kCohortStream), round);
}

/// Per-device stream for one round: a pure function of (seed, round, id),
/// so parallel scheduling cannot change results.
inline uint64_t device_seed(uint64_t global_seed, size_t round, std::string_view device_id) {
    return mix_seed(mix_seed(global_seed, kDeviceStream), round, device_id);
}

inline uint64_t init_seed(uint64_t global_seed) { return mix_seed(global_seed, kInitStream); }

/// Local training on one device: local_epochs passes of minibatch SGD
/// starting from the current global parameters. Empty shards yield a skip
/// signal rather than an error.
inline std::optional<LocalUpdate> local_update(const DeviceShard& shard, const ModelParams& global_params,
                                               const RoundConfig& cfg, uint64_t seed) {
    if (shard.empty()) return std::nullopt;
    if (cfg.local_epochs < 1) throw std::invalid_argument("local_epochs must be >= 1");
    std::mt19937_64 rng(splitmix64(seed));
    LocalUpdate update;
    update.device_id = shard.device_id;
    update.example_count = shard.size();
    update.params = global_params;
    for (size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        double epoch_loss = 0.0;
        update.params = sgd_epoch(update.params, shard.utterances, cfg.local_lr, cfg.local_batch_size,
                                  rng, epoch == 0 ? &epoch_loss : nullptr);
        if (epoch == 0) update.mean_loss = epoch_loss;
    }
    for (const auto& u : shard.utterances) update.pair_count += u.tokens.size();
    return update;
}

/// Weighted average of local parameters with weights n_m / N_t, summed in
/// device-id order. The coordinate-wise result is anchored at the local
/// minimum so it stays a convex combination of the local values.
inline ModelParams aggregate(std::vector<LocalUpdate> updates) {
    if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
    std::sort(updates.begin(), updates.end(),
              [](const LocalUpdate& a, const LocalUpdate& b) { return a.device_id < b.device_id; });
    const ModelParams& first = updates.front().params;
    size_t total = 0;
    for (const auto& u : updates) {
        if (!u.params.same_layout(first))
            throw std::invalid_argument("aggregate: parameter layout mismatch for device " + u.device_id);
        if (u.example_count == 0)
            throw std::invalid_argument("aggregate: update with zero examples from device " + u.device_id);
        total += u.example_count;
    }

    const size_t n = first.values.size();
    std::vector<double> lo(first.values);
    std::vector<double> hi(first.values);
    for (size_t m = 1; m < updates.size(); ++m) {
        const auto& w = updates[m].params.values;
        for (size_t k = 0; k < n; ++k) {
            lo[k] = std::min(lo[k], w[k]);
            hi[k] = std::max(hi[k], w[k]);
        }
    }

    ModelParams out = first;
    out.values = lo;
    std::vector<double> acc(n, 0.0);
    for (const auto& u : updates) {
        const double coef = static_cast<double>(u.example_count) / static_cast<double>(total);
        const auto& w = u.params.values;
        for (size_t k = 0; k < n; ++k) acc[k] += coef * (w[k] - lo[k]);
    }
    for (size_t k = 0; k < n; ++k) out.values[k] = std::min(lo[k] + acc[k], hi[k]);
    return out;
}

/// Adam-style server step on the pseudo-gradient delta = w_t - aggregated
/// local params, without bias correction:
///   m <- beta1 m + (1 - beta1) delta
///   v <- beta2 v + (1 - beta2) delta^2
///   w <- w - server_lr * m / (sqrt(v) + tau)
/// Moments are updated in place.
inline std::vector<double> fedopt_server_step(const std::vector<double>& params,
                                              const std::vector<double>& aggregated,
                                              std::vector<double>& first_moment,
                                              std::vector<double>& second_moment,
                                              const RoundConfig& cfg) {
    if (aggregated.size() != params.size())
        throw std::invalid_argument("fedopt_server_step: size mismatch");
    if (first_moment.size() != params.size()) first_moment.assign(params.size(), 0.0);
    if (second_moment.size() != params.size()) second_moment.assign(params.size(), 0.0);
    std::vector<double> next(params.size());
    for (size_t k = 0; k < params.size(); ++k) {
        const double delta = params[k] - aggregated[k];
        first_moment[k] = cfg.beta1 * first_moment[k] + (1.0 - cfg.beta1) * delta;
        second_moment[k] = cfg.beta2 * second_moment[k] + (1.0 - cfg.beta2) * delta * delta;
        next[k] = params[k] - cfg.server_lr * first_moment[k] / (std::sqrt(second_moment[k]) + cfg.tau);
    }
    return next;
}

namespace detail {

struct RoundOutcome {
    std::vector<LocalUpdate> updates;
    RoundDiagnostic diagnostic;
};

/// Cohort selection plus parallel local updates; shared by FedAvg/FedOpt.
inline RoundOutcome run_cohort(const ServerState& state, const Population& pop,
                               const SelectionStrategy& strategy, const RoundConfig& cfg,
                               const std::map<std::string, double>* rank_counts,
                               const std::map<std::string, size_t>* aggregate_counts) {
    std::map<std::string, double> counts;
    if (rank_counts) {
        counts = *rank_counts;
    } else {
        for (const auto& shard : pop.shards)
            counts[shard.device_id] = static_cast<double>(shard.size());
    }

    const auto probabilities = selection_probabilities(strategy, counts);
    std::mt19937_64 rng(splitmix64(cohort_seed(cfg.seed, state.round)));
    const CohortPlan plan = select_cohort(probabilities, cfg.cohort_size, rng);

    RoundOutcome outcome;
    outcome.diagnostic.round = state.round;
    outcome.diagnostic.cohort_selected = plan.device_ids.size();

    std::vector<const DeviceShard*> shards;
    shards.reserve(plan.device_ids.size());
    for (const auto& id : plan.device_ids) {
        const DeviceShard* shard = pop.find(id);
        if (shard && !shard->empty()) shards.push_back(shard);
    }

    std::vector<std::optional<LocalUpdate>> slots(shards.size());
    parallel_for_index(shards.size(), [&](size_t i) {
        slots[i] = local_update(*shards[i], state.params, cfg,
                                device_seed(cfg.seed, state.round, shards[i]->device_id));
    });

    double loss_weighted = 0.0;
    size_t pair_total = 0;
    for (auto& slot : slots) {
        if (!slot) continue;
        if (aggregate_counts) {
            const auto it = aggregate_counts->find(slot->device_id);
            if (it != aggregate_counts->end() && it->second > 0) slot->example_count = it->second;
        }
        loss_weighted += slot->mean_loss * static_cast<double>(slot->pair_count);
        pair_total += slot->pair_count;
        outcome.diagnostic.example_total += slot->example_count;
        outcome.updates.push_back(std::move(*slot));
    }
    outcome.diagnostic.cohort_trained = outcome.updates.size();
    if (outcome.updates.empty()) {
        outcome.diagnostic.skipped = true;
    } else {
        outcome.diagnostic.mean_local_loss = loss_weighted / static_cast<double>(pair_total);
    }
    return outcome;
}

inline ServerState federated_round(const ServerState& state, const Population& pop,
                                   const SelectionStrategy& strategy, const RoundConfig& cfg,
                                   Algorithm algorithm, RoundDiagnostic* diagnostic,
                                   const std::map<std::string, double>* rank_counts = nullptr,
                                   const std::map<std::string, size_t>* aggregate_counts = nullptr) {
    RoundOutcome outcome = run_cohort(state, pop, strategy, cfg, rank_counts, aggregate_counts);
    if (diagnostic) *diagnostic = outcome.diagnostic;

    ServerState next = state;
    next.round = state.round + 1;
    if (outcome.updates.empty()) return next;  // skipped round, model unchanged

    const ModelParams averaged = aggregate(std::move(outcome.updates));
    if (algorithm == Algorithm::fedavg) {
        next.params = averaged;
        return next;
    }

    next.params.values = fedopt_server_step(state.params.values, averaged.values, next.first_moment,
                                            next.second_moment, cfg);
    return next;
}

}  // namespace detail

/// One FedAvg round: sample a cohort, run local updates on the nonempty
/// selected shards, aggregate with weights n_m / N_t. A cohort containing
/// only empty shards is recorded as a skipped round and leaves the model
/// unchanged.
inline ServerState fedavg_round(const ServerState& state, const Population& pop,
                                const SelectionStrategy& strategy, const RoundConfig& cfg,
                                RoundDiagnostic* diagnostic = nullptr) {
    return detail::federated_round(state, pop, strategy, cfg, Algorithm::fedavg, diagnostic);
}

/// One FedOpt round (FedAdam server rule on the pseudo-gradient).
inline ServerState fedopt_round(const ServerState& state, const Population& pop,
                                const SelectionStrategy& strategy, const RoundConfig& cfg,
                                RoundDiagnostic* diagnostic = nullptr) {
    return detail::federated_round(state, pop, strategy, cfg, Algorithm::fedopt, diagnostic);
}

/// Static training: cfg.rounds rounds over the train window's data.
inline RunResult run_one_shot(const Population& pop, const TimeWindow& train_window,
                              const SelectionStrategy& strategy, Algorithm algorithm,
                              const RoundConfig& cfg, const ModelParams& initial_params) {
    const Population window_pop = restrict_to_window(pop, train_window);
    ServerState state = init_server_state(initial_params, algorithm);

    RunResult result;
    result.provenance = {algorithm_name(algorithm), strategy_name(strategy), window_pop.time_range,
                         cfg.seed,  0,              params_hash(initial_params), 0};
    result.diagnostics.reserve(cfg.rounds);
    for (size_t r = 0; r < cfg.rounds; ++r) {
        RoundDiagnostic diag;
        state = detail::federated_round(state, window_pop, strategy, cfg, algorithm, &diag);
        result.diagnostics.push_back(diag);
    }
    result.final_params = std::move(state.params);
    result.provenance.final_params_hash = params_hash(result.final_params);
    return result;
}

/// Continual training over consecutive delta_months segments of the train
/// window. Segment i starts from segment i-1's final parameters (segment 0
/// from initial_params); the round counter continues across segments, so a
/// single-segment run is identical to run_one_shot. Server optimizer moments
/// reset at each segment boundary.
inline std::vector<RunResult> run_continual(const Population& pop, const TimeWindow& train_window,
                                            int delta_months, const SelectionStrategy& strategy,
                                            Algorithm algorithm, const RoundConfig& cfg,
                                            const ModelParams& initial_params,
                                            const RunOptions& options = {}) {
    const std::vector<Population> segments = segment_periods(pop, train_window, delta_months);

    std::map<std::string, double> full_rank_counts;
    std::map<std::string, size_t> full_aggregate_counts;
    if (options.rank_full_window || options.aggregate_full_window) {
        for (const auto& [id, n] : device_counts(restrict_to_window(pop, train_window))) {
            full_rank_counts[id] = static_cast<double>(n);
            full_aggregate_counts[id] = n;
        }
    }

    std::vector<RunResult> results;
    results.reserve(segments.size());
    ModelParams current = initial_params;
    size_t round_base = 0;
    for (size_t i = 0; i < segments.size(); ++i) {
        ServerState state = init_server_state(current, algorithm);
        state.round = round_base;

        RunResult result;
        result.provenance = {algorithm_name(algorithm), strategy_name(strategy),
                             segments[i].time_range,    cfg.seed,
                             i,                         params_hash(current),
                             0};
        result.diagnostics.reserve(cfg.rounds);
        for (size_t r = 0; r < cfg.rounds; ++r) {
            RoundDiagnostic diag;
            state = detail::federated_round(
                state, segments[i], strategy, cfg, algorithm, &diag,
                options.rank_full_window ? &full_rank_counts : nullptr,
                options.aggregate_full_window ? &full_aggregate_counts : nullptr);
            result.diagnostics.push_back(diag);
        }
        current = std::move(state.params);
        round_base = state.round;
        result.final_params = current;
        result.provenance.final_params_hash = params_hash(current);
        results.push_back(std::move(result));
    }
    return results;
}

}  // namespace fedsim
