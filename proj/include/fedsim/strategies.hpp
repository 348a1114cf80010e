#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedsim/common.hpp"

namespace fedsim {

/// Activity-based device selection. A device with n_m training samples is
/// selected with probability proportional to f(n_m), with f one of
/// {1, ln(x+1), sqrt(x), x, 1/ln(x+1)}, or restricted to the top/bottom
/// activity quantile (heavy/light).
enum class StrategyKind {
    uniform,
    log_plus_one,
    sqrt_count,
    linear,
    inv_log_plus_one,
    heavy_top,
    light_bottom,
};

struct SelectionStrategy {
    StrategyKind kind = StrategyKind::uniform;
    double quantile = 0.20;  // heavy/light only

    bool is_quantile_filter() const {
        return kind == StrategyKind::heavy_top || kind == StrategyKind::light_bottom;
    }
};

inline std::string strategy_name(const SelectionStrategy& s) {
    switch (s.kind) {
        case StrategyKind::uniform: return "uniform";
        case StrategyKind::log_plus_one: return "log";
        case StrategyKind::sqrt_count: return "sqrt";
        case StrategyKind::linear: return "linear";
        case StrategyKind::inv_log_plus_one: return "invlog";
        case StrategyKind::heavy_top: return "heavy";
        case StrategyKind::light_bottom: return "light";
    }
    return "unknown";
}

inline SelectionStrategy parse_strategy(const std::string& name, double quantile = 0.20) {
    SelectionStrategy s;
    s.quantile = quantile;
    if (name == "uniform") s.kind = StrategyKind::uniform;
    else if (name == "log") s.kind = StrategyKind::log_plus_one;
    else if (name == "sqrt") s.kind = StrategyKind::sqrt_count;
    else if (name == "linear") s.kind = StrategyKind::linear;
    else if (name == "invlog") s.kind = StrategyKind::inv_log_plus_one;
    else if (name == "heavy") s.kind = StrategyKind::heavy_top;
    else if (name == "light") s.kind = StrategyKind::light_bottom;
    else throw std::invalid_argument("unknown strategy \"" + name + "\"");
    if (!(s.quantile > 0.0 && s.quantile <= 1.0))
        throw std::invalid_argument("strategy quantile must be in (0, 1]");
    return s;
}

inline const std::vector<std::string>& all_strategy_names() {
    static const std::vector<std::string> names = {"uniform", "log",    "sqrt", "linear",
                                                   "invlog",  "heavy",  "light"};
    return names;
}

/// Selection weight f(n_m) for one device. rank_context (all device counts,
/// ascending) is consulted only by heavy/light; for those the cut is by
/// count alone, so ties straddling the quantile boundary are all included.
/// selection_probabilities resolves such ties exactly by device id.
inline double strategy_weight(const SelectionStrategy& strategy, double count,
                              std::span<const double> rank_context = {}) {
    if (count < 0.0) throw std::invalid_argument("device count must be nonnegative");
    switch (strategy.kind) {
        case StrategyKind::uniform: return 1.0;
        case StrategyKind::log_plus_one: return std::log1p(count);
        case StrategyKind::sqrt_count: return std::sqrt(count);
        case StrategyKind::linear: return count;
        case StrategyKind::inv_log_plus_one:
            return count <= 0.0 ? 0.0 : 1.0 / std::log1p(count);
        case StrategyKind::heavy_top:
        case StrategyKind::light_bottom: {
            if (rank_context.empty())
                throw std::invalid_argument("heavy/light weight needs the sorted rank context");
            const size_t m = rank_context.size();
            const size_t k = std::min<size_t>(
                m, static_cast<size_t>(std::ceil(strategy.quantile * static_cast<double>(m))));
            if (strategy.kind == StrategyKind::heavy_top)
                return count >= rank_context[m - k] ? 1.0 : 0.0;
            return count <= rank_context[k - 1] ? 1.0 : 0.0;
        }
    }
    throw std::logic_error("unreachable strategy kind");
}

/// Normalized selection distribution over devices. Heavy/light membership is
/// exactly ceil(q*M) devices, ties broken by (count desc, device id asc).
inline std::map<std::string, double> selection_probabilities(const SelectionStrategy& strategy,
                                                             const std::map<std::string, double>& counts) {
    if (counts.empty()) throw std::invalid_argument("selection over an empty device set");
    std::map<std::string, double> weights;

    if (strategy.is_quantile_filter()) {
        std::vector<std::pair<double, const std::string*>> order;
        order.reserve(counts.size());
        for (const auto& [id, n] : counts) {
            if (n < 0.0) throw std::invalid_argument("device count must be nonnegative");
            order.emplace_back(n, &id);
        }
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return *a.second < *b.second;
        });
        const size_t m = order.size();
        const size_t k = std::min<size_t>(
            m, static_cast<size_t>(std::ceil(strategy.quantile * static_cast<double>(m))));
        for (size_t i = 0; i < m; ++i) {
            const bool member =
                strategy.kind == StrategyKind::heavy_top ? i < k : i >= m - k;
            weights[*order[i].second] = member ? 1.0 : 0.0;
        }
    } else {
        for (const auto& [id, n] : counts) weights[id] = strategy_weight(strategy, n);
    }

    double total = 0.0;
    for (const auto& [id, w] : weights) total += w;
    if (!(total > 0.0)) throw std::runtime_error("no eligible devices: all selection weights are zero");
    for (auto& [id, w] : weights) w /= total;
    return weights;
}

/// The devices chosen for one round, with the inclusion probabilities used.
struct CohortPlan {
    std::vector<std::string> device_ids;  // sorted ascending, no duplicates
    std::map<std::string, double> weights;
};

/// Draws min(K, #eligible) distinct devices without replacement using the
/// exponential-keys order statistic: key = -ln(u)/w, smallest K win. The
/// single-draw (K=1) marginal is exactly proportional to the weights.
inline CohortPlan select_cohort(const std::map<std::string, double>& probabilities, size_t cohort_size,
                                std::mt19937_64& rng) {
    if (cohort_size < 1) throw std::invalid_argument("cohort size must be >= 1");
    if (probabilities.empty()) throw std::invalid_argument("empty selection distribution");

    std::vector<std::pair<double, const std::string*>> keyed;
    keyed.reserve(probabilities.size());
    for (const auto& [id, p] : probabilities) {
        if (p <= 0.0) continue;
        const double key = -std::log(draw_unit(rng)) / p;
        keyed.emplace_back(key, &id);
    }
    if (keyed.empty()) throw std::runtime_error("no eligible devices: all selection weights are zero");

    CohortPlan plan;
    if (keyed.size() > cohort_size) {
        std::sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return *a.second < *b.second;
        });
        keyed.resize(cohort_size);
    }
    plan.device_ids.reserve(keyed.size());
    for (const auto& [key, id] : keyed) plan.device_ids.push_back(*id);
    std::sort(plan.device_ids.begin(), plan.device_ids.end());
    for (const auto& id : plan.device_ids) plan.weights[id] = probabilities.at(id);
    return plan;
}

}  // namespace fedsim
