#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fedsim/common.hpp"
#include "fedsim/models.hpp"
#include "fedsim/population.hpp"

namespace fedsim {

struct DecileRow {
    size_t device_count = 0;
    size_t utterance_count = 0;
    double perplexity = std::numeric_limits<double>::quiet_NaN();
};

/// Deciles are ordered by ascending device activity (test utterance count).
struct DecileReport {
    std::array<DecileRow, 10> deciles;
    DecileRow overall;
};

struct RcpReport {
    std::array<double, 10> decile_rcp{};
    double overall_rcp = 0.0;
    double baseline_perplexity = 0.0;
};

struct InnovationRow {
    size_t device_count = 0;
    double seen_self = 0.0;
    double seen_others = 0.0;
    double completely_new = 0.0;
};

struct InnovationReport {
    std::array<InnovationRow, 10> deciles;
    InnovationRow overall;
};

namespace detail {

/// Devices with at least one utterance, sorted by (count asc, id asc).
inline std::vector<const DeviceShard*> active_shards_by_count(const Population& pop) {
    std::vector<const DeviceShard*> shards;
    for (const auto& shard : pop.shards)
        if (!shard.empty()) shards.push_back(&shard);
    std::sort(shards.begin(), shards.end(), [](const DeviceShard* a, const DeviceShard* b) {
        if (a->size() != b->size()) return a->size() < b->size();
        return a->device_id < b->device_id;
    });
    return shards;
}

/// Chunk boundaries floor(i*n/10): group sizes differ by at most one and
/// small populations simply leave some groups empty.
inline std::array<std::pair<size_t, size_t>, 10> decile_bounds(size_t n) {
    std::array<std::pair<size_t, size_t>, 10> bounds;
    for (size_t i = 0; i < 10; ++i) bounds[i] = {i * n / 10, (i + 1) * n / 10};
    return bounds;
}

inline std::string sequence_key(const std::vector<uint32_t>& tokens) {
    std::string key;
    key.reserve(tokens.size() * 4);
    for (uint32_t t : tokens)
        for (int b = 0; b < 4; ++b) key.push_back(static_cast<char>((t >> (8 * b)) & 0xff));
    return key;
}

}  // namespace detail

/// Splits the test devices (those with at least one test utterance) into 10
/// groups by ascending utterance count; ties broken by device id.
inline std::array<std::vector<std::string>, 10> decile_split(const Population& test_pop) {
    const auto shards = detail::active_shards_by_count(test_pop);
    if (shards.size() < 10)
        throw std::invalid_argument("decile split needs at least 10 devices with test utterances, found " +
                                    std::to_string(shards.size()));
    std::array<std::vector<std::string>, 10> groups;
    const auto bounds = detail::decile_bounds(shards.size());
    for (size_t i = 0; i < 10; ++i)
        for (size_t k = bounds[i].first; k < bounds[i].second; ++k)
            groups[i].push_back(shards[k]->device_id);
    return groups;
}

/// Pooled (token-weighted) perplexity per device-activity decile and overall.
inline DecileReport evaluate(const ModelParams& params, const Population& test_pop) {
    const auto shards = detail::active_shards_by_count(test_pop);
    if (shards.size() < 10)
        throw std::invalid_argument("decile split needs at least 10 devices with test utterances, found " +
                                    std::to_string(shards.size()));
    const auto bounds = detail::decile_bounds(shards.size());

    DecileReport report;
    std::vector<const Utterance*> all;
    all.reserve(test_pop.total_utterances());
    for (size_t i = 0; i < 10; ++i) {
        std::vector<const Utterance*> group;
        for (size_t k = bounds[i].first; k < bounds[i].second; ++k) {
            report.deciles[i].device_count += 1;
            report.deciles[i].utterance_count += shards[k]->size();
            for (const auto& u : shards[k]->utterances) group.push_back(&u);
        }
        report.deciles[i].perplexity = perplexity(params, group);
        all.insert(all.end(), group.begin(), group.end());
    }
    report.overall.device_count = shards.size();
    report.overall.utterance_count = all.size();
    report.overall.perplexity = perplexity(params, all);
    return report;
}

/// Relative change in percent versus the baseline model's overall test-set
/// perplexity. Every cell, per-decile and overall, is normalized by the same
/// baseline overall value.
inline RcpReport rcp(const DecileReport& report, double baseline_overall_perplexity) {
    if (!(baseline_overall_perplexity > 0.0))
        throw std::invalid_argument("baseline perplexity must be positive");
    RcpReport out;
    out.baseline_perplexity = baseline_overall_perplexity;
    const auto change = [&](double p) {
        return 100.0 * (p - baseline_overall_perplexity) / baseline_overall_perplexity;
    };
    for (size_t i = 0; i < 10; ++i) out.decile_rcp[i] = change(report.deciles[i].perplexity);
    out.overall_rcp = change(report.overall.perplexity);
    return out;
}

/// Repartition of each device's unique utterances (distinct token sequences)
/// per period p >= 2 into: (1) already seen by this device in an earlier
/// period, (2) new to this device but seen by another device earlier,
/// (3) completely new. Per-device proportions are averaged over the
/// evaluated periods, then averaged unweighted within activity deciles
/// (activity = utterance count across all segments). Devices with no unique
/// utterances in any evaluated period are excluded from the averages.
inline InnovationReport innovation(const std::vector<Population>& segments) {
    if (segments.size() < 2)
        throw std::invalid_argument("innovation needs at least 2 segments, got " +
                                    std::to_string(segments.size()));

    struct DeviceAccumulator {
        double seen_self = 0.0;
        double seen_others = 0.0;
        double completely_new = 0.0;
        size_t periods = 0;
        size_t activity = 0;
    };
    std::map<std::string, DeviceAccumulator> devices;
    for (const auto& segment : segments)
        for (const auto& shard : segment.shards) devices[shard.device_id].activity += shard.size();

    std::unordered_set<std::string> prior_any;
    std::unordered_map<std::string, std::unordered_set<std::string>> prior_self;

    for (size_t p = 0; p < segments.size(); ++p) {
        std::unordered_map<std::string, std::unordered_set<std::string>> period_sets;
        for (const auto& shard : segments[p].shards) {
            auto& unique = period_sets[shard.device_id];
            for (const auto& u : shard.utterances) unique.insert(detail::sequence_key(u.tokens));
        }
        if (p > 0) {
            for (const auto& [id, unique] : period_sets) {
                if (unique.empty()) continue;
                const auto self_it = prior_self.find(id);
                size_t self_count = 0, other_count = 0, new_count = 0;
                for (const auto& key : unique) {
                    if (self_it != prior_self.end() && self_it->second.count(key)) ++self_count;
                    else if (prior_any.count(key)) ++other_count;
                    else ++new_count;
                }
                const double total = static_cast<double>(unique.size());
                auto& acc = devices[id];
                acc.seen_self += static_cast<double>(self_count) / total;
                acc.seen_others += static_cast<double>(other_count) / total;
                acc.completely_new += static_cast<double>(new_count) / total;
                acc.periods += 1;
            }
        }
        for (auto& [id, unique] : period_sets) {
            auto& self = prior_self[id];
            for (const auto& key : unique) {
                self.insert(key);
                prior_any.insert(key);
            }
        }
    }

    struct Eligible {
        const std::string* id;
        size_t activity;
        double seen_self, seen_others, completely_new;
    };
    std::vector<Eligible> eligible;
    for (const auto& [id, acc] : devices) {
        if (acc.periods == 0) continue;
        const double n = static_cast<double>(acc.periods);
        eligible.push_back({&id, acc.activity, acc.seen_self / n, acc.seen_others / n,
                            acc.completely_new / n});
    }
    std::sort(eligible.begin(), eligible.end(), [](const Eligible& a, const Eligible& b) {
        if (a.activity != b.activity) return a.activity < b.activity;
        return *a.id < *b.id;
    });

    InnovationReport report;
    const auto bounds = detail::decile_bounds(eligible.size());
    const auto fill = [&](InnovationRow& row, size_t begin, size_t end) {
        row.device_count = end - begin;
        if (row.device_count == 0) return;
        for (size_t k = begin; k < end; ++k) {
            row.seen_self += eligible[k].seen_self;
            row.seen_others += eligible[k].seen_others;
            row.completely_new += eligible[k].completely_new;
        }
        const double n = static_cast<double>(row.device_count);
        row.seen_self /= n;
        row.seen_others /= n;
        row.completely_new /= n;
    };
    for (size_t i = 0; i < 10; ++i) fill(report.deciles[i], bounds[i].first, bounds[i].second);
    fill(report.overall, 0, eligible.size());
    return report;
}

// ---------------------------------------------------------------------------
// CSV emission. Column orders are fixed.
// ---------------------------------------------------------------------------

inline std::string decile_report_csv(const DecileReport& report, const RcpReport* rcp_report = nullptr) {
    std::string out = "decile,devices,utterances,perplexity,rcp_percent\n";
    const auto row = [&](const std::string& label, const DecileRow& r, const double* rcp_value) {
        out += label + "," + std::to_string(r.device_count) + "," + std::to_string(r.utterance_count) +
               "," + format_double(r.perplexity) + ",";
        if (rcp_value) out += format_double(*rcp_value);
        out.push_back('\n');
    };
    for (size_t i = 0; i < 10; ++i)
        row(std::to_string(i + 1), report.deciles[i],
            rcp_report ? &rcp_report->decile_rcp[i] : nullptr);
    row("overall", report.overall, rcp_report ? &rcp_report->overall_rcp : nullptr);
    return out;
}

inline std::string innovation_csv(const InnovationReport& report) {
    std::string out = "decile,seen_self,seen_others,new\n";
    const auto row = [&](const std::string& label, const InnovationRow& r) {
        if (r.device_count == 0) return;
        out += label + "," + format_double(r.seen_self) + "," + format_double(r.seen_others) + "," +
               format_double(r.completely_new) + "\n";
    };
    for (size_t i = 0; i < 10; ++i) row(std::to_string(i + 1), report.deciles[i]);
    row("overall", report.overall);
    return out;
}

}  // namespace fedsim
