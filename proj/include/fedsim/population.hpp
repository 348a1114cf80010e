#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsim/common.hpp"

namespace fedsim {

inline constexpr int kDaysPerMonth = 30;

/// Half-open interval of day indices [start_day, end_day).
struct TimeWindow {
    int start_day = 0;
    int end_day = 0;

    int length() const { return end_day - start_day; }
    bool contains(int day) const { return day >= start_day && day < end_day; }
    bool overlaps(const TimeWindow& other) const {
        return start_day < other.end_day && other.start_day < end_day;
    }
    TimeWindow intersect(const TimeWindow& other) const {
        return {std::max(start_day, other.start_day), std::min(end_day, other.end_day)};
    }
    bool operator==(const TimeWindow&) const = default;

    std::string to_string() const {
        return "[" + std::to_string(start_day) + ", " + std::to_string(end_day) + ")";
    }
};

inline TimeWindow months_window(int start_month, int end_month) {
    return {start_month * kDaysPerMonth, end_month * kDaysPerMonth};
}

struct Utterance {
    std::string device_id;
    int day = 0;
    std::vector<uint32_t> tokens;

    bool operator==(const Utterance&) const = default;
};

struct DeviceShard {
    std::string device_id;
    std::vector<Utterance> utterances;

    size_t size() const { return utterances.size(); }
    bool empty() const { return utterances.empty(); }
    bool operator==(const DeviceShard&) const = default;
};

/// Shards are kept sorted by device id; ids are unique.
struct Population {
    std::vector<DeviceShard> shards;
    uint32_t vocab_size = 0;
    TimeWindow time_range;

    size_t device_count() const { return shards.size(); }
    size_t total_utterances() const {
        size_t n = 0;
        for (const auto& s : shards) n += s.size();
        return n;
    }
    const DeviceShard* find(std::string_view device_id) const {
        auto it = std::lower_bound(shards.begin(), shards.end(), device_id,
                                   [](const DeviceShard& s, std::string_view id) { return s.device_id < id; });
        if (it == shards.end() || it->device_id != device_id) return nullptr;
        return &*it;
    }
    bool operator==(const Population&) const = default;
};

struct ActivityDistribution {
    double zipf_exponent = 1.3;
    size_t min_count = 1;
    size_t max_count = 2000;
};

struct DatasetSpec {
    size_t device_count = 1000;
    uint32_t vocab_size = 200;
    int months = 12;
    ActivityDistribution activity;
    /// Weight of the device-local token distribution vs. the shared one.
    double mixing_alpha = 0.5;
    /// Probability that a generated utterance is a fresh sequence rather
    /// than a verbatim copy of an earlier one.
    double novelty_rate = 0.3;
    uint64_t seed = 1;
};

inline void validate_spec(const DatasetSpec& spec) {
    if (spec.device_count == 0) throw std::invalid_argument("dataset spec: device_count must be >= 1");
    if (spec.vocab_size < 2) throw std::invalid_argument("dataset spec: vocab_size must be >= 2");
    if (spec.months < 1) throw std::invalid_argument("dataset spec: months must be >= 1");
    if (spec.activity.min_count < 1)
        throw std::invalid_argument("dataset spec: min_count must be >= 1");
    if (spec.activity.min_count > spec.activity.max_count)
        throw std::invalid_argument("dataset spec: min_count must not exceed max_count");
    if (!(spec.activity.zipf_exponent >= 0.0))
        throw std::invalid_argument("dataset spec: zipf_exponent must be >= 0");
    if (spec.mixing_alpha < 0.0 || spec.mixing_alpha > 1.0)
        throw std::invalid_argument("dataset spec: mixing_alpha must be in [0, 1]");
    if (spec.novelty_rate < 0.0 || spec.novelty_rate > 1.0)
        throw std::invalid_argument("dataset spec: novelty_rate must be in [0, 1]");
}

namespace detail {

/// Cumulative table for a categorical with weights w_k, sampled by inverse CDF.
class CumulativeSampler {
public:
    explicit CumulativeSampler(std::vector<double> weights) : cum_(std::move(weights)) {
        double total = 0.0;
        for (double& w : cum_) {
            total += w;
            w = total;
        }
        total_ = total;
    }
    size_t draw(std::mt19937_64& rng) const {
        const double u = draw_unit(rng) * total_;
        const auto it = std::lower_bound(cum_.begin(), cum_.end(), u);
        return it == cum_.end() ? cum_.size() - 1 : static_cast<size_t>(it - cum_.begin());
    }

private:
    std::vector<double> cum_;
    double total_ = 0.0;
};

inline std::string device_name(size_t index, size_t device_count) {
    const size_t width = std::to_string(device_count == 0 ? 0 : device_count - 1).size();
    std::string digits = std::to_string(index);
    return "d" + std::string(width - digits.size(), '0') + digits;
}

}  // namespace detail

/// Synthetic heterogeneous population: device activity follows a truncated
/// Zipf law, per-device token distributions are an alpha-mixture of a
/// device-specific categorical and a shared one, and a 1 - novelty_rate
/// fraction of utterances are verbatim copies of earlier ones (from the
/// device's own history or the global pool), which makes cross-period
/// repetition measurable.
inline Population generate_population(const DatasetSpec& spec) {
    validate_spec(spec);
    std::mt19937_64 rng(splitmix64(spec.seed));

    const size_t m_count = spec.device_count;
    const uint32_t vocab = spec.vocab_size;
    const TimeWindow range = {0, spec.months * kDaysPerMonth};

    // Per-device utterance counts from the truncated Zipf law on
    // [min_count, max_count]: P(k) proportional to k^-s.
    const size_t support = spec.activity.max_count - spec.activity.min_count + 1;
    std::vector<double> count_weights(support);
    for (size_t i = 0; i < support; ++i) {
        const double k = static_cast<double>(spec.activity.min_count + i);
        count_weights[i] = std::pow(k, -spec.activity.zipf_exponent);
    }
    detail::CumulativeSampler count_sampler(std::move(count_weights));

    std::vector<size_t> counts(m_count);
    for (size_t m = 0; m < m_count; ++m)
        counts[m] = spec.activity.min_count + count_sampler.draw(rng);

    // Token rank distribution (shared shape): P(rank r) proportional to 1/(r+1).
    std::vector<double> token_weights(vocab);
    for (uint32_t r = 0; r < vocab; ++r) token_weights[r] = 1.0 / (r + 1.0);
    detail::CumulativeSampler token_sampler(std::move(token_weights));

    // Device-specific distributions permute the shared ranks.
    std::vector<std::vector<uint32_t>> device_perm(m_count);
    for (size_t m = 0; m < m_count; ++m) {
        auto& perm = device_perm[m];
        perm.resize(vocab);
        std::iota(perm.begin(), perm.end(), 0u);
        shuffle_values(rng, perm);
    }

    struct Slot {
        uint32_t device;
        int day;
        uint32_t seq;
    };
    std::vector<Slot> slots;
    slots.reserve(std::accumulate(counts.begin(), counts.end(), size_t{0}));
    for (size_t m = 0; m < m_count; ++m) {
        for (uint32_t k = 0; k < counts[m]; ++k) {
            const int day = static_cast<int>(draw_int(rng, range.start_day, range.end_day - 1));
            slots.push_back({static_cast<uint32_t>(m), day, k});
        }
    }
    // Content is generated in chronological order so that copies always
    // replicate utterances that exist earlier in time.
    std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
        return std::tie(a.day, a.device, a.seq) < std::tie(b.day, b.device, b.seq);
    });

    std::vector<std::vector<uint32_t>> sequences(slots.size());
    std::vector<std::vector<size_t>> self_pool(m_count);
    std::vector<size_t> global_pool;
    global_pool.reserve(slots.size());

    constexpr int kMinUtteranceLen = 3;
    constexpr int kMaxUtteranceLen = 12;

    for (size_t i = 0; i < slots.size(); ++i) {
        const uint32_t m = slots[i].device;
        bool fresh = draw_unit(rng) < spec.novelty_rate;
        const size_t* source = nullptr;
        if (!fresh) {
            const bool prefer_self = draw_unit(rng) < 0.5;
            const auto& self = self_pool[m];
            if (prefer_self && !self.empty()) {
                source = &self[draw_below(rng, self.size())];
            } else if (!global_pool.empty()) {
                source = &global_pool[draw_below(rng, global_pool.size())];
            } else if (!self.empty()) {
                source = &self[draw_below(rng, self.size())];
            } else {
                fresh = true;
            }
        }
        if (fresh) {
            const int len = static_cast<int>(draw_int(rng, kMinUtteranceLen, kMaxUtteranceLen));
            auto& seq = sequences[i];
            seq.reserve(static_cast<size_t>(len));
            for (int t = 0; t < len; ++t) {
                const size_t rank = token_sampler.draw(rng);
                const bool local = draw_unit(rng) < spec.mixing_alpha;
                seq.push_back(local ? device_perm[m][rank] : static_cast<uint32_t>(rank));
            }
        } else {
            sequences[i] = sequences[*source];
        }
        self_pool[m].push_back(i);
        global_pool.push_back(i);
    }

    Population pop;
    pop.vocab_size = vocab;
    pop.time_range = range;
    pop.shards.resize(m_count);
    for (size_t m = 0; m < m_count; ++m) {
        pop.shards[m].device_id = detail::device_name(m, m_count);
        pop.shards[m].utterances.reserve(counts[m]);
    }
    for (size_t i = 0; i < slots.size(); ++i) {
        auto& shard = pop.shards[slots[i].device];
        shard.utterances.push_back({shard.device_id, slots[i].day, std::move(sequences[i])});
    }
    return pop;
}

/// Keeps only utterances with timestamps in w. Devices emptied by the filter
/// are retained with empty shards. The result's time range is the
/// intersection of w and the population's range.
inline Population restrict_to_window(const Population& pop, const TimeWindow& w) {
    if (w.start_day >= w.end_day)
        throw std::invalid_argument("time window " + w.to_string() + " is empty");
    if (!w.overlaps(pop.time_range))
        throw std::invalid_argument("window " + w.to_string() + " is disjoint from population range " +
                                    pop.time_range.to_string());
    Population out;
    out.vocab_size = pop.vocab_size;
    out.time_range = w.intersect(pop.time_range);
    out.shards.reserve(pop.shards.size());
    for (const auto& shard : pop.shards) {
        DeviceShard filtered;
        filtered.device_id = shard.device_id;
        for (const auto& u : shard.utterances)
            if (out.time_range.contains(u.day)) filtered.utterances.push_back(u);
        out.shards.push_back(std::move(filtered));
    }
    return out;
}

/// Splits the train window into consecutive segments of delta_months each,
/// in chronological order. The segment utterance multisets partition the
/// window's data.
inline std::vector<Population> segment_periods(const Population& pop, const TimeWindow& train_window,
                                               int delta_months) {
    if (delta_months < 1) throw std::invalid_argument("delta_months must be >= 1");
    if (train_window.start_day >= train_window.end_day)
        throw std::invalid_argument("train window " + train_window.to_string() + " is empty");
    const int segment_days = delta_months * kDaysPerMonth;
    if (train_window.length() % segment_days != 0)
        throw std::invalid_argument("train window length " + std::to_string(train_window.length()) +
                                    " days is not divisible by segments of " +
                                    std::to_string(segment_days) + " days");
    const int n_segments = train_window.length() / segment_days;
    std::vector<Population> segments;
    segments.reserve(static_cast<size_t>(n_segments));
    for (int k = 0; k < n_segments; ++k) {
        const TimeWindow w = {train_window.start_day + k * segment_days,
                              train_window.start_day + (k + 1) * segment_days};
        segments.push_back(restrict_to_window(pop, w));
    }
    return segments;
}

/// Per-device utterance counts n_m.
inline std::map<std::string, size_t> device_counts(const Population& pop) {
    std::map<std::string, size_t> counts;
    for (const auto& shard : pop.shards) counts[shard.device_id] = shard.size();
    return counts;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence. Line 0 is the header; each further line is one
// utterance. Devices whose shards are empty have no representation in the
// format and are therefore dropped by a save/load round trip.
// ---------------------------------------------------------------------------

inline std::string serialize_population(const Population& pop) {
    nlohmann::json header = {{"vocab_size", pop.vocab_size},
                             {"start_day", pop.time_range.start_day},
                             {"end_day", pop.time_range.end_day}};
    std::string out = header.dump();
    out.push_back('\n');
    for (const auto& shard : pop.shards) {
        for (const auto& u : shard.utterances) {
            nlohmann::json line = {{"device", u.device_id}, {"day", u.day}, {"tokens", u.tokens}};
            out += line.dump();
            out.push_back('\n');
        }
    }
    return out;
}

inline void save_population(const Population& pop, const std::filesystem::path& path) {
    atomic_write_file(path, serialize_population(pop));
}

inline Population parse_population(const std::string& content, const std::string& origin,
                                   std::vector<std::string>* warnings = nullptr) {
    const auto fail = [&](size_t line_no, const std::string& msg) -> std::runtime_error {
        return std::runtime_error(origin + ":" + std::to_string(line_no) + ": " + msg);
    };
    const auto warn = [&](const std::string& msg) {
        if (warnings) warnings->push_back(msg);
    };

    Population pop;
    if (content.empty()) {
        warn("empty dataset file: population has 0 devices");
        return pop;
    }

    std::istringstream in(content);
    std::string line;
    size_t line_no = 0;

    if (!std::getline(in, line)) throw fail(1, "missing header line");
    ++line_no;
    try {
        const auto header = nlohmann::json::parse(line);
        if (!header.contains("vocab_size") || !header.contains("start_day") || !header.contains("end_day"))
            throw fail(1, "header must contain vocab_size, start_day, end_day");
        pop.vocab_size = header.at("vocab_size").get<uint32_t>();
        pop.time_range = {header.at("start_day").get<int>(), header.at("end_day").get<int>()};
    } catch (const nlohmann::json::exception& e) {
        throw fail(1, std::string("malformed header: ") + e.what());
    }
    if (pop.vocab_size < 2) throw fail(1, "vocab_size must be >= 2");
    if (pop.time_range.start_day >= pop.time_range.end_day)
        throw fail(1, "header time range is empty");

    std::map<std::string, std::vector<Utterance>> by_device;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json entry;
        try {
            entry = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw fail(line_no, std::string("malformed JSON: ") + e.what());
        }
        if (!entry.contains("device") || !entry.at("device").is_string())
            throw fail(line_no, "missing \"device\" field");
        if (!entry.contains("day") || !entry.at("day").is_number_integer())
            throw fail(line_no, "missing \"day\" field");
        if (!entry.contains("tokens") || !entry.at("tokens").is_array())
            throw fail(line_no, "missing \"tokens\" field");

        Utterance u;
        u.device_id = entry.at("device").get<std::string>();
        u.day = entry.at("day").get<int>();
        if (!pop.time_range.contains(u.day))
            throw fail(line_no, "day " + std::to_string(u.day) + " outside declared range " +
                                    pop.time_range.to_string());
        const auto& tokens = entry.at("tokens");
        if (tokens.empty()) throw fail(line_no, "\"tokens\" must be nonempty");
        u.tokens.reserve(tokens.size());
        for (const auto& t : tokens) {
            if (!t.is_number_integer() || t.get<int64_t>() < 0)
                throw fail(line_no, "token ids must be nonnegative integers");
            const auto id = t.get<uint64_t>();
            if (id >= pop.vocab_size)
                throw fail(line_no, "token id " + std::to_string(id) + " >= vocab_size " +
                                        std::to_string(pop.vocab_size));
            u.tokens.push_back(static_cast<uint32_t>(id));
        }
        by_device[u.device_id].push_back(std::move(u));
    }

    if (by_device.empty()) warn("dataset has a header but no utterances: population has 0 devices");
    pop.shards.reserve(by_device.size());
    for (auto& [id, utterances] : by_device) pop.shards.push_back({id, std::move(utterances)});
    return pop;
}

inline Population load_population(const std::filesystem::path& path,
                                  std::vector<std::string>* warnings = nullptr) {
    return parse_population(read_file(path), path.string(), warnings);
}

}  // namespace fedsim
