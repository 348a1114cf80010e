#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsim/common.hpp"
#include "fedsim/population.hpp"

namespace fedsim {

/// Two small local models with identical interfaces:
///  - logistic: per-context softmax table, weight[(V+1) x V] + bias[V].
///    Convex in the parameters, which makes it a good optimization oracle.
///  - bigram: embedding[(V+1) x d] -> output[d x V] -> softmax + bias[V].
/// Contexts range over the extended vocabulary (a begin-of-sequence token
/// with id V precedes each utterance); targets range over [0, V).
enum class ModelKind { logistic, bigram };

inline std::string model_kind_name(ModelKind kind) {
    return kind == ModelKind::logistic ? "logistic" : "bigram";
}

inline ModelKind parse_model_kind(const std::string& name) {
    if (name == "logistic") return ModelKind::logistic;
    if (name == "bigram") return ModelKind::bigram;
    throw std::invalid_argument("unknown model kind \"" + name + "\"");
}

struct ParamSlice {
    std::string name;
    size_t rows = 0;
    size_t cols = 0;
    size_t offset = 0;

    size_t size() const { return rows * cols; }
    bool operator==(const ParamSlice&) const = default;
};

inline std::vector<ParamSlice> model_layout(ModelKind kind, uint32_t vocab_size, uint32_t dim) {
    const size_t v = vocab_size;
    const size_t d = dim;
    std::vector<ParamSlice> layout;
    if (kind == ModelKind::logistic) {
        layout.push_back({"weight", v + 1, v, 0});
        layout.push_back({"bias", 1, v, (v + 1) * v});
    } else {
        layout.push_back({"embedding", v + 1, d, 0});
        layout.push_back({"output", d, v, (v + 1) * d});
        layout.push_back({"bias", 1, v, (v + 1) * d + d * v});
    }
    return layout;
}

inline size_t model_param_count(ModelKind kind, uint32_t vocab_size, uint32_t dim) {
    size_t total = 0;
    for (const auto& s : model_layout(kind, vocab_size, dim)) total += s.size();
    return total;
}

/// Flat parameter vector plus the shape metadata needed to interpret it.
struct ModelParams {
    ModelKind kind = ModelKind::bigram;
    uint32_t vocab_size = 0;
    uint32_t dim = 0;
    std::vector<double> values;

    uint32_t bos_id() const { return vocab_size; }
    std::vector<ParamSlice> layout() const { return model_layout(kind, vocab_size, dim); }
    bool same_layout(const ModelParams& other) const {
        return kind == other.kind && vocab_size == other.vocab_size && dim == other.dim &&
               values.size() == other.values.size();
    }
    bool operator==(const ModelParams&) const = default;
};

inline bool params_finite(const ModelParams& params) {
    // x * 0 is 0 for every finite x and NaN for infinities and NaNs, so the
    // accumulators are 0 iff all values are finite. Eight explicit lanes
    // keep the reduction out of a serial dependency chain.
    const double* v = params.values.data();
    const size_t n = params.values.size();
    double acc[8] = {};
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (size_t lane = 0; lane < 8; ++lane) acc[lane] += v[i + lane] * 0.0;
    for (; i < n; ++i) acc[0] += v[i] * 0.0;
    const double total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    return total == 0.0;
}

inline uint64_t params_hash(const ModelParams& params) {
    uint64_t h = fnv1a64(model_kind_name(params.kind));
    h = mix_seed(h, params.vocab_size);
    h = mix_seed(h, params.dim);
    for (double v : params.values) h = mix_seed(h, std::bit_cast<uint64_t>(v));
    return h;
}

/// Scaled uniform initialization: non-bias slices U(-0.5, 0.5)/sqrt(cols),
/// bias slices zero. Deterministic per seed.
inline ModelParams init_params(ModelKind kind, uint32_t vocab_size, uint32_t dim, uint64_t seed) {
    if (vocab_size < 2) throw std::invalid_argument("init_params: vocab_size must be >= 2");
    if (dim < 1) throw std::invalid_argument("init_params: dim must be >= 1");
    ModelParams params{kind, vocab_size, dim, {}};
    params.values.resize(model_param_count(kind, vocab_size, dim));
    std::mt19937_64 rng(splitmix64(seed));
    for (const auto& slice : model_layout(kind, vocab_size, dim)) {
        if (slice.name == "bias") continue;
        const double scale = 1.0 / std::sqrt(static_cast<double>(slice.cols));
        for (size_t i = 0; i < slice.size(); ++i)
            params.values[slice.offset + i] = (draw_unit(rng) - 0.5) * scale;
    }
    return params;
}

/// (context, target) pair from a sliding bigram window.
struct TokenPair {
    uint32_t context = 0;
    uint32_t target = 0;
    bool operator==(const TokenPair&) const = default;
};

using Batch = std::vector<TokenPair>;

inline void append_pairs(const Utterance& u, uint32_t vocab_size, Batch& out) {
    uint32_t context = vocab_size;  // begin-of-sequence
    for (uint32_t token : u.tokens) {
        out.push_back({context, token});
        context = token;
    }
}

inline Batch build_pairs(std::span<const Utterance> utterances, uint32_t vocab_size) {
    Batch batch;
    size_t total = 0;
    for (const auto& u : utterances) total += u.tokens.size();
    batch.reserve(total);
    for (const auto& u : utterances) append_pairs(u, vocab_size, batch);
    return batch;
}

namespace detail {

inline void check_model_inputs(const ModelParams& params, std::span<const TokenPair> batch) {
    if (batch.empty()) throw std::invalid_argument("batch must be nonempty");
    if (params.values.empty()) throw std::invalid_argument("model parameters are empty");
    if (!params_finite(params)) throw std::invalid_argument("model parameters are not finite");
}

/// Fills logits (length V) for one context token.
inline void forward_logits(const ModelParams& params, uint32_t context, double* logits) {
    const size_t v = params.vocab_size;
    const double* values = params.values.data();
    if (params.kind == ModelKind::logistic) {
        const double* row = values + static_cast<size_t>(context) * v;
        const double* bias = values + (v + 1) * v;
        for (size_t j = 0; j < v; ++j) logits[j] = row[j] + bias[j];
    } else {
        const size_t d = params.dim;
        const double* emb = values + static_cast<size_t>(context) * d;
        const double* output = values + (v + 1) * d;
        const double* bias = output + d * v;
        for (size_t j = 0; j < v; ++j) logits[j] = bias[j];
        for (size_t i = 0; i < d; ++i) {
            const double e = emb[i];
            const double* row = output + i * v;
            for (size_t j = 0; j < v; ++j) logits[j] += e * row[j];
        }
    }
}

inline void forward_logits(const ModelParams& params, uint32_t context, std::vector<double>& logits) {
    forward_logits(params, context, logits.data());
}

/// exp(x) for x <= 0 via the classic range-reduced rational approximation
/// (error under 2 ulp). Branch-free plain arithmetic with no libm call, so
/// the softmax loop below auto-vectorizes; softmax over the vocabulary is
/// the training hot spot. Inputs are clamped at -708, where the true value
/// already underflows any realistic softmax normalizer.
inline double exp_unit(double x) {
    constexpr double kLog2E = 1.4426950408889634073599;
    constexpr double kMagic = 6755399441055744.0;  // 1.5 * 2^52: adding rounds to integer
    constexpr double kC1 = 6.93145751953125e-1;
    constexpr double kC2 = 1.42860682030941723212e-6;
    constexpr double kP0 = 1.26177193074810590878e-4;
    constexpr double kP1 = 3.02994407707441961300e-2;
    constexpr double kP2 = 9.99999999999999999910e-1;
    constexpr double kQ0 = 3.00198505138664455042e-6;
    constexpr double kQ1 = 2.52448340349684104192e-3;
    constexpr double kQ2 = 2.27265548208155028766e-1;
    constexpr double kQ3 = 2.00000000000000000005e0;

    x = std::max(x, -708.0);
    const double t = x * kLog2E + kMagic;  // low mantissa bits now hold round(x * log2 e)
    const double n = t - kMagic;
    x -= n * kC1;
    x -= n * kC2;
    const double xx = x * x;
    const double px = x * ((kP0 * xx + kP1) * xx + kP2);
    const double qx = ((kQ0 * xx + kQ1) * xx + kQ2) * xx + kQ3;
    const double e = 1.0 + 2.0 * px / (qx - px);
    const uint64_t pow2n = (std::bit_cast<uint64_t>(t) + 1023) << 52;
    return e * std::bit_cast<double>(pow2n);
}

/// Maximum over a row without the branchy serial chain of max_element.
inline double row_max(const double* x, size_t n) {
    double acc[8] = {x[0], x[0], x[0], x[0], x[0], x[0], x[0], x[0]};
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (size_t lane = 0; lane < 8; ++lane) acc[lane] = std::max(acc[lane], x[i + lane]);
    for (; i < n; ++i) acc[0] = std::max(acc[0], x[i]);
    double m = acc[0];
    for (size_t lane = 1; lane < 8; ++lane) m = std::max(m, acc[lane]);
    return m;
}

/// Eight-lane sum with a fixed combine order; deterministic and pipelined.
inline double row_sum(const double* x, size_t n) {
    double acc[8] = {};
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (size_t lane = 0; lane < 8; ++lane) acc[lane] += x[i + lane];
    for (; i < n; ++i) acc[0] += x[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

/// Converts logits to softmax probabilities in place; returns the
/// log-sum-exp needed for the NLL.
inline double softmax_inplace(double* logits, size_t v) {
    const double m = row_max(logits, v);
    for (size_t j = 0; j < v; ++j) logits[j] = exp_unit(logits[j] - m);
    const double total = row_sum(logits, v);
    const double lse = m + std::log(total);
    const double inv_total = 1.0 / total;
    for (size_t j = 0; j < v; ++j) logits[j] *= inv_total;
    return lse;
}

inline double softmax_inplace(std::vector<double>& logits) {
    return softmax_inplace(logits.data(), logits.size());
}

inline double dot_product(const double* a, const double* b, size_t n) {
    double acc[8] = {};
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (size_t lane = 0; lane < 8; ++lane) acc[lane] += a[i + lane] * b[i + lane];
    for (; i < n; ++i) acc[0] += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

/// Order-independent sum: identical for any permutation of the same values.
inline double sorted_sum(std::vector<double>& values) {
    std::sort(values.begin(), values.end());
    double total = 0.0;
    for (double v : values) total += v;
    return total;
}

}  // namespace detail

/// Mean cross-entropy (nats) and its gradient over the batch, fused. The
/// gradient is accumulated into grad (resized and zeroed here).
///
/// The bigram backward pass is blocked over the batch: per-pair dz rows are
/// buffered and the output-matrix gradient dO = E^T DZ and embedding
/// gradient DE = DZ O^T are formed as tiled matrix products, so the d x V
/// matrices are swept once per batch rather than once per pair.
inline double loss_and_grad(const ModelParams& params, std::span<const TokenPair> batch,
                            std::vector<double>& grad) {
    detail::check_model_inputs(params, batch);
    const size_t v = params.vocab_size;
    const size_t b = batch.size();
    grad.assign(params.values.size(), 0.0);
    std::vector<double> nlls;
    nlls.reserve(b);
    double* g = grad.data();

    if (params.kind == ModelKind::logistic) {
        std::vector<double> probs(v);
        double* grad_bias = g + (v + 1) * v;
        for (const auto& pair : batch) {
            detail::forward_logits(params, pair.context, probs.data());
            const double z_target = probs[pair.target];
            nlls.push_back(detail::softmax_inplace(probs) - z_target);
            probs[pair.target] -= 1.0;  // dz = p - onehot(target)
            double* grad_row = g + static_cast<size_t>(pair.context) * v;
            for (size_t j = 0; j < v; ++j) {
                grad_row[j] += probs[j];
                grad_bias[j] += probs[j];
            }
        }
    } else {
        const size_t d = params.dim;
        const double* values = params.values.data();
        const double* output = values + (v + 1) * d;
        double* grad_output = g + (v + 1) * d;
        double* grad_bias = grad_output + d * v;

        std::vector<double> dz(b * v);
        std::vector<double> context_emb(b * d);
        for (size_t k = 0; k < b; ++k) {
            double* row = dz.data() + k * v;
            detail::forward_logits(params, batch[k].context, row);
            const double z_target = row[batch[k].target];
            nlls.push_back(detail::softmax_inplace(row, v) - z_target);
            row[batch[k].target] -= 1.0;
            const double* emb = values + static_cast<size_t>(batch[k].context) * d;
            std::copy(emb, emb + d, context_emb.data() + k * d);
        }

        for (size_t k = 0; k < b; ++k) {
            const double* row = dz.data() + k * v;
            for (size_t j = 0; j < v; ++j) grad_bias[j] += row[j];
        }

        constexpr size_t kTile = 48;
        std::vector<double> grad_emb_rows(b * d, 0.0);
        for (size_t jt = 0; jt < v; jt += kTile) {
            const size_t width = std::min(kTile, v - jt);
            for (size_t k = 0; k < b; ++k) {
                const double* dz_row = dz.data() + k * v + jt;
                const double* e_row = context_emb.data() + k * d;
                double* de_row = grad_emb_rows.data() + k * d;
                for (size_t i = 0; i < d; ++i) {
                    const double e = e_row[i];
                    const double* out_row = output + i * v + jt;
                    double* grad_out_row = grad_output + i * v + jt;
                    for (size_t j = 0; j < width; ++j) grad_out_row[j] += e * dz_row[j];
                    de_row[i] += detail::dot_product(out_row, dz_row, width);
                }
            }
        }
        for (size_t k = 0; k < b; ++k) {
            double* grad_emb = g + static_cast<size_t>(batch[k].context) * d;
            const double* de_row = grad_emb_rows.data() + k * d;
            for (size_t i = 0; i < d; ++i) grad_emb[i] += de_row[i];
        }
    }

    const double inv_b = 1.0 / static_cast<double>(b);
    for (double& x : grad) x *= inv_b;
    return detail::sorted_sum(nlls) * inv_b;
}

/// Mean cross-entropy in nats over the batch. Invariant under permutations
/// of the batch.
inline double loss(const ModelParams& params, std::span<const TokenPair> batch) {
    detail::check_model_inputs(params, batch);
    std::vector<double> probs(params.vocab_size);
    std::vector<double> nlls;
    nlls.reserve(batch.size());
    for (const auto& pair : batch) {
        detail::forward_logits(params, pair.context, probs);
        const double z_target = probs[pair.target];
        nlls.push_back(detail::softmax_inplace(probs) - z_target);
    }
    return detail::sorted_sum(nlls) / static_cast<double>(batch.size());
}

/// Analytic gradient of loss() with the same layout as the parameters.
inline std::vector<double> grad(const ModelParams& params, std::span<const TokenPair> batch) {
    std::vector<double> g;
    loss_and_grad(params, batch, g);
    return g;
}

/// One epoch of minibatch SGD over the shard's bigram pairs: shuffle,
/// partition into batches of at most batch_size, apply sequential steps.
/// Returns the updated parameters; the inputs are untouched. If mean_loss
/// is given it receives the pair-weighted mean of the pre-step batch losses.
inline ModelParams sgd_epoch(const ModelParams& params, std::span<const Utterance> shard, double lr,
                             size_t batch_size, std::mt19937_64& rng, double* mean_loss = nullptr) {
    if (shard.empty()) throw std::invalid_argument("sgd_epoch: shard must be nonempty");
    if (lr < 0.0) throw std::invalid_argument("sgd_epoch: learning rate must be nonnegative");
    if (batch_size < 1) throw std::invalid_argument("sgd_epoch: batch size must be >= 1");

    Batch pairs = build_pairs(shard, params.vocab_size);
    shuffle_values(rng, pairs);

    ModelParams out = params;
    std::vector<double> g;
    double loss_total = 0.0;
    for (size_t begin = 0; begin < pairs.size(); begin += batch_size) {
        const size_t count = std::min(batch_size, pairs.size() - begin);
        const std::span<const TokenPair> batch(pairs.data() + begin, count);
        const double batch_loss = loss_and_grad(out, batch, g);
        loss_total += batch_loss * static_cast<double>(count);
        if (lr != 0.0)
            for (size_t i = 0; i < g.size(); ++i) out.values[i] -= lr * g[i];
    }
    if (mean_loss) *mean_loss = loss_total / static_cast<double>(pairs.size());
    return out;
}

/// exp(total NLL in nats / total predicted-token count), pooled over all
/// utterances. Invariant under utterance reordering.
inline double perplexity(const ModelParams& params, std::span<const Utterance* const> utterances) {
    if (utterances.empty()) throw std::invalid_argument("perplexity: no utterances");
    if (params.values.empty() || !params_finite(params))
        throw std::invalid_argument("model parameters are not finite");
    std::vector<double> per_utterance;
    per_utterance.reserve(utterances.size());
    std::vector<double> probs(params.vocab_size);
    size_t total_tokens = 0;
    for (const Utterance* u : utterances) {
        double nll = 0.0;
        uint32_t context = params.bos_id();
        for (uint32_t token : u->tokens) {
            detail::forward_logits(params, context, probs);
            const double z_target = probs[token];
            nll += detail::softmax_inplace(probs) - z_target;
            context = token;
        }
        total_tokens += u->tokens.size();
        per_utterance.push_back(nll);
    }
    if (total_tokens == 0) throw std::invalid_argument("perplexity: no tokens");
    return std::exp(detail::sorted_sum(per_utterance) / static_cast<double>(total_tokens));
}

inline double perplexity(const ModelParams& params, std::span<const Utterance> utterances) {
    std::vector<const Utterance*> ptrs;
    ptrs.reserve(utterances.size());
    for (const auto& u : utterances) ptrs.push_back(&u);
    return perplexity(params, ptrs);
}

/// Max relative error between the analytic gradient and central finite
/// differences, with error = |ga - gn| / max(1, |ga|, |gn|). Checks every
/// coordinate, or a deterministic 200-coordinate subsample above 10^4
/// parameters.
inline double grad_check(const ModelParams& params, std::span<const TokenPair> batch, double epsilon,
                         uint64_t subsample_seed = 0) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("grad_check: epsilon must be positive");
    detail::check_model_inputs(params, batch);

    const std::vector<double> analytic = grad(params, batch);
    std::vector<size_t> coords;
    if (params.values.size() <= 10000) {
        coords.resize(params.values.size());
        std::iota(coords.begin(), coords.end(), size_t{0});
    } else {
        std::mt19937_64 rng(splitmix64(subsample_seed));
        coords.reserve(200);
        while (coords.size() < 200) {
            const size_t c = static_cast<size_t>(draw_below(rng, params.values.size()));
            if (std::find(coords.begin(), coords.end(), c) == coords.end()) coords.push_back(c);
        }
    }

    ModelParams probe = params;
    double worst = 0.0;
    for (size_t c : coords) {
        const double original = probe.values[c];
        probe.values[c] = original + epsilon;
        const double up = loss(probe, batch);
        probe.values[c] = original - epsilon;
        const double down = loss(probe, batch);
        probe.values[c] = original;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double denom = std::max({1.0, std::abs(analytic[c]), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic[c] - numeric) / denom);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Checkpoint format: one JSON header line {kind, vocab_size, dim, layout}
// followed by the raw little-endian float64 values in layout order.
// ---------------------------------------------------------------------------

inline std::string serialize_params(const ModelParams& params) {
    nlohmann::json layout = nlohmann::json::array();
    for (const auto& s : params.layout())
        layout.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
    nlohmann::json header = {{"kind", model_kind_name(params.kind)},
                             {"vocab_size", params.vocab_size},
                             {"dim", params.dim},
                             {"layout", layout}};
    std::string out = header.dump();
    out.push_back('\n');
    out.reserve(out.size() + params.values.size() * 8);
    for (double v : params.values) append_f64_le(out, v);
    return out;
}

inline void save_params(const ModelParams& params, const std::filesystem::path& path) {
    atomic_write_file(path, serialize_params(params));
}

inline ModelParams deserialize_params(const std::string& content, const std::string& origin) {
    const size_t newline = content.find('\n');
    if (newline == std::string::npos)
        throw std::runtime_error(origin + ": missing checkpoint header line");
    ModelParams params;
    try {
        const auto header = nlohmann::json::parse(content.substr(0, newline));
        params.kind = parse_model_kind(header.at("kind").get<std::string>());
        params.vocab_size = header.at("vocab_size").get<uint32_t>();
        params.dim = header.at("dim").get<uint32_t>();
        const auto expected = model_layout(params.kind, params.vocab_size, params.dim);
        const auto& layout = header.at("layout");
        if (layout.size() != expected.size())
            throw std::runtime_error("layout slice count mismatch");
        for (size_t i = 0; i < expected.size(); ++i) {
            if (layout[i].at("name").get<std::string>() != expected[i].name ||
                layout[i].at("rows").get<size_t>() != expected[i].rows ||
                layout[i].at("cols").get<size_t>() != expected[i].cols)
                throw std::runtime_error("layout mismatch for slice \"" + expected[i].name + "\"");
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(origin + ": malformed checkpoint header: " + e.what());
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(origin + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(origin + ": " + e.what());
    }

    const size_t count = model_param_count(params.kind, params.vocab_size, params.dim);
    const size_t payload = content.size() - newline - 1;
    if (payload != count * 8)
        throw std::runtime_error(origin + ": expected " + std::to_string(count * 8) +
                                 " value bytes, found " + std::to_string(payload));
    params.values.resize(count);
    const auto* bytes = reinterpret_cast<const unsigned char*>(content.data() + newline + 1);
    for (size_t i = 0; i < count; ++i) params.values[i] = read_f64_le(bytes + i * 8);
    if (!params_finite(params)) throw std::runtime_error(origin + ": checkpoint contains non-finite values");
    return params;
}

inline ModelParams load_params(const std::filesystem::path& path) {
    return deserialize_params(read_file(path), path.string());
}

}  // namespace fedsim
