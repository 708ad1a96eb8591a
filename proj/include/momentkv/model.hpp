// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "momentkv/attention_row.hpp"
#include "momentkv/cache_core.hpp"
#include "momentkv/error.hpp"
#include "momentkv/policies.hpp"

namespace momentkv {

/// Shape and seed of the toy decoder. Weights are a pure function of this.
struct ModelSpec {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 3;
    std::size_t vocab_size = 256;
    std::size_t d_ff = 128;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return d_model / n_heads; }
    PoolShape pool_shape() const { return {n_heads, head_dim()}; }

    void validate() const {
        if (d_model == 0 || n_heads == 0 || n_layers == 0 || vocab_size == 0 || d_ff == 0) {
            throw Error(ErrorCode::InvalidConfig, "model dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw Error(ErrorCode::InvalidConfig, "d_model must be divisible by n_heads");
        }
        if (d_model % 2 != 0) {
            throw Error(ErrorCode::InvalidConfig, "d_model must be even for the sinusoidal encoding");
        }
    }

    bool operator==(const ModelSpec&) const = default;
};

/// Fixed sinusoidal encoding of an absolute position:
/// [sin(p / 10000^(2i/d)), cos(p / 10000^(2i/d))] for i = 0 .. d/2 - 1.
inline std::vector<float> positional_encode(std::int64_t position, std::size_t d_model) {
    std::vector<float> out(d_model);
    for (std::size_t i = 0; i + 1 < d_model; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
        const double angle = static_cast<double>(position) * freq;
        out[i] = static_cast<float>(std::sin(angle));
        out[i + 1] = static_cast<float>(std::cos(angle));
    }
    return out;
}

namespace detail {

/// splitmix64; portable across standard libraries, unlike std::*_distribution.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform in [-1, 1).
    double symmetric() { return 2.0 * uniform() - 1.0; }

private:
    std::uint64_t state_;
};

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    std::span<const float> row(std::size_t r) const { return std::span<const float>(data).subspan(r * cols, cols); }

    /// Uniform entries with variance 1 / fan_in (scaled by `gain`).
    static Matrix random(std::size_t r, std::size_t c, SplitMix64& rng, double gain = 1.0) {
        Matrix m(r, c);
        const double bound = gain * std::sqrt(3.0 / static_cast<double>(r));
        for (auto& v : m.data) {
            v = static_cast<float>(bound * rng.symmetric());
        }
        return m;
    }

    bool operator==(const Matrix&) const = default;
};

/// y = x^T W, with x of length W.rows.
inline void vec_mat(std::span<const float> x, const Matrix& w, std::span<float> y) {
    std::fill(y.begin(), y.end(), 0.0f);
    for (std::size_t r = 0; r < w.rows; ++r) {
        const float xr = x[r];
        const float* wr = w.data.data() + r * w.cols;
        for (std::size_t c = 0; c < w.cols; ++c) {
            y[c] += xr * wr[c];
        }
    }
}

inline void layer_norm(std::span<const float> x, std::span<float> y) {
    double mean = 0.0;
    for (const float v : x) {
        mean += v;
    }
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (const float v : x) {
        var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = static_cast<float>((x[i] - mean) * inv);
    }
}

}  // namespace detail

struct LayerWeights {
    detail::Matrix wq, wk, wv, wo, w1, w2;
    bool operator==(const LayerWeights&) const = default;
};

/// Seeded random decoder-only transformer: pre-norm blocks of multi-head
/// attention followed by a ReLU feed-forward, tied to no checkpoint.
class ToyModel {
public:
    explicit ToyModel(const ModelSpec& spec) : spec_(spec) {
        spec_.validate();
        detail::SplitMix64 rng(spec_.seed);
        embedding_ = detail::Matrix::random(spec_.vocab_size, spec_.d_model, rng, std::sqrt(static_cast<double>(spec_.vocab_size)));
        layers_.reserve(spec_.n_layers);
        for (std::size_t l = 0; l < spec_.n_layers; ++l) {
            LayerWeights w;
            w.wq = detail::Matrix::random(spec_.d_model, spec_.d_model, rng);
            w.wk = detail::Matrix::random(spec_.d_model, spec_.d_model, rng);
            w.wv = detail::Matrix::random(spec_.d_model, spec_.d_model, rng);
            w.wo = detail::Matrix::random(spec_.d_model, spec_.d_model, rng, 0.5);
            w.w1 = detail::Matrix::random(spec_.d_model, spec_.d_ff, rng);
            w.w2 = detail::Matrix::random(spec_.d_ff, spec_.d_model, rng, 0.5);
            layers_.push_back(std::move(w));
        }
        unembedding_ = detail::Matrix::random(spec_.d_model, spec_.vocab_size, rng);
    }

    const ModelSpec& spec() const { return spec_; }
    const std::vector<LayerWeights>& layers() const { return layers_; }
    const detail::Matrix& embedding() const { return embedding_; }
    const detail::Matrix& unembedding() const { return unembedding_; }

    bool same_weights(const ToyModel& other) const {
        return embedding_ == other.embedding_ && unembedding_ == other.unembedding_ && layers_ == other.layers_;
    }

    void check_token(std::int64_t token) const {
        if (token < 0 || static_cast<std::size_t>(token) >= spec_.vocab_size) {
            throw Error(ErrorCode::TokenOutOfVocab,
                        "token " + std::to_string(token) + " outside vocab of " + std::to_string(spec_.vocab_size));
        }
    }

    /// Embedding plus positional encoding of `token` at `position`.
    std::vector<float> embed(std::int64_t token, std::int64_t position) const {
        check_token(token);
        std::vector<float> x = positional_encode(position, spec_.d_model);
        const auto e = embedding_.row(static_cast<std::size_t>(token));
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += e[i];
        }
        return x;
    }

    struct Projections {
        std::vector<float> q, k, v;
    };

    Projections project(std::size_t layer, std::span<const float> hidden) const {
        const auto& w = layers_[layer];
        std::vector<float> normed(spec_.d_model);
        detail::layer_norm(hidden, normed);
        Projections p{std::vector<float>(spec_.d_model), std::vector<float>(spec_.d_model),
                      std::vector<float>(spec_.d_model)};
        detail::vec_mat(normed, w.wq, p.q);
        detail::vec_mat(normed, w.wk, p.k);
        detail::vec_mat(normed, w.wv, p.v);
        return p;
    }

    /// Multi-head attention of `q` over `count` slots fetched through
    /// `slot_at(i)`. Writes per-head weights (head-major, H x count) and
    /// returns the concatenated head outputs (d_model).
    template <typename SlotAt>
    std::vector<float> attend(std::span<const float> q, std::size_t count, SlotAt&& slot_at,
                              std::vector<float>& head_weights) const {
        const std::size_t hd = spec_.head_dim();
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
        head_weights.assign(spec_.n_heads * count, 0.0f);
        std::vector<float> out(spec_.d_model, 0.0f);
        for (std::size_t h = 0; h < spec_.n_heads; ++h) {
            const auto qh = q.subspan(h * hd, hd);
            float* weights = head_weights.data() + h * count;
            float max_logit = -INFINITY;
            for (std::size_t j = 0; j < count; ++j) {
                const auto kh = slot_at(j).key_head(h, hd);
                float dot = 0.0f;
                for (std::size_t d = 0; d < hd; ++d) {
                    dot += qh[d] * kh[d];
                }
                weights[j] = dot * scale;
                max_logit = std::max(max_logit, weights[j]);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < count; ++j) {
                weights[j] = std::exp(weights[j] - max_logit);
                denom += weights[j];
            }
            const float inv = static_cast<float>(1.0 / denom);
            float* oh = out.data() + h * hd;
            for (std::size_t j = 0; j < count; ++j) {
                weights[j] *= inv;
                const auto vh = slot_at(j).value_head(h, hd);
                for (std::size_t d = 0; d < hd; ++d) {
                    oh[d] += weights[j] * vh[d];
                }
            }
        }
        return out;
    }

    /// Residual update after attention: x += W_O a; x += W2 relu(W1 LN(x)).
    void finish_block(std::size_t layer, std::span<float> hidden, std::span<const float> attn_out) const {
        const auto& w = layers_[layer];
        std::vector<float> tmp(spec_.d_model);
        detail::vec_mat(attn_out, w.wo, tmp);
        for (std::size_t i = 0; i < hidden.size(); ++i) {
            hidden[i] += tmp[i];
        }
        std::vector<float> normed(spec_.d_model);
        detail::layer_norm(hidden, normed);
        std::vector<float> ff(spec_.d_ff);
        detail::vec_mat(normed, w.w1, ff);
        for (auto& v : ff) {
            v = std::max(v, 0.0f);
        }
        detail::vec_mat(ff, w.w2, tmp);
        for (std::size_t i = 0; i < hidden.size(); ++i) {
            hidden[i] += tmp[i];
        }
    }

    std::vector<float> logits(std::span<const float> hidden) const {
        std::vector<float> normed(spec_.d_model);
        detail::layer_norm(hidden, normed);
        std::vector<float> out(spec_.vocab_size);
        detail::vec_mat(normed, unembedding_, out);
        return out;
    }

    /// Head mean computed in double, stored in float.
    static std::vector<float> head_average(std::span<const float> head_weights, std::size_t n_heads,
                                           std::size_t count) {
        std::vector<float> out(count);
        for (std::size_t j = 0; j < count; ++j) {
            double acc = 0.0;
            for (std::size_t h = 0; h < n_heads; ++h) {
                acc += head_weights[h * count + j];
            }
            out[j] = static_cast<float>(acc / static_cast<double>(n_heads));
        }
        return out;
    }

private:
    ModelSpec spec_;
    detail::Matrix embedding_;
    std::vector<LayerWeights> layers_;
    detail::Matrix unembedding_;
};

/// Greedy argmax; ties go to the smallest token id.
inline std::int32_t argmax_token(std::span<const float> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = i;
        }
    }
    return static_cast<std::int32_t>(best);
}

struct PrefillResult {
    std::vector<CachePool> pools;               // one per layer
    std::vector<float> hidden;                  // final hidden state of the last prompt token
    std::vector<float> logits;
    std::vector<AttentionRow> last_rows;        // head-averaged rows of the last prompt token, per layer
    std::int32_t next_token = 0;
};

/// Runs the prompt through the model with causal attention and writes every
/// layer's keys/values to a fresh prefill pool. Pool budgets come from
/// `decode_budget` (kUnbounded for a full cache).
inline PrefillResult prefill_forward(const ToyModel& model, std::span<const std::int32_t> prompt,
                                     std::size_t decode_budget = kUnbounded) {
    const ModelSpec& spec = model.spec();
    if (prompt.empty()) {
        throw Error(ErrorCode::EmptyPrompt, "prompt must contain at least one token");
    }
    for (const auto token : prompt) {
        model.check_token(token);
    }
    const std::size_t m = prompt.size();
    std::vector<std::vector<TokenSlot>> slots(spec.n_layers);
    for (auto& s : slots) {
        s.reserve(m);
    }
    PrefillResult result;
    std::vector<float> head_weights;
    for (std::size_t p = 0; p < m; ++p) {
        std::vector<float> hidden = model.embed(prompt[p], static_cast<std::int64_t>(p));
        for (std::size_t l = 0; l < spec.n_layers; ++l) {
            auto proj = model.project(l, hidden);
            slots[l].push_back(TokenSlot{static_cast<std::int64_t>(p), std::move(proj.k), std::move(proj.v),
                                         Phase::Prefill});
            const auto& layer_slots = slots[l];
            auto attn = model.attend(proj.q, layer_slots.size(),
                                     [&](std::size_t j) -> const TokenSlot& { return layer_slots[j]; },
                                     head_weights);
            if (p + 1 == m) {
                result.last_rows.push_back(AttentionRow{
                    ToyModel::head_average(head_weights, spec.n_heads, layer_slots.size()), 0, 0});
            }
            model.finish_block(l, hidden, attn);
        }
        if (p + 1 == m) {
            result.hidden = hidden;
        }
    }
    result.pools.reserve(spec.n_layers);
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        CachePool pool(spec.pool_shape(), decode_budget);
        pool.append_prefill(std::move(slots[l]));
        result.pools.push_back(std::move(pool));
    }
    result.logits = model.logits(result.hidden);
    result.next_token = argmax_token(result.logits);
    return result;
}

struct StepOutput {
    std::int64_t step = 0;
    std::int32_t input_token = 0;
    std::vector<float> logits;
    std::vector<AttentionRow> attention_rows;                 // per layer, over the pre-eviction cache
    std::vector<std::vector<float>> raw_head_attention;       // per layer, H x cache size (optional)
    std::vector<EvictionDecision> decisions;                  // per layer
    std::vector<std::size_t> cache_size_before;               // per layer, after append, before enforcement
    std::vector<std::vector<std::int64_t>> victim_positions;  // per layer
    std::vector<std::int64_t> policy_ns;                      // per layer: observe + select
    std::int64_t step_ns = 0;
    std::int32_t next_token = 0;
};

/// One autoregressive step for every layer, in the order: project, append
/// K/V with a zero score, attend over prefill ++ decode including the new
/// slot, head-average, update scores, enforce the budget.
inline StepOutput decode_step(const ToyModel& model, std::span<CachePool> pools,
                              std::span<const std::unique_ptr<EvictionPolicy>> policies, std::int32_t token,
                              std::int64_t step, bool capture_heads = false) {
    using clock = std::chrono::steady_clock;
    const auto step_start = clock::now();
    const ModelSpec& spec = model.spec();
    if (pools.size() != spec.n_layers || policies.size() != spec.n_layers) {
        throw Error(ErrorCode::InvalidConfig, "need one pool and one policy per layer");
    }
    for (const auto& pool : pools) {
        if (!pool.prefilled()) {
            throw Error(ErrorCode::NotPrefilled, "decode_step before prefill");
        }
    }
    StepOutput out;
    out.step = step;
    out.input_token = token;
    out.attention_rows.reserve(spec.n_layers);
    out.decisions.reserve(spec.n_layers);
    out.cache_size_before.reserve(spec.n_layers);
    out.victim_positions.resize(spec.n_layers);
    out.policy_ns.reserve(spec.n_layers);
    if (capture_heads) {
        out.raw_head_attention.resize(spec.n_layers);
    }

    const std::int64_t position = pools[0].next_position();
    std::vector<float> hidden = model.embed(token, position);
    std::vector<float> head_weights;
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        CachePool& pool = pools[l];
        EvictionPolicy& policy = *policies[l];
        auto proj = model.project(l, hidden);
        pool.append_decode(TokenSlot{position, std::move(proj.k), std::move(proj.v), Phase::Decode},
                           policy.importance());
        const std::size_t count = pool.total_size();
        auto attn = model.attend(proj.q, count, [&](std::size_t j) -> const TokenSlot& { return pool.slot(j); },
                                 head_weights);
        AttentionRow row{ToyModel::head_average(head_weights, spec.n_heads, count), step, pool.prefill_len()};

        const auto policy_start = clock::now();
        policy.observe(row);
        EvictionDecision decision =
            policy.bounded() ? policy.select(pool, pool.overflow(), step) : EvictionDecision::none(step);
        const auto policy_end = clock::now();

        out.cache_size_before.push_back(count);
        for (const auto idx : decision.victim_indices) {
            out.victim_positions[l].push_back(pool.decode()[idx].global_position);
        }
        pool.evict_indices(decision.victim_indices, policy.importance());
        out.policy_ns.push_back(
            std::chrono::duration_cast<std::chrono::nanoseconds>(policy_end - policy_start).count());
        if (capture_heads) {
            out.raw_head_attention[l] = head_weights;
        }
        out.attention_rows.push_back(std::move(row));
        out.decisions.push_back(std::move(decision));
        model.finish_block(l, hidden, attn);
    }
    out.logits = model.logits(hidden);
    out.next_token = argmax_token(out.logits);
    out.step_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - step_start).count();
    return out;
}

/// Closed-loop generation state: per-layer pools and policies plus the
/// token to feed next.
class DecodeSession {
public:
    DecodeSession(const ToyModel& model, std::span<const std::int32_t> prompt, const PolicyConfig& config)
        : model_(&model) {
        config.validate(prompt.size());
        const std::size_t budget = config.kind == PolicyKind::FullCache ? kUnbounded : config.decode_budget;
        PrefillResult prefill = prefill_forward(model, prompt, budget);
        pools_ = std::move(prefill.pools);
        prefill_rows_ = std::move(prefill.last_rows);
        prefill_logits_ = std::move(prefill.logits);
        next_token_ = prefill.next_token;
        for (std::size_t l = 0; l < model.spec().n_layers; ++l) {
            policies_.push_back(make_policy(config));
        }
    }

    StepOutput step(bool capture_heads = false) {
        StepOutput out = decode_step(*model_, pools_, policies_, next_token_, steps_done_ + 1, capture_heads);
        ++steps_done_;
        next_token_ = out.next_token;
        return out;
    }

    std::int64_t steps_done() const { return steps_done_; }
    std::int32_t next_token() const { return next_token_; }
    std::size_t prefill_len() const { return pools_.front().prefill_len(); }
    const std::vector<CachePool>& pools() const { return pools_; }
    const std::vector<std::unique_ptr<EvictionPolicy>>& policies() const { return policies_; }
    const std::vector<AttentionRow>& prefill_rows() const { return prefill_rows_; }
    const std::vector<float>& prefill_logits() const { return prefill_logits_; }

private:
    const ToyModel* model_;
    std::vector<CachePool> pools_;
    std::vector<std::unique_ptr<EvictionPolicy>> policies_;
    std::vector<AttentionRow> prefill_rows_;
    std::vector<float> prefill_logits_;
    std::int32_t next_token_ = 0;
    std::int64_t steps_done_ = 0;
};

/// Deterministic prompt of `length` token ids drawn from `seed`.
inline std::vector<std::int32_t> make_prompt(std::size_t length, std::size_t vocab_size, std::uint64_t seed) {
    detail::SplitMix64 rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
    std::vector<std::int32_t> out(length);
    for (auto& t : out) {
        t = static_cast<std::int32_t>(rng.next() % vocab_size);
    }
    return out;
}

}  // namespace momentkv
