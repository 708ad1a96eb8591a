// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "momentkv/attention_row.hpp"
#include "momentkv/cache_core.hpp"
#include "momentkv/error.hpp"

namespace momentkv {

enum class PolicyKind { MomentKV, StreamingSink, H2O, ScopeSlide, FullCache };

constexpr std::string_view to_string(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::MomentKV: return "MomentKV";
        case PolicyKind::StreamingSink: return "StreamingSink";
        case PolicyKind::H2O: return "H2O";
        case PolicyKind::ScopeSlide: return "ScopeSlide";
        case PolicyKind::FullCache: return "FullCache";
    }
    return "Unknown";
}

inline PolicyKind parse_policy_kind(std::string_view name) {
    for (const auto kind : {PolicyKind::MomentKV, PolicyKind::StreamingSink, PolicyKind::H2O, PolicyKind::ScopeSlide,
                            PolicyKind::FullCache}) {
        if (name == to_string(kind)) {
            return kind;
        }
    }
    throw Error(ErrorCode::InvalidConfig, "unknown policy kind '" + std::string(name) + "'");
}

struct PolicyConfig {
    static constexpr double kDefaultAlpha = 0.98;
    static constexpr std::size_t kDefaultSinkSize = 4;

    PolicyKind kind = PolicyKind::MomentKV;
    double momentum_alpha = kDefaultAlpha;
    std::size_t sink_size = kDefaultSinkSize;
    // Unset means "derive from decode_budget": B_d / 8 for H2O, B_d / 2 for ScopeSlide.
    std::optional<std::size_t> recency_window;
    std::optional<std::size_t> heavy_keep;
    std::size_t decode_budget = 512;

    std::size_t resolved_recency_window() const { return recency_window.value_or(decode_budget / 8); }
    std::size_t resolved_heavy_keep() const { return heavy_keep.value_or(decode_budget / 2); }

    PolicyConfig resolved() const {
        PolicyConfig out = *this;
        out.recency_window = resolved_recency_window();
        out.heavy_keep = resolved_heavy_keep();
        return out;
    }

    /// `prefill_len` is needed for the sink check: sinks that fall inside the
    /// frozen prefill pool cost no decode budget.
    void validate(std::size_t prefill_len = 0) const {
        if (!(momentum_alpha >= 0.0 && momentum_alpha <= 1.0)) {
            throw Error(ErrorCode::InvalidConfig, "momentum_alpha must lie in [0, 1]");
        }
        if (decode_budget == 0) {
            throw Error(ErrorCode::InvalidConfig, "decode_budget must be >= 1");
        }
        switch (kind) {
            case PolicyKind::StreamingSink:
                if (sink_size > prefill_len && sink_size - prefill_len > decode_budget) {
                    throw Error(ErrorCode::BudgetTooSmall, "decode-side sinks exceed the decode budget");
                }
                break;
            case PolicyKind::H2O:
                if (resolved_recency_window() >= decode_budget) {
                    throw Error(ErrorCode::InvalidConfig, "H2O recency_window must be < decode_budget");
                }
                break;
            case PolicyKind::ScopeSlide:
                if (resolved_heavy_keep() >= decode_budget) {
                    throw Error(ErrorCode::BudgetTooSmall, "ScopeSlide heavy_keep must be < decode_budget");
                }
                break;
            default: break;
        }
    }

    /// Short human-readable tag used for run ids and report labels.
    std::string label() const {
        std::ostringstream out;
        switch (kind) {
            case PolicyKind::MomentKV: out << "MomentKV(alpha=" << momentum_alpha << ")"; break;
            case PolicyKind::StreamingSink: out << "StreamingSink(s=" << sink_size << ")"; break;
            case PolicyKind::H2O: out << "H2O(r=" << resolved_recency_window() << ")"; break;
            case PolicyKind::ScopeSlide: out << "ScopeSlide~approx(h=" << resolved_heavy_keep() << ")"; break;
            case PolicyKind::FullCache: out << "FullCache"; break;
        }
        return out.str();
    }
};

struct EvictionDecision {
    std::vector<std::size_t> victim_indices;  // decode-pool indices, ascending
    std::int64_t step = 0;
    std::vector<double> scores_snapshot;

    static EvictionDecision none(std::int64_t step) {
        EvictionDecision d;
        d.step = step;
        return d;
    }
};

namespace detail {

/// The `count` indices in [begin, end) with the smallest score; ties resolve
/// to the smaller index, which is the older token because decode slots are
/// kept in position order. Result is ascending.
inline std::vector<std::size_t> lowest_scores(std::span<const double> scores, std::size_t begin, std::size_t end,
                                              std::size_t count) {
    std::vector<std::size_t> out;
    if (count == 0) {
        return out;
    }
    if (count == 1) {
        std::size_t best = begin;
        for (std::size_t i = begin + 1; i < end; ++i) {
            if (scores[i] < scores[best]) {
                best = i;
            }
        }
        out.push_back(best);
        return out;
    }
    out.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
        out[i - begin] = i;
    }
    const auto less = [&](std::size_t a, std::size_t b) {
        return scores[a] < scores[b] || (scores[a] == scores[b] && a < b);
    };
    if (count < out.size()) {
        std::nth_element(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(count), out.end(), less);
        out.resize(count);
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline void check_row(const ImportanceVector& importance, const AttentionRow& row) {
    if (row.weights.size() != row.prefill_len + importance.size()) {
        throw Error(ErrorCode::LengthMismatch, "row of length " + std::to_string(row.weights.size()) +
                                                   " for cache of " + std::to_string(row.prefill_len) + " + " +
                                                   std::to_string(importance.size()) + " slots");
    }
}

}  // namespace detail

/// I_i(t) = alpha * I_i(t-1) + a_i(t) over the decode slice of the row.
/// Prefill weights are never scored.
inline void momentkv_observe(ImportanceVector& importance, const AttentionRow& row) {
    detail::check_row(importance, row);
    const double alpha = importance.momentum_alpha();
    const std::span<const float> decode = row.decode_slice();
    std::span<double> scores = importance.scores();
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = alpha * scores[i] + static_cast<double>(decode[i]);
    }
}

/// Picks the `overflow` lowest-scored decode slots.
inline EvictionDecision momentkv_select(const ImportanceVector& importance, std::size_t overflow,
                                        std::int64_t step = 0) {
    if (overflow > importance.size()) {
        throw Error(ErrorCode::OverflowTooLarge, "overflow " + std::to_string(overflow) + " exceeds decode size " +
                                                     std::to_string(importance.size()));
    }
    EvictionDecision decision;
    decision.step = step;
    if (overflow == 0) {
        return decision;
    }
    decision.victim_indices = detail::lowest_scores(importance.scores(), 0, importance.size(), overflow);
    decision.scores_snapshot.assign(importance.scores().begin(), importance.scores().end());
    return decision;
}

/// Attention-sink + sliding-window rule. The sinks are the `sink_size`
/// oldest global positions; those inside the prefill pool are already safe,
/// so only the remaining max(0, s - M) sinks consume decode budget.
inline EvictionDecision streaming_select(std::span<const std::int64_t> decode_positions, std::size_t prefill_len,
                                         std::size_t sink_size, std::size_t budget, std::int64_t step = 0) {
    const std::size_t decode_sinks = sink_size > prefill_len ? sink_size - prefill_len : 0;
    if (budget < decode_sinks) {
        throw Error(ErrorCode::BudgetTooSmall, "budget " + std::to_string(budget) + " cannot hold " +
                                                   std::to_string(decode_sinks) + " decode-side sinks");
    }
    EvictionDecision decision;
    decision.step = step;
    const std::size_t n = decode_positions.size();
    if (n <= budget) {
        return decision;
    }
    const std::size_t window = budget - decode_sinks;
    for (std::size_t i = 0; i < n - window; ++i) {
        if (decode_positions[i] >= static_cast<std::int64_t>(sink_size)) {
            decision.victim_indices.push_back(i);
        }
    }
    return decision;
}

/// Cumulative attention with no decay.
inline void h2o_observe(ImportanceVector& cumulative, const AttentionRow& row) {
    detail::check_row(cumulative, row);
    const std::span<const float> decode = row.decode_slice();
    std::span<double> scores = cumulative.scores();
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] += static_cast<double>(decode[i]);
    }
}

/// Heavy-hitter selection; the newest `recency_window` decode slots are exempt.
inline EvictionDecision h2o_select(const ImportanceVector& cumulative, std::size_t overflow,
                                   std::size_t recency_window, std::int64_t step = 0) {
    const std::size_t n = cumulative.size();
    if (overflow > n) {
        throw Error(ErrorCode::OverflowTooLarge, "overflow " + std::to_string(overflow) + " exceeds decode size " +
                                                     std::to_string(n));
    }
    EvictionDecision decision;
    decision.step = step;
    if (overflow == 0) {
        return decision;
    }
    const std::size_t evictable = recency_window >= n ? 0 : n - recency_window;
    if (evictable < overflow) {
        throw Error(ErrorCode::NoEvictableTokens, std::to_string(evictable) + " evictable slots for overflow " +
                                                      std::to_string(overflow));
    }
    decision.victim_indices = detail::lowest_scores(cumulative.scores(), 0, evictable, overflow);
    decision.scores_snapshot.assign(cumulative.scores().begin(), cumulative.scores().end());
    return decision;
}

/// Instantaneous-attention + recency stand-in for a decode-only sliding
/// policy: keeps the (budget - heavy_keep) newest slots and, among the
/// older ones, the heavy_keep slots with the largest weight in the latest row.
inline EvictionDecision scope_slide_select(std::span<const double> latest_weights, std::size_t budget,
                                           std::size_t heavy_keep, std::int64_t step = 0) {
    if (heavy_keep >= budget) {
        throw Error(ErrorCode::BudgetTooSmall, "heavy_keep " + std::to_string(heavy_keep) + " must be < budget " +
                                                   std::to_string(budget));
    }
    EvictionDecision decision;
    decision.step = step;
    const std::size_t n = latest_weights.size();
    if (n <= budget) {
        return decision;
    }
    const std::size_t recent = budget - heavy_keep;
    decision.victim_indices = detail::lowest_scores(latest_weights, 0, n - recent, n - budget);
    decision.scores_snapshot.assign(latest_weights.begin(), latest_weights.end());
    return decision;
}

/// Common interface: observe one step's row, then nominate victims when the
/// decode pool overflows. Each instance owns the scores for exactly one
/// layer's pool and must see every append/evict on that pool.
class EvictionPolicy {
public:
    explicit EvictionPolicy(PolicyConfig config, double alpha = 1.0)
        : config_(config.resolved()), importance_(alpha) {}
    virtual ~EvictionPolicy() = default;

    EvictionPolicy(const EvictionPolicy&) = delete;
    EvictionPolicy& operator=(const EvictionPolicy&) = delete;

    const PolicyConfig& config() const { return config_; }
    ImportanceVector& importance() { return importance_; }
    const ImportanceVector& importance() const { return importance_; }

    /// False only for FullCache: the pool is never trimmed.
    virtual bool bounded() const { return true; }
    virtual void observe(const AttentionRow& row) = 0;
    virtual EvictionDecision select(const CachePool& pool, std::size_t overflow, std::int64_t step) = 0;

protected:
    PolicyConfig config_;
    ImportanceVector importance_;
};

class MomentKvPolicy final : public EvictionPolicy {
public:
    explicit MomentKvPolicy(const PolicyConfig& config) : EvictionPolicy(config, config.momentum_alpha) {}

    void observe(const AttentionRow& row) override { momentkv_observe(importance_, row); }
    EvictionDecision select(const CachePool&, std::size_t overflow, std::int64_t step) override {
        return momentkv_select(importance_, overflow, step);
    }
};

class StreamingSinkPolicy final : public EvictionPolicy {
public:
    explicit StreamingSinkPolicy(const PolicyConfig& config) : EvictionPolicy(config) {}

    void observe(const AttentionRow& row) override { detail::check_row(importance_, row); }
    EvictionDecision select(const CachePool& pool, std::size_t overflow, std::int64_t step) override {
        if (overflow == 0) {
            return EvictionDecision::none(step);
        }
        const auto positions = pool.decode_positions();
        return streaming_select(positions, pool.prefill_len(), config_.sink_size, pool.decode_budget(), step);
    }
};

class H2OPolicy final : public EvictionPolicy {
public:
    explicit H2OPolicy(const PolicyConfig& config) : EvictionPolicy(config) {}

    void observe(const AttentionRow& row) override { h2o_observe(importance_, row); }
    EvictionDecision select(const CachePool&, std::size_t overflow, std::int64_t step) override {
        return h2o_select(importance_, overflow, config_.resolved_recency_window(), step);
    }
};

/// Scores hold the latest instantaneous decode weights, overwritten each step.
class ScopeSlidePolicy final : public EvictionPolicy {
public:
    explicit ScopeSlidePolicy(const PolicyConfig& config) : EvictionPolicy(config) {}

    void observe(const AttentionRow& row) override {
        detail::check_row(importance_, row);
        const auto decode = row.decode_slice();
        std::span<double> scores = importance_.scores();
        for (std::size_t i = 0; i < scores.size(); ++i) {
            scores[i] = static_cast<double>(decode[i]);
        }
    }
    EvictionDecision select(const CachePool& pool, std::size_t overflow, std::int64_t step) override {
        if (overflow == 0) {
            return EvictionDecision::none(step);
        }
        return scope_slide_select(importance_.scores(), pool.decode_budget(), config_.resolved_heavy_keep(), step);
    }
};

class FullCachePolicy final : public EvictionPolicy {
public:
    explicit FullCachePolicy(const PolicyConfig& config) : EvictionPolicy(config) {}

    bool bounded() const override { return false; }
    void observe(const AttentionRow&) override {}
    EvictionDecision select(const CachePool&, std::size_t, std::int64_t step) override { return EvictionDecision::none(step); }
};

inline std::unique_ptr<EvictionPolicy> make_policy(const PolicyConfig& config) {
    config.validate(kUnbounded);
    switch (config.kind) {
        case PolicyKind::MomentKV: return std::make_unique<MomentKvPolicy>(config);
        case PolicyKind::StreamingSink: return std::make_unique<StreamingSinkPolicy>(config);
        case PolicyKind::H2O: return std::make_unique<H2OPolicy>(config);
        case PolicyKind::ScopeSlide: return std::make_unique<ScopeSlidePolicy>(config);
        case PolicyKind::FullCache: return std::make_unique<FullCachePolicy>(config);
    }
    throw Error(ErrorCode::InvalidConfig, "unhandled policy kind");
}

/// The pool a policy should manage: FullCache pools are never bounded.
inline CachePool make_pool(PoolShape shape, const PolicyConfig& config) {
    return CachePool(shape, config.kind == PolicyKind::FullCache ? kUnbounded : config.decode_budget);
}

/// Trims the decode pool back to its budget using the policy's victims.
inline EvictionDecision enforce_budget(CachePool& pool, EvictionPolicy& policy, std::int64_t step) {
    if (!policy.bounded()) {
        return EvictionDecision::none(step);
    }
    EvictionDecision decision = policy.select(pool, pool.overflow(), step);
    pool.evict_indices(decision.victim_indices, policy.importance());
    return decision;
}

}  // namespace momentkv
