// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "momentkv/cache_core.hpp"
#include "momentkv/metrics.hpp"
#include "momentkv/model.hpp"
#include "momentkv/policies.hpp"
#include "momentkv/trace.hpp"

namespace momentkv {

struct RunOptions {
    std::size_t cdf_window = kRecencyWindow;
    std::size_t oracle_horizon = kOracleHorizon;
    bool renormalize = true;         // replay only
    bool record_candidates = true;   // needed for oracle agreement
    std::optional<std::vector<std::int64_t>> hitter_labels;  // overrides trace labels
    // Replay only: called after observe + select, before the victims leave.
    std::function<void(std::int64_t step, std::size_t layer, const CachePool&, const EvictionPolicy&)> on_decision;
};

namespace detail {

inline void annotate(PolicyReport& report) {
    const auto& p = report.policy;
    if (p.kind == PolicyKind::ScopeSlide) {
        report.notes.push_back("ScopeSlide is an approximation: instantaneous attention + recency window");
    }
    if (p.kind == PolicyKind::MomentKV && p.momentum_alpha == 1.0) {
        report.notes.push_back("alpha=1: H2O-equivalent mode (cumulative attention, r=0)");
    }
    if (report.mode == "replay" && report.renormalized) {
        report.notes.push_back(
            "open-loop replay: surviving weights renormalized; a live model would redistribute attention differently");
    }
}

inline PolicyReport new_report(const std::string& mode, const PolicyConfig& config, std::size_t prefill_len,
                               std::size_t n_layers) {
    PolicyReport report;
    report.mode = mode;
    report.policy = config.resolved();
    report.policy_label = config.label();
    report.prefill_len = prefill_len;
    report.n_layers = n_layers;
    report.capacity_limit = config.kind == PolicyKind::FullCache ? 0 : prefill_len + config.decode_budget;
    return report;
}

inline void finish_cdf(PolicyReport& report, const RecencyCdfAccumulator& acc) {
    if (acc.empty()) {
        report.notes.push_back("recency CDF not computed: fewer than " + std::to_string(acc.window()) +
                               " decode tokens were ever cached");
        return;
    }
    report.cdf = acc.finish();
}

}  // namespace detail

/// Closed loop: the toy model decodes `n_steps` tokens under `config`, so
/// every eviction feeds back into later attention and outputs.
inline PolicyReport run_closed_loop(const ToyModel& model, std::span<const std::int32_t> prompt,
                                    const PolicyConfig& config, std::size_t n_steps, const RunOptions& options = {}) {
    DecodeSession session(model, prompt, config);
    const std::size_t n_layers = model.spec().n_layers;
    PolicyReport report = detail::new_report("closed_loop", config, prompt.size(), n_layers);
    report.n_steps = n_steps;
    report.steps.reserve(n_steps * n_layers);
    report.step_ns.reserve(n_steps);
    RecencyCdfAccumulator cdf(options.cdf_window, n_layers);
    std::vector<std::size_t> survivors;
    for (std::size_t t = 1; t <= n_steps; ++t) {
        std::vector<std::vector<std::int64_t>> candidates;
        if (options.record_candidates) {
            // Candidates are the pre-step pool plus the slot about to be appended.
            for (const auto& pool : session.pools()) {
                auto c = pool.decode_positions();
                c.push_back(pool.next_position());
                candidates.push_back(std::move(c));
            }
        }
        StepOutput out = session.step();
        report.tokens.push_back(out.input_token);
        report.step_ns.push_back(out.step_ns);
        for (std::size_t l = 0; l < n_layers; ++l) {
            const auto& row = out.attention_rows[l];
            const auto& decision = out.decisions[l];
            survivors.clear();
            std::size_t v = 0;
            for (std::size_t i = 0; i < row.size(); ++i) {
                const bool victim = i >= row.prefill_len && v < decision.victim_indices.size() &&
                                    decision.victim_indices[v] == i - row.prefill_len;
                if (victim) {
                    ++v;
                } else {
                    survivors.push_back(i);
                }
            }
            const auto& pool = session.pools()[l];
            report.steps.push_back(StepRecord{out.step, l, out.cache_size_before[l], pool.total_size(),
                                              pool.decode_size(), decision.victim_indices.size(),
                                              retained_mass(row.weights, survivors), out.policy_ns[l]});
            report.max_total_size = std::max(report.max_total_size, pool.total_size());
            if (!decision.victim_indices.empty()) {
                EvictionRecord rec{out.step, l, out.victim_positions[l], {}};
                if (options.record_candidates) {
                    rec.candidates = std::move(candidates[l]);
                }
                report.evictions.push_back(std::move(rec));
            }
            cdf.add(l, row);
        }
    }
    detail::finish_cdf(report, cdf);
    detail::annotate(report);
    return report;
}

/// Open loop: feeds each trace row to a per-layer policy after masking the
/// positions it has already evicted. With `renormalize`, the surviving
/// weights are rescaled to sum to one once anything has been masked.
/// `fed_rows`, when given, receives every row exactly as the policy saw it.
inline PolicyReport replay(const TraceFile& trace, const PolicyConfig& config, const RunOptions& options = {},
                           std::vector<std::vector<AttentionRow>>* fed_rows = nullptr) {
    const auto& h = trace.header;
    validate_trace(trace, kReadTolerance);
    config.validate(h.prefill_len);
    using clock = std::chrono::steady_clock;

    std::vector<CachePool> pools;
    std::vector<std::unique_ptr<EvictionPolicy>> policies;
    for (std::size_t l = 0; l < h.n_layers; ++l) {
        CachePool pool = make_pool(PoolShape{}, config);
        std::vector<TokenSlot> prefill;
        for (std::size_t p = 0; p < h.prefill_len; ++p) {
            prefill.push_back(TokenSlot{static_cast<std::int64_t>(p), {}, {}, Phase::Prefill});
        }
        pool.append_prefill(std::move(prefill));
        pools.push_back(std::move(pool));
        policies.push_back(make_policy(config));
    }

    PolicyReport report = detail::new_report("replay", config, h.prefill_len, h.n_layers);
    report.n_steps = h.n_steps;
    report.renormalized = options.renormalize;
    report.steps.reserve(h.n_steps * h.n_layers);
    RecencyCdfAccumulator cdf(options.cdf_window, h.n_layers);
    if (fed_rows != nullptr) {
        fed_rows->assign(h.n_steps, {});
    }

    for (std::size_t t = 1; t <= h.n_steps; ++t) {
        const auto step_start = clock::now();
        const auto step = static_cast<std::int64_t>(t);
        for (std::size_t l = 0; l < h.n_layers; ++l) {
            CachePool& pool = pools[l];
            EvictionPolicy& policy = *policies[l];
            const auto& full = trace.row(t, l);
            const std::int64_t position = static_cast<std::int64_t>(h.prefill_len + t - 1);
            pool.append_decode(TokenSlot{position, {}, {}, Phase::Decode}, policy.importance());

            AttentionRow row{std::vector<float>(pool.total_size()), step, h.prefill_len};
            for (std::size_t i = 0; i < h.prefill_len; ++i) {
                row.weights[i] = full[i];
            }
            for (std::size_t i = 0; i < pool.decode_size(); ++i) {
                row.weights[h.prefill_len + i] = full[static_cast<std::size_t>(pool.decode()[i].global_position)];
            }
            const bool masked = pool.total_size() < full.size();
            if (masked && options.renormalize) {
                const double total = row.sum();
                if (total > 0.0) {
                    for (auto& w : row.weights) {
                        w = static_cast<float>(w / total);
                    }
                }
            }
            std::vector<std::int64_t> candidates;
            if (options.record_candidates && policy.bounded() && pool.overflow() > 0) {
                candidates = pool.decode_positions();
            }

            const auto policy_start = clock::now();
            policy.observe(row);
            EvictionDecision decision =
                policy.bounded() ? policy.select(pool, pool.overflow(), step) : EvictionDecision::none(step);
            const auto policy_ns =
                std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - policy_start).count();

            if (options.on_decision) {
                options.on_decision(step, l, pool, policy);
            }
            const std::size_t before = pool.total_size();
            std::vector<std::int64_t> victims;
            for (const auto idx : decision.victim_indices) {
                victims.push_back(pool.decode()[idx].global_position);
            }
            pool.evict_indices(decision.victim_indices, policy.importance());

            double kept = 0.0;
            double total = 0.0;
            for (std::size_t i = 0; i < full.size(); ++i) {
                total += full[i];
            }
            for (std::size_t i = 0; i < h.prefill_len; ++i) {
                kept += full[i];
            }
            for (const auto& slot : pool.decode()) {
                kept += full[static_cast<std::size_t>(slot.global_position)];
            }
            report.steps.push_back(StepRecord{step, l, before, pool.total_size(), pool.decode_size(),
                                              victims.size(), total > 0.0 ? std::clamp(kept / total, 0.0, 1.0) : 1.0,
                                              policy_ns});
            report.max_total_size = std::max(report.max_total_size, pool.total_size());
            if (!victims.empty()) {
                report.evictions.push_back(EvictionRecord{step, l, std::move(victims), std::move(candidates)});
            }
            cdf.add(l, row);
            if (fed_rows != nullptr) {
                (*fed_rows)[t - 1].push_back(std::move(row));
            }
        }
        report.step_ns.push_back(
            std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - step_start).count());
    }

    const auto& labels = options.hitter_labels ? *options.hitter_labels : h.hitter_positions;
    if (!labels.empty()) {
        double acc = 0.0;
        for (const auto& pool : pools) {
            std::vector<std::int64_t> alive = pool.decode_positions();
            for (std::size_t p = 0; p < h.prefill_len; ++p) {
                alive.push_back(static_cast<std::int64_t>(p));
            }
            acc += *heavy_hitter_retention(labels, alive);
        }
        report.heavy_hitter_retention = acc / static_cast<double>(pools.size());
    }
    if (options.record_candidates && !report.evictions.empty()) {
        if (options.oracle_horizon > 0 && options.oracle_horizon < h.n_steps) {
            report.oracle_agreement = eviction_oracle_agreement(report.evictions, trace, options.oracle_horizon);
        } else {
            report.notes.push_back("oracle agreement not computed: horizon exceeds trace");
        }
    }
    detail::finish_cdf(report, cdf);
    detail::annotate(report);
    return report;
}

/// Runs the toy model with a full cache and records its head-averaged rows
/// as a trace that any policy can later replay.
inline TraceFile export_toy_trace(const ToyModel& model, std::span<const std::int32_t> prompt, std::size_t n_steps) {
    PolicyConfig full;
    full.kind = PolicyKind::FullCache;
    DecodeSession session(model, prompt, full);
    TraceFile trace;
    const auto& spec = model.spec();
    trace.header = TraceHeader{prompt.size(), n_steps, spec.n_layers, 1, true, TraceSource::ToyModel,
                               "toy:d" + std::to_string(spec.d_model) + "h" + std::to_string(spec.n_heads) + "l" +
                                   std::to_string(spec.n_layers) + "s" + std::to_string(spec.seed),
                               {}};
    trace.rows.reserve(n_steps);
    for (std::size_t t = 1; t <= n_steps; ++t) {
        StepOutput out = session.step();
        std::vector<std::vector<float>> layers;
        for (auto& row : out.attention_rows) {
            layers.push_back(std::move(row.weights));
        }
        trace.rows.push_back(std::move(layers));
    }
    return trace;
}

}  // namespace momentkv
