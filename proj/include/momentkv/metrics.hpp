// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "momentkv/attention_row.hpp"
#include "momentkv/error.hpp"
#include "momentkv/policies.hpp"
#include "momentkv/trace.hpp"

namespace momentkv {

inline constexpr std::size_t kRecencyWindow = 256;
inline constexpr std::size_t kOracleHorizon = 64;

struct StepRecord {
    std::int64_t step = 0;
    std::size_t layer = 0;
    std::size_t cache_size_before = 0;  // after append, before enforcement
    std::size_t cache_size_after = 0;
    std::size_t decode_size = 0;        // after enforcement
    std::size_t evicted = 0;
    double retained_mass = 1.0;
    std::int64_t policy_ns = 0;
};

/// One enforcement that removed at least one slot. `candidates` are the
/// decode positions that were in the pool when the decision was taken.
struct EvictionRecord {
    std::int64_t step = 0;
    std::size_t layer = 0;
    std::vector<std::int64_t> victims;
    std::vector<std::int64_t> candidates;
};

struct CdfCurve {
    std::string group;           // early / middle / late
    std::vector<double> mass;    // mass[k - 1] = cumulative share of the top-k tokens
    std::size_t samples = 0;

    /// Cumulative mass at token fraction x, read at k = ceil(x * W).
    double at_fraction(double x) const {
        if (mass.empty()) {
            return 0.0;
        }
        const auto w = static_cast<double>(mass.size());
        const auto k = static_cast<std::size_t>(std::ceil(x * w - 1e-9));
        if (k == 0) {
            return 0.0;
        }
        return mass[std::min(k, mass.size()) - 1];
    }
};

struct PolicyReport {
    std::string run_id;
    std::string mode;  // closed_loop / replay
    PolicyConfig policy;
    std::string policy_label;
    std::size_t prefill_len = 0;
    std::size_t n_layers = 0;
    std::size_t n_steps = 0;
    std::size_t capacity_limit = 0;  // M + B_d, or 0 when unbounded
    std::size_t max_total_size = 0;
    bool renormalized = false;
    std::vector<StepRecord> steps;                 // n_steps * n_layers, step-major
    std::vector<EvictionRecord> evictions;
    std::vector<std::int64_t> step_ns;             // per step
    std::vector<std::int32_t> tokens;              // closed loop only
    std::optional<double> heavy_hitter_retention;
    std::optional<double> oracle_agreement;
    std::vector<CdfCurve> cdf;
    std::vector<std::string> notes;

    double mean_retained_mass() const {
        if (steps.empty()) {
            return 1.0;
        }
        double acc = 0.0;
        for (const auto& s : steps) {
            acc += s.retained_mass;
        }
        return acc / static_cast<double>(steps.size());
    }
};

/// Share of `row` that falls on `surviving` indices (duplicates ignored).
inline double retained_mass(std::span<const float> row, std::span<const std::size_t> surviving) {
    std::vector<bool> keep(row.size(), false);
    for (const auto i : surviving) {
        if (i >= row.size()) {
            throw Error(ErrorCode::IndexOutOfRange, "surviving index outside the row");
        }
        keep[i] = true;
    }
    double kept = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        total += row[i];
        if (keep[i]) {
            kept += row[i];
        }
    }
    if (total <= 0.0) {
        return 1.0;
    }
    return std::clamp(kept / total, 0.0, 1.0);
}

/// Layer group of `layer` among `n_layers`: first, middle and last thirds.
inline std::size_t layer_group(std::size_t layer, std::size_t n_layers) { return layer * 3 / n_layers; }

inline const char* layer_group_name(std::size_t group) {
    static const char* names[] = {"early", "middle", "late"};
    return names[group];
}

/// Running average of sorted-descending cumulative mass within the last
/// `window` decode tokens of each row, bucketed by layer group.
class RecencyCdfAccumulator {
public:
    RecencyCdfAccumulator(std::size_t window, std::size_t n_layers)
        : window_(window), n_layers_(n_layers), sums_(3, std::vector<double>(window, 0.0)), samples_(3, 0) {
        if (window == 0 || n_layers == 0) {
            throw Error(ErrorCode::InvalidConfig, "window and n_layers must be >= 1");
        }
    }

    /// Rows with fewer than `window` decode slots are skipped.
    void add(std::size_t layer, const AttentionRow& row) {
        const auto decode = row.decode_slice();
        if (decode.size() < window_) {
            return;
        }
        scratch_.assign(decode.end() - static_cast<std::ptrdiff_t>(window_), decode.end());
        std::sort(scratch_.begin(), scratch_.end(), std::greater<>());
        double total = 0.0;
        for (const float w : scratch_) {
            total += w;
        }
        if (total <= 0.0) {
            return;
        }
        auto& sums = sums_[layer_group(layer, n_layers_)];
        double cum = 0.0;
        for (std::size_t k = 0; k < window_; ++k) {
            cum += scratch_[k];
            sums[k] += k + 1 == window_ ? 1.0 : std::min(cum / total, 1.0);
        }
        ++samples_[layer_group(layer, n_layers_)];
    }

    bool empty() const { return samples_[0] + samples_[1] + samples_[2] == 0; }

    std::vector<CdfCurve> finish() const {
        if (empty()) {
            throw Error(ErrorCode::RunTooShort, "no row had " + std::to_string(window_) + " decode tokens");
        }
        std::vector<CdfCurve> out;
        for (std::size_t g = 0; g < 3; ++g) {
            if (samples_[g] == 0) {
                continue;
            }
            CdfCurve curve{layer_group_name(g), std::vector<double>(window_), samples_[g]};
            for (std::size_t k = 0; k < window_; ++k) {
                curve.mass[k] = sums_[g][k] / static_cast<double>(samples_[g]);
            }
            curve.mass.back() = 1.0;
            out.push_back(std::move(curve));
        }
        return out;
    }

    std::size_t window() const { return window_; }

private:
    std::size_t window_;
    std::size_t n_layers_;
    std::vector<std::vector<double>> sums_;
    std::vector<std::size_t> samples_;
    std::vector<float> scratch_;
};

/// The uniform-attention reference curve: k / W.
inline CdfCurve uniform_diagonal(std::size_t window) {
    CdfCurve curve{"uniform", std::vector<double>(window), 0};
    for (std::size_t k = 0; k < window; ++k) {
        curve.mass[k] = static_cast<double>(k + 1) / static_cast<double>(window);
    }
    return curve;
}

/// Batch form over rows[step][layer].
inline std::vector<CdfCurve> recency_cdf(const std::vector<std::vector<AttentionRow>>& rows,
                                         std::size_t window = kRecencyWindow) {
    std::size_t n_layers = 0;
    for (const auto& step : rows) {
        n_layers = std::max(n_layers, step.size());
    }
    if (n_layers == 0) {
        throw Error(ErrorCode::RunTooShort, "no rows");
    }
    RecencyCdfAccumulator acc(window, n_layers);
    for (const auto& step : rows) {
        for (std::size_t l = 0; l < step.size(); ++l) {
            acc.add(l, step[l]);
        }
    }
    return acc.finish();
}

inline std::vector<CdfCurve> recency_cdf(const TraceFile& trace, std::size_t window = kRecencyWindow) {
    RecencyCdfAccumulator acc(window, trace.header.n_layers);
    for (std::size_t t = 1; t <= trace.header.n_steps; ++t) {
        for (std::size_t l = 0; l < trace.header.n_layers; ++l) {
            acc.add(l, trace.attention_row(t, l));
        }
    }
    return acc.finish();
}

/// Hindsight-optimal victims for one decision: the `count` candidates with
/// the least attention over steps (step, step + horizon], older first on ties.
inline std::vector<std::int64_t> oracle_victims(const TraceFile& trace, std::size_t layer, std::int64_t step,
                                                std::span<const std::int64_t> candidates, std::size_t count,
                                                std::size_t horizon) {
    std::vector<std::pair<double, std::int64_t>> future;
    future.reserve(candidates.size());
    for (const auto pos : candidates) {
        double mass = 0.0;
        for (std::size_t s = static_cast<std::size_t>(step) + 1; s <= static_cast<std::size_t>(step) + horizon; ++s) {
            mass += trace.row(s, layer)[static_cast<std::size_t>(pos)];
        }
        future.emplace_back(mass, pos);
    }
    std::sort(future.begin(), future.end());
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < count && i < future.size(); ++i) {
        out.push_back(future[i].second);
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline double jaccard(std::vector<std::int64_t> a, std::vector<std::int64_t> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::int64_t> inter;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    const std::size_t uni = a.size() + b.size() - inter.size();
    return uni == 0 ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni);
}

/// Mean Jaccard overlap between each recorded eviction and the hindsight
/// oracle. Decisions closer than `horizon` steps to the end of the trace are
/// not scored. Returns nullopt when nothing could be scored.
inline std::optional<double> eviction_oracle_agreement(std::span<const EvictionRecord> evictions,
                                                       const TraceFile& trace, std::size_t horizon = kOracleHorizon) {
    if (horizon == 0 || horizon >= trace.header.n_steps) {
        throw Error(ErrorCode::HorizonExceedsTrace, "horizon " + std::to_string(horizon) + " vs " +
                                                        std::to_string(trace.header.n_steps) + " trace steps");
    }
    double acc = 0.0;
    std::size_t scored = 0;
    for (const auto& e : evictions) {
        if (e.victims.empty() || static_cast<std::size_t>(e.step) + horizon > trace.header.n_steps) {
            continue;
        }
        if (e.candidates.empty()) {
            throw Error(ErrorCode::InvalidConfig, "eviction record lacks candidate positions");
        }
        const auto oracle = oracle_victims(trace, e.layer, e.step, e.candidates, e.victims.size(), horizon);
        acc += jaccard(e.victims, oracle);
        ++scored;
    }
    if (scored == 0) {
        return std::nullopt;
    }
    return acc / static_cast<double>(scored);
}

/// Fraction of `labels` still cached at the end of a run.
inline std::optional<double> heavy_hitter_retention(std::span<const std::int64_t> labels,
                                                    std::span<const std::int64_t> alive) {
    if (labels.empty()) {
        return std::nullopt;
    }
    std::size_t kept = 0;
    for (const auto p : labels) {
        if (std::find(alive.begin(), alive.end(), p) != alive.end()) {
            ++kept;
        }
    }
    return static_cast<double>(kept) / static_cast<double>(labels.size());
}

struct TimingSummary {
    std::string policy_label;
    std::size_t decode_budget = 0;
    std::size_t steps_measured = 0;
    double mean_policy_ns = 0.0;  // observe + select per step, summed over layers
    double mean_step_ns = 0.0;
    double policy_share = 0.0;    // mean_policy_ns / mean_step_ns
};

/// Per-step policy cost. With `steady_state_only`, only steps whose decode
/// pool was already full before the append are measured, so the cost
/// reflects the configured budget rather than the warm-up.
inline TimingSummary timing_report(const PolicyReport& report, bool steady_state_only = false) {
    TimingSummary out;
    out.policy_label = report.policy_label;
    out.decode_budget = report.policy.kind == PolicyKind::FullCache ? 0 : report.policy.decode_budget;
    if (report.n_layers == 0 || report.step_ns.empty()) {
        return out;
    }
    double policy_total = 0.0;
    double step_total = 0.0;
    for (std::size_t t = 0; t < report.step_ns.size(); ++t) {
        std::int64_t policy_ns = 0;
        bool full = true;
        for (std::size_t l = 0; l < report.n_layers; ++l) {
            const auto& rec = report.steps[t * report.n_layers + l];
            policy_ns += rec.policy_ns;
            full = full && rec.evicted > 0;
        }
        if (steady_state_only && !full) {
            continue;
        }
        policy_total += static_cast<double>(policy_ns);
        step_total += static_cast<double>(report.step_ns[t]);
        ++out.steps_measured;
    }
    if (out.steps_measured == 0) {
        return out;
    }
    out.mean_policy_ns = policy_total / static_cast<double>(out.steps_measured);
    out.mean_step_ns = step_total / static_cast<double>(out.steps_measured);
    out.policy_share = out.mean_step_ns > 0.0 ? out.mean_policy_ns / out.mean_step_ns : 0.0;
    return out;
}

}  // namespace momentkv
