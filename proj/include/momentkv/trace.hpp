// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "momentkv/attention_row.hpp"
#include "momentkv/error.hpp"
#include "momentkv/model.hpp"

namespace momentkv {

enum class TraceSource : std::uint8_t { Captured = 0, Synthetic = 1, ToyModel = 2 };

constexpr std::string_view to_string(TraceSource source) {
    switch (source) {
        case TraceSource::Captured: return "Captured";
        case TraceSource::Synthetic: return "Synthetic";
        case TraceSource::ToyModel: return "ToyModel";
    }
    return "Unknown";
}

inline constexpr std::array<char, 8> kTraceMagic = {'A', 'T', 'T', 'R', 'C', '0', '1', '\0'};
/// Row-sum tolerance enforced when reading a file.
inline constexpr double kReadTolerance = 1e-3;
/// Row-sum tolerance enforced before writing.
inline constexpr double kWriteTolerance = 1e-5;

struct TraceHeader {
    std::size_t prefill_len = 0;
    std::size_t n_steps = 0;
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;  // 1 when head_averaged
    bool head_averaged = true;
    TraceSource source = TraceSource::Synthetic;
    std::string model_tag;
    std::vector<std::int64_t> hitter_positions;  // optional labels for retention metrics

    bool operator==(const TraceHeader&) const = default;
};

/// Uncompressed head-averaged attention: rows[t - 1][layer] covers all
/// M + t positions of step t, indexed by global position.
struct TraceFile {
    TraceHeader header;
    std::vector<std::vector<std::vector<float>>> rows;

    const std::vector<float>& row(std::size_t step, std::size_t layer) const { return rows[step - 1][layer]; }

    AttentionRow attention_row(std::size_t step, std::size_t layer) const {
        return AttentionRow{row(step, layer), static_cast<std::int64_t>(step), header.prefill_len};
    }

    bool operator==(const TraceFile&) const = default;
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<unsigned char>(v >> (8 * i));
    }
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<unsigned char>(v >> (8 * i));
    }
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
public:
    explicit ByteReader(std::istream& in) : in_(in) {}

    void read(void* dst, std::size_t n, const std::string& what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw Error(ErrorCode::TruncatedTrace, "stream ended while reading " + what);
        }
    }

    std::uint64_t u64(const std::string& what) {
        unsigned char b[8];
        read(b, 8, what);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) {
            v = (v << 8) | b[i];
        }
        return v;
    }

    std::uint32_t u32(const std::string& what) {
        unsigned char b[4];
        read(b, 4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) {
            v = (v << 8) | b[i];
        }
        return v;
    }

    std::uint8_t u8(const std::string& what) {
        unsigned char b = 0;
        read(&b, 1, what);
        return b;
    }

    void f32_block(std::vector<float>& out, std::size_t n, const std::string& what) {
        std::vector<unsigned char> raw(n * 4);
        read(raw.data(), raw.size(), what);
        out.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const unsigned char* b = raw.data() + 4 * i;
            const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                       (static_cast<std::uint32_t>(b[2]) << 16) |
                                       (static_cast<std::uint32_t>(b[3]) << 24);
            out[i] = std::bit_cast<float>(bits);
        }
    }

    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    std::istream& in_;
};

inline std::string where(std::size_t step, std::size_t layer) {
    return "step " + std::to_string(step) + " layer " + std::to_string(layer);
}

inline void check_sum(std::span<const float> row, double tolerance, const std::string& location) {
    double total = 0.0;
    for (const float w : row) {
        if (!(w >= 0.0f) || !std::isfinite(w)) {
            throw Error(ErrorCode::NormalizationViolation, location + ": negative or non-finite weight");
        }
        total += w;
    }
    if (std::abs(total - 1.0) > tolerance) {
        throw Error(ErrorCode::NormalizationViolation, location + ": row sums to " + std::to_string(total));
    }
}

}  // namespace detail

/// Checks header/body consistency; throws on the first problem.
inline void validate_trace(const TraceFile& trace, double tolerance = kWriteTolerance) {
    const auto& h = trace.header;
    if (h.prefill_len < 1 || h.n_steps < 1 || h.n_layers < 1) {
        throw Error(ErrorCode::InvalidConfig, "trace needs prefill_len, n_steps and n_layers >= 1");
    }
    if (trace.rows.size() != h.n_steps) {
        throw Error(ErrorCode::LengthMismatch, "trace holds " + std::to_string(trace.rows.size()) + " steps, header says " +
                                                   std::to_string(h.n_steps));
    }
    for (std::size_t t = 1; t <= h.n_steps; ++t) {
        if (trace.rows[t - 1].size() != h.n_layers) {
            throw Error(ErrorCode::LengthMismatch, "step " + std::to_string(t) + " has wrong layer count");
        }
        for (std::size_t l = 0; l < h.n_layers; ++l) {
            const auto& row = trace.row(t, l);
            if (row.size() != h.prefill_len + t) {
                throw Error(ErrorCode::LengthMismatch, detail::where(t, l) + ": row length " +
                                                           std::to_string(row.size()) + " != " +
                                                           std::to_string(h.prefill_len + t));
            }
            detail::check_sum(row, tolerance, detail::where(t, l));
        }
    }
}

/// Serializes in the ATTRC01 layout (see docs/trace_format.md). In-memory
/// traces are always head-averaged, so the file is written with n_heads = 1.
inline void write_trace(std::ostream& out, const TraceFile& trace) {
    validate_trace(trace, kWriteTolerance);
    const auto& h = trace.header;
    out.write(kTraceMagic.data(), kTraceMagic.size());
    detail::put_u64(out, h.prefill_len);
    detail::put_u64(out, h.n_steps);
    detail::put_u64(out, h.n_layers);
    detail::put_u64(out, 1);
    out.put(static_cast<char>(1));
    out.put(static_cast<char>(h.source));
    detail::put_u32(out, static_cast<std::uint32_t>(h.model_tag.size()));
    out.write(h.model_tag.data(), static_cast<std::streamsize>(h.model_tag.size()));
    detail::put_u64(out, h.hitter_positions.size());
    for (const auto p : h.hitter_positions) {
        detail::put_u64(out, static_cast<std::uint64_t>(p));
    }
    for (const auto& step : trace.rows) {
        for (const auto& row : step) {
            for (const float w : row) {
                detail::put_f32(out, w);
            }
        }
    }
    if (!out) {
        throw Error(ErrorCode::IoError, "failed writing trace");
    }
}

inline void write_trace(const std::string& path, const TraceFile& trace) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    }
    write_trace(out, trace);
}

/// Parses an ATTRC01 stream. Per-head files are averaged over heads on load.
inline TraceFile read_trace(std::istream& in) {
    detail::ByteReader reader(in);
    std::array<char, 8> magic{};
    reader.read(magic.data(), magic.size(), "magic");
    if (magic != kTraceMagic) {
        throw Error(ErrorCode::BadMagic, "not an ATTRC01 trace");
    }
    TraceFile trace;
    auto& h = trace.header;
    h.prefill_len = reader.u64("prefill_len");
    h.n_steps = reader.u64("n_steps");
    h.n_layers = reader.u64("n_layers");
    h.n_heads = reader.u64("n_heads");
    const std::uint8_t averaged = reader.u8("head_averaged");
    const std::uint8_t source = reader.u8("source");
    if (h.prefill_len < 1 || h.n_steps < 1 || h.n_layers < 1 || h.n_heads < 1 || averaged > 1 || source > 2 ||
        (averaged == 1 && h.n_heads != 1)) {
        throw Error(ErrorCode::InvalidConfig, "inconsistent trace header");
    }
    h.head_averaged = averaged == 1;
    h.source = static_cast<TraceSource>(source);
    const std::uint32_t tag_len = reader.u32("model_tag length");
    h.model_tag.resize(tag_len);
    reader.read(h.model_tag.data(), tag_len, "model_tag");
    const std::uint64_t n_labels = reader.u64("label count");
    if (n_labels > h.prefill_len + h.n_steps) {
        throw Error(ErrorCode::InvalidConfig, "more hitter labels than positions");
    }
    for (std::uint64_t i = 0; i < n_labels; ++i) {
        h.hitter_positions.push_back(static_cast<std::int64_t>(reader.u64("hitter label")));
    }

    trace.rows.resize(h.n_steps);
    std::vector<float> head_row;
    for (std::size_t t = 1; t <= h.n_steps; ++t) {
        auto& layers = trace.rows[t - 1];
        layers.resize(h.n_layers);
        const std::size_t len = h.prefill_len + t;
        for (std::size_t l = 0; l < h.n_layers; ++l) {
            if (h.n_heads == 1) {
                reader.f32_block(layers[l], len, detail::where(t, l));
                detail::check_sum(layers[l], kReadTolerance, detail::where(t, l));
                continue;
            }
            std::vector<double> acc(len, 0.0);
            for (std::size_t head = 0; head < h.n_heads; ++head) {
                const std::string loc = detail::where(t, l) + " head " + std::to_string(head);
                reader.f32_block(head_row, len, loc);
                detail::check_sum(head_row, kReadTolerance, loc);
                for (std::size_t j = 0; j < len; ++j) {
                    acc[j] += head_row[j];
                }
            }
            layers[l].resize(len);
            for (std::size_t j = 0; j < len; ++j) {
                layers[l][j] = static_cast<float>(acc[j] / static_cast<double>(h.n_heads));
            }
        }
    }
    if (!reader.at_end()) {
        throw Error(ErrorCode::InvalidConfig, "trailing bytes after the last row");
    }
    h.n_heads = 1;
    h.head_averaged = true;
    return trace;
}

inline TraceFile read_trace(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::NotFound, "cannot open trace '" + path + "'");
    }
    return read_trace(in);
}

// ---------------------------------------------------------------------------
// Synthetic generators

struct HitterSpec {
    std::int64_t position = 0;
    double base_mass = 0.0;
};

struct DipSpec {
    std::int64_t position = 0;
    std::size_t start_step = 1;
    std::size_t dip_len = 1;
};

struct HeavyHitterOptions {
    std::size_t n_layers = 1;
    /// Per-step multiplicative jitter on background weights, in [0, 1).
    double noise = 0.0;
    /// Spread of the persistent per-token salience exp(spread * u), u in [-1, 1).
    double salience_spread = 0.0;
    /// Mass given to the `recent_span` newest tokens (local bursts).
    double recent_mass = 0.0;
    std::size_t recent_span = 1;
};

namespace detail {

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    SplitMix64 rng(a * 0x9E3779B97F4A7C15ULL + b);
    return rng.next();
}

/// Scales `row` so it sums to one and casts to float.
inline std::vector<float> finalize_row(const std::vector<double>& row) {
    double total = 0.0;
    for (const double w : row) {
        total += w;
    }
    std::vector<float> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
        out[i] = static_cast<float>(row[i] / total);
    }
    return out;
}

}  // namespace detail

/// Heavy hitters with temporary dips over a noisy background. Every row is
/// normalized; a hitter gets its base mass whenever it exists and is not in
/// a dip, and the background share otherwise.
inline TraceFile gen_heavy_hitter_trace(std::size_t prefill_len, std::size_t n_steps, std::span<const HitterSpec> hitters,
                                        std::span<const DipSpec> dips, std::uint64_t seed,
                                        const HeavyHitterOptions& options = {}) {
    if (prefill_len < 1 || n_steps < 1 || options.n_layers < 1) {
        throw Error(ErrorCode::InvalidConfig, "prefill_len, n_steps and n_layers must be >= 1");
    }
    if (!(options.noise >= 0.0 && options.noise < 1.0) || options.salience_spread < 0.0 ||
        !(options.recent_mass >= 0.0 && options.recent_mass < 1.0) || options.recent_span < 1) {
        throw Error(ErrorCode::InvalidConfig, "invalid generator options");
    }
    const auto limit = static_cast<std::int64_t>(prefill_len + n_steps);
    double hitter_total = options.recent_mass;
    for (const auto& h : hitters) {
        if (h.position < 0 || h.position >= limit || !(h.base_mass > 0.0)) {
            throw Error(ErrorCode::InvalidConfig, "hitter position or mass out of range");
        }
        hitter_total += h.base_mass;
    }
    if (hitter_total >= 1.0) {
        throw Error(ErrorCode::InvalidConfig, "hitter and recent masses must sum below 1");
    }
    for (const auto& d : dips) {
        const bool known = std::any_of(hitters.begin(), hitters.end(),
                                       [&](const HitterSpec& h) { return h.position == d.position; });
        if (!known || d.dip_len < 1 || d.start_step < 1 || d.start_step + d.dip_len - 1 > n_steps) {
            throw Error(ErrorCode::InvalidDipWindow, "dip on position " + std::to_string(d.position) +
                                                         " must target a hitter and lie within [1, " +
                                                         std::to_string(n_steps) + "]");
        }
    }

    std::vector<double> salience(static_cast<std::size_t>(limit), 1.0);
    if (options.salience_spread > 0.0) {
        for (std::size_t p = 0; p < salience.size(); ++p) {
            detail::SplitMix64 rng(detail::mix(seed, 0x5A11E7CEULL + p));
            salience[p] = std::exp(options.salience_spread * rng.symmetric());
        }
    }

    TraceFile trace;
    trace.header = TraceHeader{prefill_len, n_steps, options.n_layers, 1, true, TraceSource::Synthetic,
                               "synthetic:heavy-hitter", {}};
    for (const auto& h : hitters) {
        trace.header.hitter_positions.push_back(h.position);
    }
    trace.rows.resize(n_steps);
    std::vector<double> row;
    std::vector<std::uint8_t> role;  // 0 background, 1 hitter, 2 recent
    for (std::size_t t = 1; t <= n_steps; ++t) {
        const std::size_t n = prefill_len + t;
        auto& layers = trace.rows[t - 1];
        layers.reserve(options.n_layers);
        for (std::size_t l = 0; l < options.n_layers; ++l) {
            detail::SplitMix64 rng(detail::mix(seed, (static_cast<std::uint64_t>(t) << 16) ^ l));
            row.assign(n, 0.0);
            role.assign(n, 0);
            double fixed = 0.0;
            for (const auto& h : hitters) {
                if (h.position >= static_cast<std::int64_t>(n)) {
                    continue;
                }
                const bool dipped = std::any_of(dips.begin(), dips.end(), [&](const DipSpec& d) {
                    return d.position == h.position && t >= d.start_step && t < d.start_step + d.dip_len;
                });
                if (!dipped) {
                    row[static_cast<std::size_t>(h.position)] += h.base_mass;
                    role[static_cast<std::size_t>(h.position)] = 1;
                    fixed += h.base_mass;
                }
            }
            if (options.recent_mass > 0.0) {
                std::vector<std::size_t> recent;
                for (std::size_t p = n; p-- > 0 && recent.size() < options.recent_span;) {
                    if (role[p] == 0 && p >= prefill_len) {
                        recent.push_back(p);
                    }
                }
                for (const auto p : recent) {
                    row[p] = options.recent_mass / static_cast<double>(recent.size());
                    role[p] = 2;
                }
                if (!recent.empty()) {
                    fixed += options.recent_mass;
                }
            }
            double bg_total = 0.0;
            for (std::size_t p = 0; p < n; ++p) {
                const double jitter = options.noise > 0.0 ? 1.0 + options.noise * rng.symmetric() : 1.0;
                if (role[p] == 0) {
                    row[p] = salience[p] * jitter;
                    bg_total += row[p];
                }
            }
            const double bg_share = 1.0 - fixed;
            if (bg_total > 0.0) {
                for (std::size_t p = 0; p < n; ++p) {
                    if (role[p] == 0) {
                        row[p] *= bg_share / bg_total;
                    }
                }
            }
            layers.push_back(detail::finalize_row(row));
        }
    }
    return trace;
}

/// Concentrated recency attention: within the last `window` decode tokens
/// (fewer early on) a ceil(concentration * W)-sized burst set, always
/// including the newest token, holds `burst_share` of the window's mass.
/// Everything outside the window shares the remaining row mass uniformly.
inline TraceFile gen_recency_burst_trace(std::size_t prefill_len, std::size_t n_steps, double concentration,
                                         std::uint64_t seed, std::size_t n_layers = 1, std::size_t window = 256,
                                         double burst_share = 0.9, double window_share = 0.6) {
    if (!(concentration > 0.0 && concentration <= 1.0)) {
        throw Error(ErrorCode::BadConcentration, "concentration must lie in (0, 1]");
    }
    if (prefill_len < 1 || n_steps < 1 || n_layers < 1 || window < 1 || !(burst_share > 0.0 && burst_share <= 1.0) ||
        !(window_share > 0.0 && window_share < 1.0)) {
        throw Error(ErrorCode::InvalidConfig, "invalid recency-burst parameters");
    }
    TraceFile trace;
    trace.header = TraceHeader{prefill_len, n_steps, n_layers, 1, true, TraceSource::Synthetic,
                               "synthetic:recency-burst", {}};
    trace.rows.resize(n_steps);
    std::vector<double> row;
    std::vector<std::size_t> pool;
    for (std::size_t t = 1; t <= n_steps; ++t) {
        const std::size_t n = prefill_len + t;
        const std::size_t w = std::min(window, t);
        const std::size_t first = n - w;
        const auto k = static_cast<std::size_t>(std::ceil(concentration * static_cast<double>(w) - 1e-12));
        for (std::size_t l = 0; l < n_layers; ++l) {
            detail::SplitMix64 rng(detail::mix(seed, (static_cast<std::uint64_t>(t) << 16) ^ l));
            row.assign(n, 0.0);
            for (std::size_t p = 0; p < first; ++p) {
                row[p] = (1.0 - window_share) / static_cast<double>(first);
            }
            if (k >= w) {
                for (std::size_t p = first; p < n; ++p) {
                    row[p] = window_share / static_cast<double>(w);
                }
            } else {
                // Newest token is always in the burst; the rest are a seeded
                // partial shuffle of the older window positions.
                pool.clear();
                for (std::size_t p = first; p + 1 < n; ++p) {
                    pool.push_back(p);
                }
                for (std::size_t i = 0; i + 1 < k; ++i) {
                    const std::size_t j = i + static_cast<std::size_t>(rng.next() % (pool.size() - i));
                    std::swap(pool[i], pool[j]);
                }
                const double quiet = window_share * (1.0 - burst_share) / static_cast<double>(w - k);
                for (std::size_t p = first; p < n; ++p) {
                    row[p] = quiet;
                }
                const double loud = window_share * burst_share / static_cast<double>(k);
                row[n - 1] = loud;
                for (std::size_t i = 0; i + 1 < k; ++i) {
                    row[pool[i]] = loud;
                }
            }
            trace.rows[t - 1].push_back(detail::finalize_row(row));
        }
    }
    return trace;
}

}  // namespace momentkv
