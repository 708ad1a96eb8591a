// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "momentkv/error.hpp"

namespace momentkv {

inline constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

enum class Phase : std::uint8_t { Prefill, Decode };

/// Geometry of the key/value vectors stored per slot. A zero-sized shape is
/// valid and is what trace replay uses: it only needs slot bookkeeping.
struct PoolShape {
    std::size_t n_heads = 0;
    std::size_t head_dim = 0;

    std::size_t vector_size() const { return n_heads * head_dim; }
    bool operator==(const PoolShape&) const = default;
};

/// One cached token. `key`/`value` are head-major: head h occupies
/// [h * head_dim, (h + 1) * head_dim).
struct TokenSlot {
    std::int64_t global_position = 0;
    std::vector<float> key;
    std::vector<float> value;
    Phase phase = Phase::Decode;

    std::span<const float> key_head(std::size_t head, std::size_t head_dim) const {
        return std::span<const float>(key).subspan(head * head_dim, head_dim);
    }
    std::span<const float> value_head(std::size_t head, std::size_t head_dim) const {
        return std::span<const float>(value).subspan(head * head_dim, head_dim);
    }

    bool operator==(const TokenSlot&) const = default;
};

/// Per-decode-slot scores, index-aligned with CachePool::decode(). Stored in
/// double regardless of the model precision.
class ImportanceVector {
public:
    explicit ImportanceVector(double momentum_alpha = 1.0) : momentum_alpha_(momentum_alpha) {
        if (!(momentum_alpha >= 0.0 && momentum_alpha <= 1.0)) {
            throw Error(ErrorCode::InvalidConfig, "momentum_alpha must lie in [0, 1]");
        }
    }

    double momentum_alpha() const { return momentum_alpha_; }
    std::size_t size() const { return scores_.size(); }
    bool empty() const { return scores_.empty(); }

    double operator[](std::size_t i) const { return scores_[i]; }
    double& operator[](std::size_t i) { return scores_[i]; }

    std::span<const double> scores() const { return scores_; }
    std::span<double> scores() { return scores_; }

    void append_zero() { scores_.push_back(0.0); }

    /// Removes the entries at `sorted_indices` (strictly increasing, validated by the caller).
    void erase_sorted(std::span<const std::size_t> sorted_indices) {
        compact(scores_, sorted_indices);
    }

    template <typename T>
    static void compact(std::vector<T>& items, std::span<const std::size_t> sorted_indices) {
        if (sorted_indices.empty()) {
            return;
        }
        std::size_t write = sorted_indices.front();
        std::size_t next_victim = 0;
        for (std::size_t read = sorted_indices.front(); read < items.size(); ++read) {
            if (next_victim < sorted_indices.size() && read == sorted_indices[next_victim]) {
                ++next_victim;
                continue;
            }
            items[write++] = std::move(items[read]);
        }
        items.resize(write);
    }

private:
    std::vector<double> scores_;
    double momentum_alpha_;
};

/// Two-pool KV store: a prefill pool written once and never touched again,
/// and a decode pool bounded by `decode_budget` after every enforcement.
/// The pool only executes evictions; which slots go is a policy decision.
class CachePool {
public:
    CachePool(PoolShape shape, std::size_t decode_budget) : shape_(shape), decode_budget_(decode_budget) {
        if (decode_budget == 0) {
            throw Error(ErrorCode::InvalidConfig, "decode_budget must be >= 1");
        }
    }

    void append_prefill(std::vector<TokenSlot> slots) {
        if (prefilled_) {
            throw Error(ErrorCode::AlreadyPrefilled, "prefill pool is already populated");
        }
        if (slots.empty()) {
            throw Error(ErrorCode::EmptyPrompt, "prefill requires at least one slot");
        }
        std::int64_t last = std::numeric_limits<std::int64_t>::min();
        for (const auto& slot : slots) {
            if (slot.phase != Phase::Prefill) {
                throw Error(ErrorCode::PhaseMismatch, "append_prefill given a Decode slot");
            }
            check_dimensions(slot);
            if (slot.global_position <= last) {
                throw Error(ErrorCode::PositionOrder, "prefill positions must be strictly increasing");
            }
            last = slot.global_position;
        }
        prefill_ = std::move(slots);
        prefilled_ = true;
        next_position_ = last + 1;
    }

    /// Appends one decode slot and a zero score. The pool may transiently hold
    /// decode_budget + k slots until the caller enforces the budget.
    void append_decode(TokenSlot slot, ImportanceVector& importance) {
        if (!prefilled_) {
            throw Error(ErrorCode::NotPrefilled, "append_decode before prefill");
        }
        if (slot.phase != Phase::Decode) {
            throw Error(ErrorCode::PhaseMismatch, "append_decode given a Prefill slot");
        }
        check_dimensions(slot);
        // Compared against every position ever appended, evicted ones included.
        const std::int64_t last = next_position_ - 1;
        if (slot.global_position <= last) {
            throw Error(ErrorCode::PositionOrder, "decode position " + std::to_string(slot.global_position) +
                                                      " does not follow " + std::to_string(last));
        }
        check_aligned(importance);
        next_position_ = slot.global_position + 1;
        decode_.push_back(std::move(slot));
        importance.append_zero();
    }

    /// Removes decode slots (and their scores) at the given decode-pool
    /// indices. Indices may be given in any order but must be distinct.
    void evict_indices(std::span<const std::size_t> indices, ImportanceVector& importance) {
        check_aligned(importance);
        if (indices.empty()) {
            return;
        }
        std::vector<std::size_t> sorted(indices.begin(), indices.end());
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            if (sorted[i] >= decode_.size()) {
                throw Error(ErrorCode::IndexOutOfRange, "decode index " + std::to_string(sorted[i]) +
                                                            " >= decode size " + std::to_string(decode_.size()));
            }
            if (i > 0 && sorted[i] == sorted[i - 1]) {
                throw Error(ErrorCode::IndexOutOfRange, "duplicate decode index " + std::to_string(sorted[i]));
            }
        }
        ImportanceVector::compact(decode_, sorted);
        importance.erase_sorted(sorted);
    }

    /// Position-addressed eviction. Any position belonging to the prefill
    /// pool is rejected before anything is removed.
    void evict_positions(std::span<const std::int64_t> positions, ImportanceVector& importance) {
        std::vector<std::size_t> indices;
        indices.reserve(positions.size());
        for (const std::int64_t pos : positions) {
            if (!prefill_.empty() && pos <= prefill_.back().global_position) {
                throw Error(ErrorCode::PrefillEvictionAttempt,
                            "position " + std::to_string(pos) + " belongs to the frozen prefill pool");
            }
            const auto it = std::lower_bound(decode_.begin(), decode_.end(), pos,
                                             [](const TokenSlot& s, std::int64_t p) { return s.global_position < p; });
            if (it == decode_.end() || it->global_position != pos) {
                throw Error(ErrorCode::IndexOutOfRange, "position " + std::to_string(pos) + " is not cached");
            }
            indices.push_back(static_cast<std::size_t>(it - decode_.begin()));
        }
        evict_indices(indices, importance);
    }

    std::size_t total_size() const { return prefill_.size() + decode_.size(); }
    std::size_t overflow() const { return decode_.size() > decode_budget_ ? decode_.size() - decode_budget_ : 0; }

    bool prefilled() const { return prefilled_; }
    std::size_t prefill_len() const { return prefill_.size(); }
    std::size_t decode_size() const { return decode_.size(); }
    std::size_t decode_budget() const { return decode_budget_; }
    const PoolShape& shape() const { return shape_; }

    const std::vector<TokenSlot>& prefill() const { return prefill_; }
    const std::vector<TokenSlot>& decode() const { return decode_; }

    /// Slot i of the concatenated view prefill ++ decode.
    const TokenSlot& slot(std::size_t i) const {
        return i < prefill_.size() ? prefill_[i] : decode_[i - prefill_.size()];
    }

    std::vector<std::int64_t> decode_positions() const {
        std::vector<std::int64_t> out;
        out.reserve(decode_.size());
        for (const auto& s : decode_) {
            out.push_back(s.global_position);
        }
        return out;
    }

    /// Global position the next decode slot should take (M + t - 1 for step t).
    /// One past the newest position ever appended.
    std::int64_t next_position() const { return next_position_; }

private:
    void check_dimensions(const TokenSlot& slot) const {
        const std::size_t want = shape_.vector_size();
        if (slot.key.size() != want || slot.value.size() != want) {
            throw Error(ErrorCode::DimensionMismatch, "slot vectors have " + std::to_string(slot.key.size()) + "/" +
                                                          std::to_string(slot.value.size()) + " values, expected " +
                                                          std::to_string(want));
        }
    }

    void check_aligned(const ImportanceVector& importance) const {
        if (importance.size() != decode_.size()) {
            throw Error(ErrorCode::LengthMismatch, "importance vector has " + std::to_string(importance.size()) +
                                                       " entries for " + std::to_string(decode_.size()) +
                                                       " decode slots");
        }
    }

    PoolShape shape_;
    std::size_t decode_budget_;
    bool prefilled_ = false;
    std::int64_t next_position_ = 0;
    std::vector<TokenSlot> prefill_;
    std::vector<TokenSlot> decode_;
};

}  // namespace momentkv
