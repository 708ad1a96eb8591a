// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

namespace momentkv {

/// Head-averaged attention of one query over the cache as it stood when the
/// attention was computed: prefill slots first, then decode slots, both in
/// slot order.
struct AttentionRow {
    std::vector<float> weights;
    std::int64_t step = 0;
    std::size_t prefill_len = 0;

    std::size_t size() const { return weights.size(); }

    std::span<const float> decode_slice() const {
        return std::span<const float>(weights).subspan(prefill_len);
    }

    double sum() const {
        double total = 0.0;
        for (const float w : weights) {
            total += w;
        }
        return total;
    }

    bool normalized(double tolerance) const {
        for (const float w : weights) {
            if (!(w >= 0.0f) || !std::isfinite(w)) {
                return false;
            }
        }
        return std::abs(sum() - 1.0) <= tolerance;
    }

    bool operator==(const AttentionRow&) const = default;
};

}  // namespace momentkv
