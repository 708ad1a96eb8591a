// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "momentkv/attention_row.hpp"
#include "momentkv/error.hpp"

namespace momentkv::testing {

/// Softmax of random logits: strictly positive, sums to one.
inline AttentionRow random_row(std::mt19937_64& rng, std::size_t prefill_len, std::size_t decode_len,
                               std::int64_t step, double spread = 3.0) {
    std::uniform_real_distribution<double> logit(-spread, spread);
    const std::size_t n = prefill_len + decode_len;
    std::vector<double> e(n);
    double total = 0.0;
    for (auto& v : e) {
        v = std::exp(logit(rng));
        total += v;
    }
    AttentionRow row{std::vector<float>(n), step, prefill_len};
    for (std::size_t i = 0; i < n; ++i) {
        row.weights[i] = static_cast<float>(e[i] / total);
    }
    return row;
}

template <typename Fn>
ErrorCode error_code_of(Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return static_cast<ErrorCode>(-1);
}

}  // namespace momentkv::testing
