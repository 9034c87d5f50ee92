// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

// Scalar kernels shared by the inference forward and the differentiable
// forward, so both paths accumulate in the same order.

#pragma once

#include <cmath>
#include <span>

#include "dlm/common.hpp"

namespace dlm::kernels {

inline constexpr double kRmsEps = 1e-6;

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

/// out[j] = sum_k x[k] * w(j, k), i.e. one row of x * W^T.
inline void matvec_nt(std::span<const double> x, const Matrix& w, std::span<double> out) {
    for (std::size_t j = 0; j < w.rows; ++j) {
        const double* wr = w.data.data() + j * w.cols;
        double acc = 0.0;
        for (std::size_t k = 0; k < w.cols; ++k) acc += x[k] * wr[k];
        out[j] = acc;
    }
}

/// Returns the inverse RMS used, for reuse in backward passes.
inline double rmsnorm(std::span<const double> x, std::span<const double> gain, std::span<double> out) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kRmsEps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
    return inv;
}

/// Rotates consecutive pairs of each head slice by pos * base^(-2i/head_dim).
/// `sign` = -1 applies the inverse rotation.
inline void rope_rotate(std::span<double> v, std::size_t n_heads, std::size_t pos, double base, double sign = 1.0) {
    const std::size_t hd = v.size() / n_heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        double* p = v.data() + h * hd;
        for (std::size_t i = 0; i < hd / 2; ++i) {
            const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const double angle = sign * static_cast<double>(pos) * theta;
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            const double a = p[2 * i];
            const double b = p[2 * i + 1];
            p[2 * i] = a * c - b * s;
            p[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Single-head softmax attention of query slice `q` against the rows of
/// `keys`/`values` listed in `allowed` (ascending). Writes the head output into
/// `out` and the attention probabilities into `probs` (size allowed.size()).
inline void attend_head(const double* q, const Matrix& keys, const Matrix& values,
                        std::span<const std::size_t> allowed, std::size_t head, std::size_t hd,
                        double* out, double* probs) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t off = head * hd;
    for (std::size_t a = 0; a < allowed.size(); ++a) {
        const double* k = keys.data.data() + allowed[a] * keys.cols + off;
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c) dot += q[off + c] * k[c];
        probs[a] = dot * scale;
    }
    softmax_inplace(std::span<double>(probs, allowed.size()));
    for (std::size_t c = 0; c < hd; ++c) out[off + c] = 0.0;
    for (std::size_t a = 0; a < allowed.size(); ++a) {
        const double* v = values.data.data() + allowed[a] * values.cols + off;
        const double p = probs[a];
        for (std::size_t c = 0; c < hd; ++c) out[off + c] += p * v[c];
    }
}

}  // namespace dlm::kernels
