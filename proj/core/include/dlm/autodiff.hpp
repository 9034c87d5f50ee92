// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal reverse-mode differentiation over dense matrices. A Tape records
// each op's value and a closure that pushes the op's output gradient into its
// inputs; backward() replays the closures in reverse.

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dlm/common.hpp"

namespace dlm::ad {

struct Var {
    std::size_t id = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Var constant(Matrix value);
    /// Leaf whose gradient is added into *sink on backward(). sink may be null.
    Var parameter(const Matrix& value, Matrix* sink);

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    Matrix& grad(Var v) { return grad_at(v.id); }
    Matrix& grad_at(std::size_t id);
    const Matrix& value_at(std::size_t id) const { return nodes_[id].value; }

    Var push(Matrix value, Backward backward);

    /// Seeds d(out)/d(out) = seed for a 1x1 output and propagates.
    void backward(Var scalar_out, double seed = 1.0);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        Backward backward;
        Matrix* sink = nullptr;
    };
    std::vector<Node> nodes_;
};

/// X (n x k) times W^T (W is m x k) -> n x m.
Var matmul_nt(Tape& t, Var x, Var w);
Var add(Tape& t, Var a, Var b);
/// Adds a 1 x m row to every row of x.
Var add_row(Tape& t, Var x, Var bias);
Var scale(Tape& t, Var x, double c);
Var mul(Tape& t, Var a, Var b);
Var silu(Tape& t, Var x);
/// Row-wise RMS normalisation with a 1 x d gain.
Var rmsnorm(Tape& t, Var x, Var gain);
/// Rotary embedding of each row using its position.
Var rope(Tape& t, Var x, const std::vector<std::size_t>& positions, std::size_t n_heads, double base);
/// Multi-head attention; allow is a row-major n x m 0/1 matrix over (query row, key row).
Var attention(Tape& t, Var q, Var k, Var v, const std::vector<std::uint8_t>& allow, std::size_t n_heads);
Var embedding(Tape& t, Var table, const std::vector<TokenId>& ids);
Var concat_cols(Tape& t, Var a, Var b);
/// sum_r weight[r] * (-log softmax(logits[r])[target[r]]); rows with zero weight are skipped.
Var weighted_nll(Tape& t, Var logits, const std::vector<TokenId>& targets, const std::vector<double>& weights);
/// sum of squared differences between x and a constant target.
Var squared_error(Tape& t, Var x, const Matrix& target);

/// Mixture-of-experts combination. For row r the output is
/// sum_k w[r][k] * experts[selection[r][k]][r] where w[r] is the softmax of
/// gate_scale * gate[r][selection[r][k]].
Var moe_combine(Tape& t, Var gate, const std::vector<Var>& experts,
                const std::vector<std::vector<std::size_t>>& selection, double gate_scale);

}  // namespace dlm::ad
