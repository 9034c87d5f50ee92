// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dlm/autodiff.hpp"

namespace dlm::ad {
namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (double& v : m.data) v = scale * rng.normal();
    return m;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Loss = squared error of the op output against a fixed target; compares the
// tape gradient of every input with central differences.
void check_op(const Builder& op, std::vector<Matrix> inputs, std::uint64_t seed, double tol = 1e-5) {
    Rng rng(seed);
    Matrix target;
    auto eval = [&](std::vector<Matrix>& in, std::vector<Matrix>* grads) {
        Tape t;
        std::vector<Var> vars;
        for (std::size_t i = 0; i < in.size(); ++i) vars.push_back(t.parameter(in[i], grads ? &(*grads)[i] : nullptr));
        const Var out = op(t, vars);
        if (target.size() == 0) target = random_matrix(t.value(out).rows, t.value(out).cols, rng);
        const Var loss = squared_error(t, out, target);
        const double v = t.value(loss)(0, 0);
        if (grads) t.backward(loss);
        return v;
    };
    std::vector<Matrix> grads;
    for (const auto& m : inputs) grads.emplace_back(m.rows, m.cols);
    eval(inputs, &grads);
    const double eps = 1e-6;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t k = 0; k < inputs[i].size(); ++k) {
            const double orig = inputs[i].data[k];
            inputs[i].data[k] = orig + eps;
            const double up = eval(inputs, nullptr);
            inputs[i].data[k] = orig - eps;
            const double down = eval(inputs, nullptr);
            inputs[i].data[k] = orig;
            const double num = (up - down) / (2 * eps);
            const double a = grads[i].data[k];
            EXPECT_LT(std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-5}), tol)
                << "input " << i << " coord " << k << " analytic " << a << " numeric " << num;
        }
    }
}

TEST(Autodiff, SquaredErrorValueAndGradient) {
    Tape t;
    Matrix g(1, 3);
    Matrix x(1, 3);
    x.data = {1.0, -2.0, 0.5};
    Matrix y(1, 3);
    y.data = {0.0, 1.0, 0.5};
    const Var loss = squared_error(t, t.parameter(x, &g), y);
    EXPECT_DOUBLE_EQ(t.value(loss)(0, 0), 1.0 + 9.0);
    t.backward(loss);
    EXPECT_EQ(g.data, (std::vector<double>{2.0, -6.0, 0.0}));
}

TEST(Autodiff, GradientsAccumulateIntoSinks) {
    Tape t;
    Matrix g(1, 1, 5.0);
    const Var x = t.parameter(Matrix(1, 1, 3.0), &g);
    const Var y = mul(t, x, x);
    t.backward(y);
    EXPECT_DOUBLE_EQ(g(0, 0), 5.0 + 6.0);
}

TEST(Autodiff, MatmulAddScale) {
    Rng rng(1);
    check_op([](Tape& t, const std::vector<Var>& v) { return matmul_nt(t, v[0], v[1]); },
             {random_matrix(3, 4, rng), random_matrix(5, 4, rng)}, 2);
    check_op([](Tape& t, const std::vector<Var>& v) { return add(t, v[0], scale(t, v[1], -1.5)); },
             {random_matrix(2, 3, rng), random_matrix(2, 3, rng)}, 3);
    check_op([](Tape& t, const std::vector<Var>& v) { return add_row(t, v[0], v[1]); },
             {random_matrix(4, 3, rng), random_matrix(1, 3, rng)}, 4);
    check_op([](Tape& t, const std::vector<Var>& v) { return mul(t, v[0], v[1]); },
             {random_matrix(2, 3, rng), random_matrix(2, 3, rng)}, 5);
}

TEST(Autodiff, Nonlinearities) {
    Rng rng(6);
    check_op([](Tape& t, const std::vector<Var>& v) { return silu(t, v[0]); }, {random_matrix(3, 5, rng, 2.0)}, 7);
    check_op([](Tape& t, const std::vector<Var>& v) { return rmsnorm(t, v[0], v[1]); },
             {random_matrix(3, 6, rng), random_matrix(1, 6, rng)}, 8);
    check_op([](Tape& t, const std::vector<Var>& v) { return rope(t, v[0], {0, 3, 17}, 2, 100.0); },
             {random_matrix(3, 8, rng)}, 9);
}

TEST(Autodiff, AttentionWithMask) {
    Rng rng(10);
    const std::vector<std::uint8_t> allow = {1, 0, 0, 1, 1, 0, 1, 1, 1, 0, 1, 1};  // 3 queries x 4 keys
    check_op([&](Tape& t, const std::vector<Var>& v) { return attention(t, v[0], v[1], v[2], allow, 2); },
             {random_matrix(3, 4, rng), random_matrix(4, 4, rng), random_matrix(4, 4, rng)}, 11);
}

TEST(Autodiff, EmbeddingAndConcat) {
    Rng rng(12);
    check_op([](Tape& t, const std::vector<Var>& v) { return embedding(t, v[0], {2, 0, 2, 1}); },
             {random_matrix(3, 4, rng)}, 13);
    check_op([](Tape& t, const std::vector<Var>& v) { return concat_cols(t, v[0], v[1]); },
             {random_matrix(2, 3, rng), random_matrix(2, 2, rng)}, 14);
}

TEST(Autodiff, WeightedNll) {
    Rng rng(15);
    Matrix logits = random_matrix(3, 5, rng);
    Tape t;
    Matrix g(3, 5);
    const Var loss = weighted_nll(t, t.parameter(logits, &g), {1, 4, 0}, {2.0, 0.0, 0.5});
    double want = 0.0;
    for (auto [r, tgt, w] : {std::tuple{0, 1, 2.0}, std::tuple{2, 0, 0.5}}) {
        double z = 0.0;
        for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits(r, c));
        want += w * (std::log(z) - logits(r, tgt));
    }
    EXPECT_NEAR(t.value(loss)(0, 0), want, 1e-12);
    t.backward(loss);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(g(1, c), 0.0);
    double row0 = 0.0;
    for (std::size_t c = 0; c < 5; ++c) row0 += g(0, c);
    EXPECT_NEAR(row0, 0.0, 1e-12);
}

TEST(Autodiff, MoeCombine) {
    Rng rng(16);
    const std::vector<std::vector<std::size_t>> sel = {{1, 0}, {2, 1}, {0, 2}};
    check_op(
        [&](Tape& t, const std::vector<Var>& v) { return moe_combine(t, v[0], {v[1], v[2], v[3]}, sel, 2.5); },
        {random_matrix(3, 3, rng), random_matrix(3, 2, rng), random_matrix(3, 2, rng), random_matrix(3, 2, rng)}, 17);
}

TEST(Autodiff, ShapeMismatchIsRejected) {
    Tape t;
    const Var a = t.constant(Matrix(2, 3));
    const Var b = t.constant(Matrix(3, 2));
    EXPECT_THROW(add(t, a, b), std::logic_error);
    EXPECT_THROW(matmul_nt(t, a, b), std::logic_error);
}

}  // namespace
}  // namespace dlm::ad
