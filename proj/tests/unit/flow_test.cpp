// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dlm/flow.hpp"

namespace dlm::flow {
namespace {

const FlowConfig kSmall{2, 6, 3, 2};

double silu(double x) { return x / (1.0 + std::exp(-x)); }

// Hand-rolled forward of the two-layer network.
std::pair<std::vector<double>, std::vector<double>> manual_heads(const FlowParams& p, const std::vector<double>& x,
                                                                 double t, const Condition& cond) {
    std::vector<double> in = x;
    in.push_back(t);
    for (std::size_t k = 0; k < p.cond_embed.cols; ++k) {
        double s = 0.0;
        for (auto c : cond) s += p.cond_embed(c, k);
        in.push_back(s / static_cast<double>(cond.size()));
    }
    auto layer = [](const Matrix& w, const Matrix& b, const std::vector<double>& v, bool act) {
        std::vector<double> out(w.rows);
        for (std::size_t r = 0; r < w.rows; ++r) {
            double s = b(0, r);
            for (std::size_t c = 0; c < w.cols; ++c) s += w(r, c) * v[c];
            out[r] = act ? silu(s) : s;
        }
        return out;
    };
    const auto h2 = layer(p.w2, p.b2, layer(p.w1, p.b1, in, true), true);
    std::vector<double> u;
    if (p.has_aux_head()) u = layer(p.wu, p.bu, h2, false);
    return {layer(p.wv, p.bv, h2, false), u};
}

FlowParams constant_field(const FlowConfig& cfg, double cv, double cu) {
    FlowParams p = FlowParams::zeros_like(FlowParams::random(cfg, 1));
    p.bv.fill(cv);
    p.bu.fill(cu);
    return p;
}

std::vector<FlowPath> random_paths(std::size_t n, std::size_t dim, std::size_t n_conds, Rng& rng) {
    std::vector<FlowPath> out;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> a(dim), b(dim);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        out.push_back(make_path(a, b, rng.uniform(0.05, 0.95), rng.below(n_conds)));
    }
    return out;
}

template <class Fn>
double fd_error(FlowParams& p, const FlowLoss& analytic, const Fn& loss) {
    std::vector<const Matrix*> gs;
    analytic.grads.for_each([&](const std::string&, const Matrix& g) { gs.push_back(&g); });
    double worst = 0.0;
    std::size_t idx = 0;
    p.for_each([&](const std::string&, Matrix& m) {
        const Matrix& g = *gs[idx++];
        for (std::size_t k = 0; k < m.size(); ++k) {
            const double orig = m.data[k];
            m.data[k] = orig + 1e-6;
            const double up = loss(p);
            m.data[k] = orig - 1e-6;
            const double down = loss(p);
            m.data[k] = orig;
            const double num = (up - down) / 2e-6;
            worst = std::max(worst, std::abs(num - g.data[k]) / std::max({std::abs(num), std::abs(g.data[k]), 1e-5}));
        }
    });
    return worst;
}

TEST(FlowPath, InterpolationAndEndpointRecovery) {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const std::vector<double> a = {rng.normal(), rng.normal(), rng.normal()};
        const std::vector<double> b = {rng.normal(), rng.normal(), rng.normal()};
        const double t = rng.uniform();
        const auto path = make_path(a, b, t);
        const auto xt = path.x_t();
        const auto v = path.v_target();
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_NEAR(xt[k], (1 - t) * a[k] + t * b[k], 1e-15);
            EXPECT_NEAR(v[k], b[k] - a[k], 1e-15);
        }
        const auto back = endpoint_from(xt, v, t);
        for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(back[k], b[k], 1e-12);
    }
    EXPECT_EQ(make_path({1, 2}, {3, 4}, 0.0).x_t(), (std::vector<double>{1, 2}));
    EXPECT_EQ(make_path({1, 2}, {3, 4}, 1.0).x_t(), (std::vector<double>{3, 4}));
}

TEST(FlowPath, Rejections) {
    EXPECT_THROW(make_path({1, 2}, {3}, 0.5), ConfigError);
    EXPECT_THROW(make_path({1}, {3}, 1.5), ConfigError);
}

TEST(Conditioning, UpsampleRepeatsCodes) {
    EXPECT_EQ(upsample_codes({1, 0, 2}), (Condition{1, 1, 0, 0, 2, 2}));
    EXPECT_EQ(upsample_codes({3}, 3), (Condition{3, 3, 3}));
    EXPECT_TRUE(upsample_codes({}).empty());
}

TEST(Evaluate, MatchesManualForward) {
    const auto p = FlowParams::random(kSmall, 3, 0.7);
    Rng rng(2);
    Matrix xs(5, 2);
    for (auto& v : xs.data) v = rng.normal();
    const std::vector<double> ts = {0.0, 0.2, 0.5, 0.9, 1.0};
    const std::vector<Condition> conds = {{0}, {1}, {2, 0}, {1, 1, 2}, {0}};
    const auto h = evaluate(kSmall, p, xs, ts, conds);
    for (std::size_t r = 0; r < 5; ++r) {
        const auto [v, u] = manual_heads(p, {xs(r, 0), xs(r, 1)}, ts[r], conds[r]);
        for (std::size_t c = 0; c < 2; ++c) {
            EXPECT_NEAR(h.v(r, c), v[c], 1e-13);
            EXPECT_NEAR(h.u(r, c), u[c], 1e-13);
        }
    }
}

TEST(Evaluate, MeanEmbeddingMakesUpsampledCodesEquivalent) {
    const auto p = FlowParams::random(kSmall, 4, 0.5);
    Matrix xs(1, 2, 0.3);
    const std::vector<double> ts = {0.4};
    const auto a = evaluate(kSmall, p, xs, ts, {{0, 2}});
    const auto b = evaluate(kSmall, p, xs, ts, {upsample_codes({0, 2})});
    EXPECT_EQ(a.v.data, b.v.data);
}

TEST(Evaluate, Rejections) {
    const auto p = FlowParams::random(kSmall, 5);
    Matrix xs(1, 2);
    const std::vector<double> ts = {0.5};
    EXPECT_THROW(evaluate(kSmall, p, xs, ts, {{}}), ConfigError);
    EXPECT_THROW(evaluate(kSmall, p, xs, ts, {{3}}), ConfigError);
    EXPECT_THROW(evaluate(kSmall, p, Matrix(1, 3), ts, {{0}}), ConfigError);
    EXPECT_THROW(evaluate(kSmall, p, xs, ts, {}), ConfigError);
}

TEST(RandomInit, DefaultScaleUsesFanIn) {
    const FlowConfig cfg{2, 16, 2, 4};
    const auto p = FlowParams::random(cfg, 6);
    const double b1 = 1.0 / std::sqrt(7.0), b2 = 1.0 / std::sqrt(16.0);
    for (double v : p.w1.data) EXPECT_LE(std::abs(v), b1);
    for (double v : p.w2.data) EXPECT_LE(std::abs(v), b2);
    for (double v : p.b1.data) EXPECT_EQ(v, 0.0);
    for (double v : p.cond_embed.data) EXPECT_LE(std::abs(v), 1.0);
    EXPECT_TRUE(p.has_aux_head());
    EXPECT_EQ(p.w1.rows, 16u);
    EXPECT_EQ(p.w1.cols, 7u);
}

TEST(FmLoss, ZeroNetworkCostsSquaredDisplacement) {
    const auto p = FlowParams::zeros_like(FlowParams::random(kSmall, 1));
    const std::vector<FlowPath> batch = {make_path({0, 0}, {1, 0}, 0.3), make_path({0, 1}, {0, 0}, 0.8, 1)};
    EXPECT_NEAR(fm_loss(kSmall, p, batch, {{0}, {1}}).loss, 1.0, 1e-15);
}

TEST(FmLoss, ExactFieldCostsNothing) {
    const auto p = constant_field(kSmall, 0.5, 0.0);
    const std::vector<FlowPath> batch = {make_path({0, 0}, {0.5, 0.5}, 0.3), make_path({1, -1}, {1.5, -0.5}, 0.9)};
    const auto r = fm_loss(kSmall, p, batch, {{0}});
    EXPECT_NEAR(r.loss, 0.0, 1e-15);
    for (double g : r.grads.bv.data) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(FmLoss, MatchesManualAndFiniteDifferences) {
    auto p = FlowParams::random(kSmall, 7, 0.6);
    Rng rng(3);
    const auto batch = random_paths(6, 2, 2, rng);
    const std::vector<Condition> conds = {{0, 2}, {1}};
    const auto r = fm_loss(kSmall, p, batch, conds);
    double want = 0.0;
    for (const auto& path : batch) {
        const auto [v, u] = manual_heads(p, path.x_t(), path.t, conds[path.cond]);
        const auto target = path.v_target();
        for (std::size_t c = 0; c < 2; ++c) want += (v[c] - target[c]) * (v[c] - target[c]);
    }
    EXPECT_NEAR(r.loss, want / 6.0, 1e-12);
    for (double g : r.grads.wu.data) EXPECT_EQ(g, 0.0);
    EXPECT_LT(fd_error(p, r, [&](const FlowParams& q) { return fm_loss(kSmall, q, batch, conds).loss; }), 1e-4);
}

TEST(TimeDerivative, CentralAndOneSided) {
    const VelocityFn sq = [](std::span<const double> x, double t) { return std::vector<double>(x.size(), t * t); };
    const std::vector<double> x = {0.0, 0.0};
    for (double d : time_derivative(sq, x, 0.5, 1e-3)) EXPECT_NEAR(d, 1.0, 1e-9);
    for (double d : time_derivative(sq, x, 1.0, 1e-3)) EXPECT_NEAR(d, (1.0 - 0.999 * 0.999) / 1e-3, 1e-9);
    for (double d : time_derivative(sq, x, 0.0, 1e-3)) EXPECT_NEAR(d, 1e-3, 1e-9);
    EXPECT_THROW(time_derivative(sq, x, 0.5, 0.0), ConfigError);
}

TEST(TimeDerivative, FollowsTheField) {
    // u(x, t) = x: along x' = x the total derivative is du/dt = x.
    const VelocityFn id = [](std::span<const double> x, double) { return std::vector<double>(x.begin(), x.end()); };
    const std::vector<double> x = {2.0, -1.0};
    const auto d = time_derivative(id, x, 0.5, 1e-4);
    EXPECT_NEAR(d[0], 2.0, 1e-9);
    EXPECT_NEAR(d[1], -1.0, 1e-9);
}

TEST(DistillLoss, ConstantFieldCostsNothing) {
    const auto p = constant_field(kSmall, 0.5, 0.5);
    const std::vector<FlowPath> batch = {make_path({0, 0}, {0.5, 0.5}, 0.3), make_path({1, -1}, {1.5, -0.5}, 1.0)};
    EXPECT_NEAR(distill_loss(kSmall, p, p, batch, {{0}}).loss, 0.0, 1e-15);
}

TEST(DistillLoss, MatchesSinglePointOracle) {
    const auto p = FlowParams::random(kSmall, 8, 0.6);
    const auto frozen = FlowParams::random(kSmall, 9, 0.6);
    Rng rng(4);
    auto batch = random_paths(5, 2, 3, rng);
    batch[0].t = 0.0;
    batch[1].t = 1.0;
    const std::vector<Condition> conds = {{0}, {1, 2}, {2}};
    double want = 0.0;
    for (const auto& path : batch) {
        const Condition& c = conds[path.cond];
        const VelocityFn u = [&](std::span<const double> x, double t) {
            return manual_heads(frozen, {x.begin(), x.end()}, t, c).second;
        };
        const auto d = time_derivative(u, path.x_t(), path.t, 1e-3);
        const auto [v_p, u_p] = manual_heads(p, path.x_t(), path.t, c);
        const auto vt = path.v_target();
        for (std::size_t k = 0; k < 2; ++k) {
            want += (v_p[k] - vt[k]) * (v_p[k] - vt[k]);
            const double ut = vt[k] - path.t * d[k];
            want += (u_p[k] - ut) * (u_p[k] - ut);
        }
    }
    EXPECT_NEAR(distill_loss(kSmall, p, frozen, batch, conds).loss, want / 5.0, 1e-10);
}

TEST(DistillLoss, FrozenCopyCarriesNoGradient) {
    auto p = FlowParams::random(kSmall, 10, 0.6);
    Rng rng(5);
    const auto batch = random_paths(4, 2, 2, rng);
    const std::vector<Condition> conds = {{0}, {1}};
    const FlowParams frozen = p;
    const auto r = distill_loss(kSmall, p, frozen, batch, conds);
    // Finite differences with the frozen copy held fixed agree.
    EXPECT_LT(fd_error(p, r, [&](const FlowParams& q) { return distill_loss(kSmall, q, frozen, batch, conds).loss; }),
              1e-4);
    // Differentiating through the target as well does not.
    EXPECT_GT(fd_error(p, r, [&](const FlowParams& q) { return distill_loss(kSmall, q, q, batch, conds).loss; }), 1e-3);
    // The frozen copy's v head never enters the loss.
    FlowParams other = frozen;
    for (double& w : other.wv.data) w += 0.3;
    const auto r2 = distill_loss(kSmall, p, other, batch, conds);
    EXPECT_EQ(r2.loss, r.loss);
    EXPECT_EQ(r2.grads.w1.data, r.grads.w1.data);
}

TEST(DistillLoss, Rejections) {
    auto p = FlowParams::random(kSmall, 11);
    const std::vector<FlowPath> batch = {make_path({0, 0}, {1, 1}, 0.5)};
    EXPECT_THROW(distill_loss(kSmall, p, p, {}, {{0}}), ConfigError);
    FlowParams noaux = p;
    noaux.drop_aux_head();
    EXPECT_THROW(distill_loss(kSmall, noaux, p, batch, {{0}}), ConfigError);
    EXPECT_THROW(distill_loss(kSmall, p, noaux, batch, {{0}}), ConfigError);
}

TEST(Sampling, ConstantFieldTranslatesNoise) {
    const auto p = constant_field(kSmall, 0.75, -3.0);
    for (std::size_t steps : {1u, 4u, 8u}) {
        const auto x = integrate(kSmall, p, {0}, {1.0, -2.0}, steps);
        EXPECT_NEAR(x[0], 1.75, 1e-12);
        EXPECT_NEAR(x[1], -1.25, 1e-12);
    }
}

TEST(Sampling, EulerMatchesManualSteps) {
    const auto p = FlowParams::random(kSmall, 12, 0.5);
    std::vector<double> x = {0.3, -0.7};
    const auto got = integrate(kSmall, p, {1}, x, 4);
    for (int k = 0; k < 4; ++k) {
        const auto v = manual_heads(p, x, k * 0.25, {1}).first;
        for (std::size_t i = 0; i < 2; ++i) x[i] += 0.25 * v[i];
    }
    EXPECT_NEAR(got[0], x[0], 1e-12);
    EXPECT_NEAR(got[1], x[1], 1e-12);
}

TEST(Sampling, DroppingTheAuxHeadChangesNothing) {
    const auto p = FlowParams::random(kSmall, 13, 0.5);
    FlowParams deploy = p;
    deploy.drop_aux_head();
    EXPECT_FALSE(deploy.has_aux_head());
    Rng a(7), b(7);
    EXPECT_EQ(sample_batch(kSmall, p, {0}, 8, 16, a).data, sample_batch(kSmall, deploy, {0}, 8, 16, b).data);
    EXPECT_EQ(integrate(kSmall, p, {2}, {1, 1}, 3), integrate(kSmall, deploy, {2}, {1, 1}, 3));
    Rng c(8), d(8);
    EXPECT_EQ(sample(kSmall, p, {1}, 5, c), sample(kSmall, deploy, {1}, 5, d));
}

TEST(Sampling, Rejections) {
    const auto p = FlowParams::random(kSmall, 14);
    Rng rng(1);
    EXPECT_THROW(integrate(kSmall, p, {0}, {1, 1}, 0), ConfigError);
    EXPECT_THROW(integrate(kSmall, p, {0}, {1}, 4), ConfigError);
    EXPECT_THROW(sample_batch(kSmall, p, {5}, 4, 3, rng), ConfigError);
}

TEST(EnergyDistance, OracleAndProperties) {
    Matrix a(2, 1), b(1, 1);
    a(0, 0) = 0.0;
    a(1, 0) = 2.0;
    b(0, 0) = 1.0;
    // 2 * 1 - (0 + 2 + 2 + 0) / 4 - 0 = 1
    EXPECT_NEAR(energy_distance(a, b), 1.0, 1e-15);
    EXPECT_NEAR(energy_distance(a, a), 0.0, 1e-15);
    Rng rng(9);
    Matrix x(40, 2), y(30, 2);
    for (auto& v : x.data) v = rng.normal();
    for (auto& v : y.data) v = rng.normal() + 1.0;
    EXPECT_NEAR(energy_distance(x, y), energy_distance(y, x), 1e-12);
    EXPECT_GT(energy_distance(x, y), 0.0);
    EXPECT_THROW(energy_distance(x, Matrix(3, 1)), ConfigError);
    EXPECT_THROW(energy_distance(x, Matrix(0, 2)), ConfigError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    FlowParams p = FlowParams::random(kSmall, 15, 0.5);
    const FlowParams before = p;
    FlowParams g = FlowParams::zeros_like(p);
    g.bv(0, 0) = 3.0;
    g.bv(0, 1) = -0.002;
    Adam opt(0.01);
    opt.step(p, g);
    EXPECT_NEAR(p.bv(0, 0), before.bv(0, 0) - 0.01, 1e-10);
    EXPECT_NEAR(p.bv(0, 1), before.bv(0, 1) + 0.01, 1e-7);
    EXPECT_EQ(p.w1.data, before.w1.data);
}

TEST(GaussianTask, DrawsHaveTheRequestedMoments) {
    const auto task = GaussianTask::two_modes();
    Rng rng(10);
    double m0 = 0.0, s0 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const auto x = task.draw(1, rng);
        m0 += x[0];
        s0 += (x[0] + 2.0) * (x[0] + 2.0);
    }
    EXPECT_NEAR(m0 / n, -2.0, 0.02);
    EXPECT_NEAR(std::sqrt(s0 / n), 0.6, 0.02);
}

TEST(Training, TeacherLossDecreases) {
    const FlowConfig cfg{2, 16, 2, 4};
    auto p = FlowParams::random(cfg, 16);
    const auto task = GaussianTask::two_modes();
    Rng rng(11);
    std::vector<FlowPath> eval;
    for (int i = 0; i < 256; ++i) {
        std::vector<double> x0 = {rng.normal(), rng.normal()};
        const std::size_t c = rng.below(2);
        eval.push_back(make_path(x0, task.draw(c, rng), rng.uniform(), c));
    }
    const std::vector<Condition> conds = {{0}, {1}};
    const double before = fm_loss(cfg, p, eval, conds).loss;
    train_teacher(cfg, p, task, TrainOptions{300, 64, 5e-3, 1e-3}, rng);
    EXPECT_LT(fm_loss(cfg, p, eval, conds).loss, 0.7 * before);
}

TEST(Serialization, ContainerRoundTrip) {
    const FlowConfig cfg{3, 5, 4, 2};
    auto p = FlowParams::random(cfg, 17, 0.3);
    for (bool aux : {true, false}) {
        if (!aux) p.drop_aux_head();
        std::stringstream ss;
        write_container(ss, pack_flow(cfg, p));
        const auto [cfg2, p2] = unpack_flow(read_container(ss));
        EXPECT_EQ(cfg2, cfg);
        EXPECT_EQ(p2.has_aux_head(), aux);
        std::vector<std::vector<double>> a, b;
        p.for_each([&](const std::string&, const Matrix& m) { a.push_back(m.data); });
        p2.for_each([&](const std::string&, const Matrix& m) { b.push_back(m.data); });
        EXPECT_EQ(a, b);
    }
}

TEST(Serialization, ConfigValidation) {
    EXPECT_THROW((FlowConfig{0, 4, 2, 2}.validate()), ConfigError);
    EXPECT_THROW(flow_config_from_json(nlohmann::json::parse(R"({"dim":2})")), ConfigError);
    EXPECT_EQ(flow_config_from_json(to_json(kSmall)), kSmall);
}

}  // namespace
}  // namespace dlm::flow
