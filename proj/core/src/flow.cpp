// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/flow.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "dlm/kernels.hpp"

namespace dlm::flow {

void FlowConfig::validate() const {
    if (dim < 1 || hidden < 1 || cond_vocab < 1 || cond_dim < 1) throw ConfigError("flow: all sizes must be >= 1");
}

FlowParams FlowParams::random(const FlowConfig& cfg, std::uint64_t seed, double scale) {
    cfg.validate();
    Rng rng(seed);
    auto init = [&](std::size_t rows, std::size_t cols, double s) {
        Matrix m(rows, cols);
        for (double& v : m.data) v = rng.uniform(-s, s);
        return m;
    };
    auto fan = [&](std::size_t fan_in) { return scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    FlowParams p;
    p.cond_embed = init(cfg.cond_vocab, cfg.cond_dim, scale > 0.0 ? scale : 1.0);
    p.w1 = init(cfg.hidden, cfg.input_dim(), fan(cfg.input_dim()));
    p.b1 = Matrix(1, cfg.hidden);
    p.w2 = init(cfg.hidden, cfg.hidden, fan(cfg.hidden));
    p.b2 = Matrix(1, cfg.hidden);
    p.wv = init(cfg.dim, cfg.hidden, fan(cfg.hidden));
    p.bv = Matrix(1, cfg.dim);
    p.wu = init(cfg.dim, cfg.hidden, fan(cfg.hidden));
    p.bu = Matrix(1, cfg.dim);
    if (scale > 0.0) {
        for (Matrix* b : {&p.b1, &p.b2, &p.bv, &p.bu}) {
            for (double& v : b->data) v = rng.uniform(-scale, scale);
        }
    }
    return p;
}

FlowParams FlowParams::zeros_like(const FlowParams& p) {
    FlowParams z = p;
    z.for_each([](const std::string&, Matrix& m) { m.fill(0.0); });
    return z;
}

void FlowParams::drop_aux_head() {
    wu = Matrix();
    bu = Matrix();
}

void FlowParams::for_each(const std::function<void(const std::string&, Matrix&)>& fn) {
    fn("cond_embed", cond_embed);
    fn("w1", w1);
    fn("b1", b1);
    fn("w2", w2);
    fn("b2", b2);
    fn("wv", wv);
    fn("bv", bv);
    if (has_aux_head()) {
        fn("aux.wu", wu);
        fn("aux.bu", bu);
    }
}

void FlowParams::for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const {
    const_cast<FlowParams*>(this)->for_each([&](const std::string& n, Matrix& m) { fn(n, m); });
}

Condition upsample_codes(const Condition& codes, std::size_t factor) {
    Condition out;
    out.reserve(codes.size() * factor);
    for (std::size_t c : codes) out.insert(out.end(), factor, c);
    return out;
}

std::vector<double> FlowPath::x_t() const {
    std::vector<double> x(x0.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (1.0 - t) * x0[i] + t * x1[i];
    return x;
}

std::vector<double> FlowPath::v_target() const {
    std::vector<double> v(x0.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x1[i] - x0[i];
    return v;
}

FlowPath make_path(std::vector<double> x0, std::vector<double> x1, double t, std::size_t cond) {
    if (x0.size() != x1.size()) throw ConfigError("flow path: x0 and x1 differ in dimension");
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("flow path: t must lie in [0, 1]");
    return FlowPath{std::move(x0), std::move(x1), t, cond};
}

std::vector<double> endpoint_from(std::span<const double> x_t, std::span<const double> v, double t) {
    std::vector<double> x1(x_t.size());
    for (std::size_t i = 0; i < x1.size(); ++i) x1[i] = x_t[i] + (1.0 - t) * v[i];
    return x1;
}

namespace {

void check_condition(const FlowConfig& cfg, const Condition& c) {
    if (c.empty()) throw ConfigError("flow: empty condition");
    for (std::size_t code : c) {
        if (code >= cfg.cond_vocab) throw ConfigError("flow: condition code out of range");
    }
}

std::vector<double> mean_embedding(const FlowConfig& cfg, const FlowParams& p, const Condition& c) {
    std::vector<double> z(cfg.cond_dim, 0.0);
    for (std::size_t code : c) {
        for (std::size_t k = 0; k < cfg.cond_dim; ++k) z[k] += p.cond_embed(code, k);
    }
    for (double& v : z) v /= static_cast<double>(c.size());
    return z;
}

/// Mean condition embedding per row, differentiable w.r.t. the table.
ad::Var condition_rows(ad::Tape& tape, ad::Var table, const std::vector<const Condition*>& rows) {
    const Matrix& tv = tape.value(table);
    Matrix out(rows.size(), tv.cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t code : *rows[r]) {
            for (std::size_t k = 0; k < tv.cols; ++k) out(r, k) += tv(code, k);
        }
        for (std::size_t k = 0; k < tv.cols; ++k) out(r, k) /= static_cast<double>(rows[r]->size());
    }
    return tape.push(std::move(out), [table, rows](ad::Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_at(self);
        Matrix& gt = tp.grad(table);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const double inv = 1.0 / static_cast<double>(rows[r]->size());
            for (std::size_t code : *rows[r]) {
                for (std::size_t k = 0; k < g.cols; ++k) gt(code, k) += inv * g(r, k);
            }
        }
    });
}

struct BoundFlow {
    ad::Var cond_embed, w1, b1, w2, b2, wv, bv, wu, bu;
};

BoundFlow bind(ad::Tape& tape, const FlowParams& p, FlowParams* g) {
    auto sink = [&](Matrix FlowParams::*m) -> Matrix* { return g == nullptr ? nullptr : &(g->*m); };
    BoundFlow b;
    b.cond_embed = tape.parameter(p.cond_embed, sink(&FlowParams::cond_embed));
    b.w1 = tape.parameter(p.w1, sink(&FlowParams::w1));
    b.b1 = tape.parameter(p.b1, sink(&FlowParams::b1));
    b.w2 = tape.parameter(p.w2, sink(&FlowParams::w2));
    b.b2 = tape.parameter(p.b2, sink(&FlowParams::b2));
    b.wv = tape.parameter(p.wv, sink(&FlowParams::wv));
    b.bv = tape.parameter(p.bv, sink(&FlowParams::bv));
    if (p.has_aux_head()) {
        b.wu = tape.parameter(p.wu, sink(&FlowParams::wu));
        b.bu = tape.parameter(p.bu, sink(&FlowParams::bu));
    }
    return b;
}

struct TapeHeads {
    ad::Var v, u;
};

TapeHeads forward_tape(ad::Tape& tape, const FlowConfig& cfg, const FlowParams& p, const BoundFlow& b,
                       std::span<const FlowPath> batch, const std::vector<Condition>& conds) {
    Matrix xt(batch.size(), cfg.dim + 1);
    std::vector<const Condition*> rows;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const auto x = batch[r].x_t();
        if (x.size() != cfg.dim) throw ConfigError("flow: path dimension does not match the network");
        std::copy(x.begin(), x.end(), xt.row(r).begin());
        xt(r, cfg.dim) = batch[r].t;
        if (batch[r].cond >= conds.size()) throw ConfigError("flow: path refers to a missing condition");
        check_condition(cfg, conds[batch[r].cond]);
        rows.push_back(&conds[batch[r].cond]);
    }
    using namespace ad;
    const Var in = concat_cols(tape, tape.constant(std::move(xt)), condition_rows(tape, b.cond_embed, rows));
    const Var h1 = silu(tape, add_row(tape, matmul_nt(tape, in, b.w1), b.b1));
    const Var h2 = silu(tape, add_row(tape, matmul_nt(tape, h1, b.w2), b.b2));
    TapeHeads out;
    out.v = add_row(tape, matmul_nt(tape, h2, b.wv), b.bv);
    if (p.has_aux_head()) out.u = add_row(tape, matmul_nt(tape, h2, b.wu), b.bu);
    return out;
}

/// Hidden features for one input row.
void trunk(const FlowConfig& cfg, const FlowParams& p, std::span<const double> in, std::vector<double>& h1,
           std::vector<double>& h2) {
    h1.resize(cfg.hidden);
    h2.resize(cfg.hidden);
    kernels::matvec_nt(in, p.w1, h1);
    for (std::size_t i = 0; i < cfg.hidden; ++i) h1[i] = kernels::silu(h1[i] + p.b1(0, i));
    kernels::matvec_nt(h1, p.w2, h2);
    for (std::size_t i = 0; i < cfg.hidden; ++i) h2[i] = kernels::silu(h2[i] + p.b2(0, i));
}

}  // namespace

Heads evaluate(const FlowConfig& cfg, const FlowParams& p, const Matrix& xs, std::span<const double> ts,
               const std::vector<Condition>& conds) {
    if (xs.cols != cfg.dim || ts.size() != xs.rows || conds.size() != xs.rows) {
        throw ConfigError("flow evaluate: inconsistent batch shapes");
    }
    Heads out;
    out.v = Matrix(xs.rows, cfg.dim);
    if (p.has_aux_head()) out.u = Matrix(xs.rows, cfg.dim);
    std::vector<double> in(cfg.input_dim()), h1, h2;
    const Condition* last = nullptr;
    std::vector<double> z;
    for (std::size_t r = 0; r < xs.rows; ++r) {
        if (last == nullptr || *last != conds[r]) {
            check_condition(cfg, conds[r]);
            z = mean_embedding(cfg, p, conds[r]);
            last = &conds[r];
        }
        std::copy(xs.row(r).begin(), xs.row(r).end(), in.begin());
        in[cfg.dim] = ts[r];
        std::copy(z.begin(), z.end(), in.begin() + static_cast<std::ptrdiff_t>(cfg.dim + 1));
        trunk(cfg, p, in, h1, h2);
        kernels::matvec_nt(h2, p.wv, out.v.row(r));
        for (std::size_t c = 0; c < cfg.dim; ++c) out.v(r, c) += p.bv(0, c);
        if (p.has_aux_head()) {
            kernels::matvec_nt(h2, p.wu, out.u.row(r));
            for (std::size_t c = 0; c < cfg.dim; ++c) out.u(r, c) += p.bu(0, c);
        }
    }
    return out;
}

FlowLoss fm_loss(const FlowConfig& cfg, const FlowParams& p, std::span<const FlowPath> batch,
                 const std::vector<Condition>& conds) {
    if (batch.empty()) throw ConfigError("fm_loss: empty batch");
    FlowLoss res{0.0, FlowParams::zeros_like(p)};
    ad::Tape tape;
    const BoundFlow b = bind(tape, p, &res.grads);
    const TapeHeads heads = forward_tape(tape, cfg, p, b, batch, conds);
    Matrix target(batch.size(), cfg.dim);
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const auto v = batch[r].v_target();
        std::copy(v.begin(), v.end(), target.row(r).begin());
    }
    const ad::Var sq = ad::squared_error(tape, heads.v, target);
    const ad::Var loss = ad::scale(tape, sq, 1.0 / static_cast<double>(batch.size()));
    res.loss = tape.value(loss)(0, 0);
    tape.backward(loss);
    return res;
}

std::vector<double> time_derivative(const VelocityFn& u, std::span<const double> x, double t, double eps) {
    if (!(eps > 0.0)) throw ConfigError("time_derivative: eps must be > 0");
    const std::vector<double> dir = u(x, t);
    auto shifted = [&](double dt) {
        std::vector<double> y(x.begin(), x.end());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += dt * dir[i];
        return y;
    };
    const bool fwd_ok = t + eps <= 1.0;
    const bool back_ok = t - eps >= 0.0;
    std::vector<double> hi, lo;
    double width;
    if (fwd_ok && back_ok) {
        hi = u(shifted(eps), t + eps);
        lo = u(shifted(-eps), t - eps);
        width = 2.0 * eps;
    } else if (fwd_ok) {
        hi = u(shifted(eps), t + eps);
        lo = dir;
        width = eps;
    } else {
        hi = dir;
        lo = u(shifted(-eps), t - eps);
        width = eps;
    }
    std::vector<double> d(hi.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = (hi[i] - lo[i]) / width;
    return d;
}

FlowLoss distill_loss(const FlowConfig& cfg, const FlowParams& p, const FlowParams& frozen,
                      std::span<const FlowPath> batch, const std::vector<Condition>& conds, double eps) {
    if (batch.empty()) throw ConfigError("distill_loss: empty batch");
    if (!p.has_aux_head() || !frozen.has_aux_head()) throw ConfigError("distill_loss: auxiliary head required");

    // Consistency target v_t - t * du/dt, with du/dt from the frozen copy.
    const std::size_t n = batch.size();
    Matrix xs(n, cfg.dim);
    std::vector<double> ts(n);
    std::vector<Condition> row_conds;
    row_conds.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto xt = batch[r].x_t();
        if (xt.size() != cfg.dim) throw ConfigError("flow: path dimension does not match the network");
        std::copy(xt.begin(), xt.end(), xs.row(r).begin());
        ts[r] = batch[r].t;
        row_conds.push_back(conds.at(batch[r].cond));
    }
    const Matrix u0 = evaluate(cfg, frozen, xs, ts, row_conds).u;
    Matrix x_hi = xs, x_lo = xs;
    std::vector<double> t_hi(n), t_lo(n), width(n);
    for (std::size_t r = 0; r < n; ++r) {
        const bool fwd_ok = ts[r] + eps <= 1.0;
        const bool back_ok = ts[r] - eps >= 0.0;
        const double up = (fwd_ok || !back_ok) ? eps : 0.0;
        const double down = (back_ok || !fwd_ok) ? eps : 0.0;
        for (std::size_t c = 0; c < cfg.dim; ++c) {
            x_hi(r, c) += up * u0(r, c);
            x_lo(r, c) -= down * u0(r, c);
        }
        t_hi[r] = ts[r] + up;
        t_lo[r] = ts[r] - down;
        width[r] = up + down;
    }
    const Matrix u_hi = evaluate(cfg, frozen, x_hi, t_hi, row_conds).u;
    const Matrix u_lo = evaluate(cfg, frozen, x_lo, t_lo, row_conds).u;
    Matrix v_target(n, cfg.dim);
    Matrix u_target(n, cfg.dim);
    for (std::size_t r = 0; r < n; ++r) {
        const auto vt = batch[r].v_target();
        for (std::size_t c = 0; c < cfg.dim; ++c) {
            const double dudt = (u_hi(r, c) - u_lo(r, c)) / width[r];
            v_target(r, c) = vt[c];
            u_target(r, c) = vt[c] - ts[r] * dudt;
        }
    }

    FlowLoss res{0.0, FlowParams::zeros_like(p)};
    ad::Tape tape;
    const BoundFlow b = bind(tape, p, &res.grads);
    const TapeHeads heads = forward_tape(tape, cfg, p, b, batch, conds);
    const ad::Var sum = ad::add(tape, ad::squared_error(tape, heads.v, v_target),
                                ad::squared_error(tape, heads.u, u_target));
    const ad::Var loss = ad::scale(tape, sum, 1.0 / static_cast<double>(batch.size()));
    res.loss = tape.value(loss)(0, 0);
    tape.backward(loss);
    return res;
}

Matrix sample_batch(const FlowConfig& cfg, const FlowParams& p, const Condition& cond, std::size_t steps,
                    std::size_t n, Rng& rng) {
    if (steps < 1) throw ConfigError("sample: steps must be >= 1");
    check_condition(cfg, cond);
    Matrix x(n, cfg.dim);
    for (double& v : x.data) v = rng.normal();
    FlowParams deploy = p;
    deploy.drop_aux_head();
    const std::vector<Condition> conds(n, cond);
    std::vector<double> ts(n);
    const double dt = 1.0 / static_cast<double>(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        std::fill(ts.begin(), ts.end(), static_cast<double>(k) * dt);
        const Heads h = evaluate(cfg, deploy, x, ts, conds);
        for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += dt * h.v.data[i];
    }
    return x;
}

std::vector<double> integrate(const FlowConfig& cfg, const FlowParams& p, const Condition& cond,
                              std::vector<double> x0, std::size_t steps) {
    if (steps < 1) throw ConfigError("sample: steps must be >= 1");
    if (x0.size() != cfg.dim) throw ConfigError("sample: x0 has the wrong dimension");
    FlowParams deploy = p;
    deploy.drop_aux_head();
    Matrix x(1, cfg.dim);
    x.data = std::move(x0);
    const double dt = 1.0 / static_cast<double>(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        const double ts[1] = {static_cast<double>(k) * dt};
        const Heads h = evaluate(cfg, deploy, x, ts, {cond});
        for (std::size_t i = 0; i < cfg.dim; ++i) x.data[i] += dt * h.v.data[i];
    }
    return x.data;
}

std::vector<double> sample(const FlowConfig& cfg, const FlowParams& p, const Condition& cond, std::size_t steps,
                           Rng& rng) {
    std::vector<double> x0(cfg.dim);
    for (double& v : x0) v = rng.normal();
    return integrate(cfg, p, cond, std::move(x0), steps);
}

double energy_distance(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols || a.rows == 0 || b.rows == 0) throw ConfigError("energy_distance: incompatible samples");
    auto mean_dist = [](const Matrix& x, const Matrix& y) {
        double total = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) {
            for (std::size_t j = 0; j < y.rows; ++j) {
                double ss = 0.0;
                for (std::size_t c = 0; c < x.cols; ++c) {
                    const double d = x(i, c) - y(j, c);
                    ss += d * d;
                }
                total += std::sqrt(ss);
            }
        }
        return total / static_cast<double>(x.rows * y.rows);
    };
    return 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
}

void Adam::step(FlowParams& p, const FlowParams& grads) {
    ++t_;
    std::vector<const Matrix*> gs;
    grads.for_each([&](const std::string&, const Matrix& g) { gs.push_back(&g); });
    std::size_t idx = 0;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    p.for_each([&](const std::string&, Matrix& w) {
        if (m_.size() <= idx) {
            m_.emplace_back(w.size(), 0.0);
            v_.emplace_back(w.size(), 0.0);
        }
        const Matrix& g = *gs.at(idx);
        auto& m = m_[idx];
        auto& v = v_[idx];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g.data[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
            w.data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
        ++idx;
    });
}

GaussianTask GaussianTask::two_modes() { return GaussianTask{{{2.0, 1.0}, {-2.0, -1.0}}, 0.6}; }

std::vector<double> GaussianTask::draw(std::size_t code, Rng& rng) const {
    std::vector<double> x = means.at(code);
    for (double& v : x) v += stddev * rng.normal();
    return x;
}

namespace {

std::vector<Condition> single_code_conditions(std::size_t n_codes) {
    std::vector<Condition> conds;
    for (std::size_t c = 0; c < n_codes; ++c) conds.push_back({c});
    return conds;
}

std::vector<double> normal_vector(std::size_t dim, Rng& rng) {
    std::vector<double> x(dim);
    for (double& v : x) v = rng.normal();
    return x;
}

}  // namespace

void train_teacher(const FlowConfig& cfg, FlowParams& p, const GaussianTask& task, const TrainOptions& opt,
                   Rng& rng) {
    const auto conds = single_code_conditions(task.means.size());
    Adam adam(opt.lr);
    std::vector<FlowPath> batch;
    for (std::size_t s = 0; s < opt.steps; ++s) {
        batch.clear();
        for (std::size_t i = 0; i < opt.batch; ++i) {
            const std::size_t code = rng.below(task.means.size());
            auto x0 = normal_vector(cfg.dim, rng);
            auto x1 = task.draw(code, rng);
            batch.push_back(make_path(std::move(x0), std::move(x1), rng.uniform(), code));
        }
        adam.step(p, fm_loss(cfg, p, batch, conds).grads);
    }
}

void distill_student(const FlowConfig& cfg, FlowParams& student, const FlowParams& teacher, const GaussianTask& task,
                     std::size_t teacher_steps, const TrainOptions& opt, Rng& rng) {
    const auto conds = single_code_conditions(task.means.size());
    // Fixed pool of (noise, teacher sample) couplings, drawn once.
    constexpr std::size_t kPoolPerCode = 4096;
    std::vector<FlowPath> pool;
    for (std::size_t code = 0; code < conds.size(); ++code) {
        Rng noise(rng.next());
        const Matrix x0 = [&] {
            Matrix m(kPoolPerCode, cfg.dim);
            for (double& v : m.data) v = noise.normal();
            return m;
        }();
        FlowParams deploy = teacher;
        deploy.drop_aux_head();
        Matrix x = x0;
        const std::vector<Condition> row_conds(kPoolPerCode, conds[code]);
        std::vector<double> ts(kPoolPerCode);
        const double dt = 1.0 / static_cast<double>(teacher_steps);
        for (std::size_t k = 0; k < teacher_steps; ++k) {
            std::fill(ts.begin(), ts.end(), static_cast<double>(k) * dt);
            const Heads h = evaluate(cfg, deploy, x, ts, row_conds);
            for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += dt * h.v.data[i];
        }
        for (std::size_t i = 0; i < kPoolPerCode; ++i) {
            pool.push_back(make_path({x0.row(i).begin(), x0.row(i).end()}, {x.row(i).begin(), x.row(i).end()}, 0.0,
                                     code));
        }
    }
    Adam adam(opt.lr);
    std::vector<FlowPath> batch;
    for (std::size_t s = 0; s < opt.steps; ++s) {
        batch.clear();
        for (std::size_t i = 0; i < opt.batch; ++i) {
            FlowPath path = pool[rng.below(pool.size())];
            path.t = rng.uniform();
            batch.push_back(std::move(path));
        }
        const FlowParams frozen = student;
        adam.step(student, distill_loss(cfg, student, frozen, batch, conds, opt.jvp_eps).grads);
    }
}

nlohmann::json to_json(const FlowConfig& cfg) {
    return {{"dim", cfg.dim}, {"hidden", cfg.hidden}, {"cond_vocab", cfg.cond_vocab}, {"cond_dim", cfg.cond_dim}};
}

FlowConfig flow_config_from_json(const nlohmann::json& j) {
    FlowConfig cfg;
    try {
        cfg.dim = j.at("dim").get<std::size_t>();
        cfg.hidden = j.at("hidden").get<std::size_t>();
        cfg.cond_vocab = j.at("cond_vocab").get<std::size_t>();
        cfg.cond_dim = j.at("cond_dim").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("flow config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

Container pack_flow(const FlowConfig& cfg, const FlowParams& p) {
    Container c;
    c.config_json = to_json(cfg).dump();
    p.for_each([&](const std::string& name, const Matrix& m) { c.tensors.push_back({name, m}); });
    return c;
}

std::pair<FlowConfig, FlowParams> unpack_flow(const Container& c) {
    const FlowConfig cfg = flow_config_from_json(nlohmann::json::parse(c.config_json));
    FlowParams p = FlowParams::random(cfg, 0);
    bool has_aux = false;
    for (const auto& t : c.tensors) has_aux = has_aux || t.name == "aux.wu";
    if (!has_aux) p.drop_aux_head();
    p.for_each([&](const std::string& name, Matrix& m) {
        const Matrix& src = c.get(name);
        if (!src.same_shape(m)) throw ConfigError("flow container: tensor '" + name + "' has the wrong shape");
        m = src;
    });
    return {cfg, std::move(p)};
}

}  // namespace dlm::flow
