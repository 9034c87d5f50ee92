// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

// Toy flow-matching generator conditioned on discrete codes, with a second
// (auxiliary) velocity head used only while distilling for few-step sampling.

#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dlm/autodiff.hpp"
#include "dlm/common.hpp"
#include "dlm/container.hpp"

namespace dlm::flow {

struct FlowConfig {
    std::size_t dim = 2;
    std::size_t hidden = 64;
    std::size_t cond_vocab = 2;
    std::size_t cond_dim = 8;

    void validate() const;
    std::size_t input_dim() const { return dim + 1 + cond_dim; }
    bool operator==(const FlowConfig&) const = default;
};

/// Two SiLU hidden layers on [x, t, z]; v head and optional auxiliary u head.
struct FlowParams {
    Matrix cond_embed;  ///< cond_vocab x cond_dim
    Matrix w1, b1, w2, b2;
    Matrix wv, bv;
    Matrix wu, bu;  ///< empty once the auxiliary head is dropped

    static FlowParams random(const FlowConfig& cfg, std::uint64_t seed, double scale = 0.0);
    static FlowParams zeros_like(const FlowParams& p);
    bool has_aux_head() const { return wu.size() > 0; }
    void drop_aux_head();

    void for_each(const std::function<void(const std::string&, Matrix&)>& fn);
    void for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const;
};

/// Condition: code ids embedded and averaged.
using Condition = std::vector<std::size_t>;

/// Repeats every code `factor` times (conditioning for 2x super-resolution).
Condition upsample_codes(const Condition& codes, std::size_t factor = 2);

/// Linear interpolation path between noise x0 (t = 0) and data x1 (t = 1).
struct FlowPath {
    std::vector<double> x0;
    std::vector<double> x1;
    double t = 0.0;
    std::size_t cond = 0;  ///< index into the condition list passed with the batch

    std::vector<double> x_t() const;
    std::vector<double> v_target() const;
};

FlowPath make_path(std::vector<double> x0, std::vector<double> x1, double t, std::size_t cond = 0);
/// Recovers x1 from (x_t, v, t): x1 = x_t + (1 - t) v.
std::vector<double> endpoint_from(std::span<const double> x_t, std::span<const double> v, double t);

struct Heads {
    Matrix v;
    Matrix u;  ///< empty without the auxiliary head
};

/// Evaluates both heads for each row of xs at times ts under conds[row].
Heads evaluate(const FlowConfig& cfg, const FlowParams& p, const Matrix& xs, std::span<const double> ts,
               const std::vector<Condition>& conds);

struct FlowLoss {
    double loss = 0.0;
    FlowParams grads;
};

/// Mean over the batch of ||v_theta(x_t, t, z) - (x1 - x0)||^2.
FlowLoss fm_loss(const FlowConfig& cfg, const FlowParams& p, std::span<const FlowPath> batch,
                 const std::vector<Condition>& conds);

using VelocityFn = std::function<std::vector<double>(std::span<const double> x, double t)>;

/// d u / d t along the path x' = u(x, t), by central differences of width eps.
/// Falls back to a one-sided difference when t +/- eps leaves [0, 1].
std::vector<double> time_derivative(const VelocityFn& u, std::span<const double> x, double t, double eps);

/// Mean over the batch of ||v - v_t||^2 + ||u - v_t + t * du/dt||^2, where
/// du/dt is evaluated with `frozen` and carries no gradient.
FlowLoss distill_loss(const FlowConfig& cfg, const FlowParams& p, const FlowParams& frozen,
                      std::span<const FlowPath> batch, const std::vector<Condition>& conds, double eps = 1e-3);

/// Euler integration of the v head from x0 at t = 0 to t = 1 in `steps` steps.
std::vector<double> integrate(const FlowConfig& cfg, const FlowParams& p, const Condition& cond,
                              std::vector<double> x0, std::size_t steps);
/// Draws x0 ~ N(0, I) and integrates.
std::vector<double> sample(const FlowConfig& cfg, const FlowParams& p, const Condition& cond, std::size_t steps,
                           Rng& rng);
/// n samples as rows; all rows are integrated together.
Matrix sample_batch(const FlowConfig& cfg, const FlowParams& p, const Condition& cond, std::size_t steps,
                    std::size_t n, Rng& rng);

/// 2 E|X - Y| - E|X - X'| - E|Y - Y'| with V-statistic pair averages.
double energy_distance(const Matrix& a, const Matrix& b);

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
    void step(FlowParams& p, const FlowParams& grads);

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Synthetic conditional target: code c draws from N(means[c], stddev^2 I).
struct GaussianTask {
    std::vector<std::vector<double>> means;
    double stddev = 0.6;

    static GaussianTask two_modes();
    std::vector<double> draw(std::size_t code, Rng& rng) const;
};

struct TrainOptions {
    std::size_t steps = 2000;
    std::size_t batch = 128;
    double lr = 2e-3;
    double jvp_eps = 1e-3;
};

/// Flow-matching training on independent (noise, data) pairs.
void train_teacher(const FlowConfig& cfg, FlowParams& p, const GaussianTask& task, const TrainOptions& opt,
                   Rng& rng);

/// Fine-tunes with distill_loss on (noise, teacher sample) pairs produced by
/// the teacher's `teacher_steps`-step sampler.
void distill_student(const FlowConfig& cfg, FlowParams& student, const FlowParams& teacher, const GaussianTask& task,
                     std::size_t teacher_steps, const TrainOptions& opt, Rng& rng);

nlohmann::json to_json(const FlowConfig& cfg);
FlowConfig flow_config_from_json(const nlohmann::json& j);
Container pack_flow(const FlowConfig& cfg, const FlowParams& p);
std::pair<FlowConfig, FlowParams> unpack_flow(const Container& c);

}  // namespace dlm::flow
