// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "dlm/common.hpp"

namespace dlm {

struct MoEConfig {
    std::size_t n_experts = 4;
    std::size_t top_k = 1;
    double gate_scale = 2.5;
    /// Bias update rate. Negative values lower the bias of overloaded experts.
    double update_rate = -0.01;
    /// Decay of the exponential moving average behind the load estimate.
    double load_decay = 0.9;

    void validate() const;
    bool operator==(const MoEConfig&) const = default;
};

/// Per-expert selection bias, running load estimate F and uniform target Q.
struct RouterState {
    std::vector<double> bias;
    std::vector<double> load;
    /// False until the first observation seeds the load estimate.
    bool load_initialized = false;

    static RouterState uniform(std::size_t n_experts);
    std::size_t n_experts() const { return bias.size(); }
    double target() const { return 1.0 / static_cast<double>(bias.size()); }
    /// max_i |F_i - 1/n|
    double max_load_gap() const;
};

struct Routing {
    std::vector<std::size_t> experts;  ///< in descending biased-score order
    std::vector<double> weights;       ///< softmax over the selected unbiased scaled logits
};

/// Top-k selection on gate_scale * logit + bias; ties go to the lower index.
/// The bias steers selection only; combine weights ignore it.
Routing route(std::span<const double> gate_logits, const RouterState& state, const MoEConfig& cfg);

/// b_i <- b_i + u * (F_i - Q_i) / RMS(F - Q). No-op when F == Q.
void update_bias(RouterState& state, std::span<const double> observed_load, double rate);

/// Folds one batch's selection frequencies into the load estimate (EMA).
void observe_load(RouterState& state, std::span<const double> batch_frequencies, double decay);

/// Selection frequencies of a batch of routings; sums to 1 over all picks.
std::vector<double> selection_frequencies(std::span<const Routing> routings, std::size_t n_experts);

}  // namespace dlm
