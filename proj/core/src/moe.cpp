// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/moe.hpp"

#include <algorithm>
#include <numeric>

namespace dlm {

void MoEConfig::validate() const {
    if (n_experts < 1) throw ConfigError("moe: n_experts must be >= 1");
    if (top_k < 1 || top_k > n_experts) throw ConfigError("moe: top_k must lie in [1, n_experts]");
    if (!(gate_scale > 0.0)) throw ConfigError("moe: gate_scale must be > 0");
    if (!(load_decay >= 0.0 && load_decay < 1.0)) throw ConfigError("moe: load_decay must lie in [0, 1)");
}

RouterState RouterState::uniform(std::size_t n_experts) {
    RouterState s;
    s.bias.assign(n_experts, 0.0);
    s.load.assign(n_experts, 1.0 / static_cast<double>(n_experts));
    return s;
}

double RouterState::max_load_gap() const {
    double gap = 0.0;
    for (double f : load) gap = std::max(gap, std::abs(f - target()));
    return gap;
}

Routing route(std::span<const double> gate_logits, const RouterState& state, const MoEConfig& cfg) {
    const std::size_t n = cfg.n_experts;
    if (gate_logits.size() != n || state.bias.size() != n) {
        throw ConfigError("route: gate logits / bias size does not match n_experts");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto score = [&](std::size_t e) { return cfg.gate_scale * gate_logits[e] + state.bias[e]; };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score(a) > score(b); });

    Routing r;
    r.experts.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.top_k));
    for (std::size_t e : r.experts) r.weights.push_back(cfg.gate_scale * gate_logits[e]);
    softmax_inplace(r.weights);
    return r;
}

void update_bias(RouterState& state, std::span<const double> observed_load, double rate) {
    const std::size_t n = state.bias.size();
    if (observed_load.size() != n) throw ConfigError("update_bias: load size does not match n_experts");
    const double q = 1.0 / static_cast<double>(n);
    double ss = 0.0;
    for (double f : observed_load) ss += (f - q) * (f - q);
    const double rms = std::sqrt(ss / static_cast<double>(n));
    if (rms == 0.0) return;
    for (std::size_t i = 0; i < n; ++i) state.bias[i] += rate * (observed_load[i] - q) / rms;
}

void observe_load(RouterState& state, std::span<const double> batch_frequencies, double decay) {
    if (batch_frequencies.size() != state.load.size()) throw ConfigError("observe_load: size mismatch");
    if (!state.load_initialized) {
        state.load.assign(batch_frequencies.begin(), batch_frequencies.end());
        state.load_initialized = true;
        return;
    }
    for (std::size_t i = 0; i < state.load.size(); ++i) {
        state.load[i] = decay * state.load[i] + (1.0 - decay) * batch_frequencies[i];
    }
}

std::vector<double> selection_frequencies(std::span<const Routing> routings, std::size_t n_experts) {
    std::vector<double> f(n_experts, 0.0);
    double total = 0.0;
    for (const auto& r : routings) {
        for (std::size_t e : r.experts) {
            f[e] += 1.0;
            total += 1.0;
        }
    }
    if (total > 0.0) {
        for (double& x : f) x /= total;
    }
    return f;
}

}  // namespace dlm
