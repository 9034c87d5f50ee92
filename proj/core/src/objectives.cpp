// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/objectives.hpp"

namespace dlm {

double sample_timestep(Rng& rng) {
    // 1 - uniform() lies in (0, 1]
    return kMinTimestep + (1.0 - kMinTimestep) * (1.0 - rng.uniform());
}

std::size_t MaskedBatch::masked_count() const {
    std::size_t n = 0;
    for (auto f : mask_flags) n += f;
    return n;
}

namespace {

void check_corrupt_args(const TokenSequence& x0, std::size_t prompt_len, double t) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("timestep must lie in (0, 1]");
    if (prompt_len >= x0.length()) throw ConfigError("prompt_len must be shorter than the sequence");
}

MaskedBatch with_mask(const TokenSequence& x0, std::size_t prompt_len, double t, TokenId mask_id,
                      const std::vector<std::uint8_t>& masked) {
    MaskedBatch b;
    b.clean = x0;
    b.t = t;
    b.prompt_len = prompt_len;
    b.corrupted = x0.ids;
    b.mask_flags.assign(x0.length(), 0);
    for (std::size_t i = prompt_len; i < x0.length(); ++i) {
        if (masked[i]) {
            b.corrupted[i] = mask_id;
            b.mask_flags[i] = x0.ids[i] != mask_id;
        }
    }
    return b;
}

std::vector<std::uint8_t> draw_mask(std::size_t length, std::size_t prompt_len, double p, Rng& rng) {
    std::vector<std::uint8_t> m(length, 0);
    for (std::size_t i = prompt_len; i < length; ++i) m[i] = rng.uniform() < p;
    return m;
}

}  // namespace

MaskedBatch corrupt(const TokenSequence& x0, std::size_t prompt_len, double t, TokenId mask_id, Rng& rng,
                    const NoiseSchedule& schedule) {
    check_corrupt_args(x0, prompt_len, t);
    const double p = 1.0 - schedule.alpha(t);
    for (;;) {
        auto m = draw_mask(x0.length(), prompt_len, p, rng);
        MaskedBatch b = with_mask(x0, prompt_len, t, mask_id, m);
        if (b.masked_count() > 0) return b;
    }
}

std::pair<MaskedBatch, MaskedBatch> complementary_pair(const TokenSequence& x0, std::size_t prompt_len, double t,
                                                       TokenId mask_id, Rng& rng, const NoiseSchedule& schedule) {
    check_corrupt_args(x0, prompt_len, t);
    auto m = draw_mask(x0.length(), prompt_len, 1.0 - schedule.alpha(t), rng);
    auto inv = m;
    for (std::size_t i = prompt_len; i < inv.size(); ++i) inv[i] = !m[i];
    return {with_mask(x0, prompt_len, t, mask_id, m), with_mask(x0, prompt_len, t, mask_id, inv)};
}

DualCopyInput build_dual_copy(const MaskedBatch& batch, const NoiseSchedule& schedule) {
    const std::size_t len = batch.clean.length();
    const std::size_t p = batch.prompt_len;
    const AttentionMask blocks = AttentionMask::blockwise(batch.clean.block_size, p);

    DualCopyInput in;
    for (std::size_t i = 0; i < len; ++i) {
        in.ids.push_back(batch.clean.ids[i]);
        in.positions.push_back(i);
        in.targets.push_back(0);
        in.weights.push_back(0.0);
    }
    const double w = schedule.time_weight(batch.t);
    for (std::size_t i = p; i < len; ++i) {
        in.ids.push_back(batch.corrupted[i]);
        in.positions.push_back(i);
        in.targets.push_back(batch.clean.ids[i]);
        in.weights.push_back(batch.mask_flags[i] ? w : 0.0);
    }
    const std::size_t n = in.ids.size();
    in.allow.assign(n * n, 0);
    for (std::size_t a = 0; a < n; ++a) {
        const bool a_noisy = a >= len;
        const std::size_t ba = blocks.block_of(in.positions[a]);
        for (std::size_t b = 0; b < n; ++b) {
            const bool b_noisy = b >= len;
            const std::size_t bb = blocks.block_of(in.positions[b]);
            bool ok;
            if (!a_noisy) {
                ok = !b_noisy && bb <= ba;
            } else {
                ok = b_noisy ? bb == ba : bb < ba;
            }
            in.allow[a * n + b] = ok;
        }
    }
    return in;
}

namespace {

/// Adds seed * d(L_j)/d(theta) into grads and returns L_j.
double sample_loss(const ModelConfig& cfg, const ModelParams& params, const MaskedBatch& batch,
                   const NoiseSchedule& schedule, double seed, ModelParams& grads) {
    const DualCopyInput in = build_dual_copy(batch, schedule);
    ad::Tape tape;
    const ParamVars vars = bind_params(tape, cfg, params, &grads);
    const ad::Var logits = forward_tape(tape, cfg, params, vars, in.ids, in.positions, in.allow);
    const ad::Var loss = ad::weighted_nll(tape, logits, in.targets, in.weights);
    const double value = tape.value(loss)(0, 0);
    if (seed != 0.0) tape.backward(loss, seed);
    return value;
}

}  // namespace

LossResult bdlm_loss(const ModelConfig& cfg, const ModelParams& params, std::span<const MaskedBatch> batch,
                     const NoiseSchedule& schedule) {
    if (batch.empty()) throw ConfigError("bdlm_loss: empty batch");
    std::size_t total_masked = 0;
    for (const auto& b : batch) total_masked += b.masked_count();
    if (total_masked == 0) throw ConfigError("bdlm_loss: no masked tokens in batch");

    LossResult r{0.0, ModelParams::zeros(cfg)};
    const double seed = 1.0 / static_cast<double>(batch.size());
    for (const auto& b : batch) r.loss += seed * sample_loss(cfg, params, b, schedule, seed, r.grads);
    return r;
}

std::vector<double> reweighting_factors(std::span<const std::size_t> masked_counts) {
    std::vector<double> beta;
    beta.reserve(masked_counts.size());
    for (std::size_t m : masked_counts) beta.push_back(m == 0 ? 0.0 : 1.0 / std::sqrt(static_cast<double>(m)));
    return beta;
}

LossResult sft_loss(const ModelConfig& cfg, const ModelParams& params, std::span<const MaskedBatch> samples,
                    const NoiseSchedule& schedule) {
    if (samples.empty()) throw ConfigError("sft_loss: empty sample list");
    std::vector<std::size_t> counts;
    for (const auto& s : samples) {
        if (s.prompt_len == 0) throw ConfigError("sft_loss: every sample needs a prompt");
        counts.push_back(s.masked_count());
    }
    const std::vector<double> beta = reweighting_factors(counts);
    double beta_sum = 0.0;
    for (double b : beta) beta_sum += b;
    if (beta_sum == 0.0) throw ConfigError("sft_loss: no masked tokens in any sample");

    LossResult r{0.0, ModelParams::zeros(cfg)};
    for (std::size_t j = 0; j < samples.size(); ++j) {
        if (beta[j] == 0.0) continue;
        const double w = beta[j] / beta_sum;
        r.loss += w * sample_loss(cfg, params, samples[j], schedule, w, r.grads);
    }
    return r;
}

}  // namespace dlm
