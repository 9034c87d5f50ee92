// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <utility>
#include <vector>

#include "dlm/common.hpp"
#include "dlm/model.hpp"
#include "dlm/vocab.hpp"

namespace dlm {

/// Linear masking schedule: alpha(t) = 1 - t, so the time weight is 1/t.
struct NoiseSchedule {
    double alpha(double t) const { return 1.0 - t; }
    double alpha_prime(double /*t*/) const { return -1.0; }
    /// -alpha'(t) / (1 - alpha(t))
    double time_weight(double t) const { return -alpha_prime(t) / (1.0 - alpha(t)); }
};

/// Lower bound of sampled timesteps; keeps the 1/t weight finite.
inline constexpr double kMinTimestep = 1e-3;

/// Uniform on (kMinTimestep, 1].
double sample_timestep(Rng& rng);

struct MaskedBatch {
    TokenSequence clean;
    std::vector<TokenId> corrupted;
    std::vector<std::uint8_t> mask_flags;
    double t = 1.0;
    std::size_t prompt_len = 0;

    std::size_t masked_count() const;
};

/// Masks each non-prompt token with probability 1 - alpha(t), redrawing until
/// at least one position is masked.
MaskedBatch corrupt(const TokenSequence& x0, std::size_t prompt_len, double t, TokenId mask_id, Rng& rng,
                    const NoiseSchedule& schedule = {});

/// A masked sample and its exact complement over the non-prompt positions.
/// Neither member is redrawn, so one of them may be fully clean.
std::pair<MaskedBatch, MaskedBatch> complementary_pair(const TokenSequence& x0, std::size_t prompt_len, double t,
                                                       TokenId mask_id, Rng& rng, const NoiseSchedule& schedule = {});

struct LossResult {
    double loss = 0.0;
    ModelParams grads;
};

/// Slot layout used to evaluate one sample in a single pass: clean copies of
/// every position followed by noisy copies of the non-prompt positions.
struct DualCopyInput {
    std::vector<TokenId> ids;
    std::vector<std::size_t> positions;
    std::vector<std::uint8_t> allow;
    std::vector<TokenId> targets;
    std::vector<double> weights;
};

DualCopyInput build_dual_copy(const MaskedBatch& batch, const NoiseSchedule& schedule);

/// Mean over samples of time_weight(t) * sum of masked-token NLL, each block
/// conditioned on the clean preceding blocks.
LossResult bdlm_loss(const ModelConfig& cfg, const ModelParams& params, std::span<const MaskedBatch> batch,
                     const NoiseSchedule& schedule = {});

/// beta_j = 1/sqrt(masked_j); 0 for samples with nothing masked.
std::vector<double> reweighting_factors(std::span<const std::size_t> masked_counts);

/// sum_j beta_j L_j / sum_j beta_j with L_j the prompt-conditioned BDLM loss.
LossResult sft_loss(const ModelConfig& cfg, const ModelParams& params, std::span<const MaskedBatch> samples,
                    const NoiseSchedule& schedule = {});

}  // namespace dlm
