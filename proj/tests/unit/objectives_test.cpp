// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dlm/objectives.hpp"
#include "test_support.hpp"

namespace dlm {
namespace {

MaskedBatch manual_batch(std::vector<TokenId> clean, std::vector<std::uint8_t> masked, TokenId mask_id, double t,
                         std::size_t prompt_len, std::size_t block_size) {
    MaskedBatch b;
    b.clean.ids = std::move(clean);
    b.clean.block_size = block_size;
    b.clean.spans = {{0, b.clean.ids.size(), Modality::kText}};
    b.corrupted = b.clean.ids;
    b.mask_flags = masked;
    b.t = t;
    b.prompt_len = prompt_len;
    for (std::size_t i = 0; i < masked.size(); ++i) {
        if (masked[i]) b.corrupted[i] = mask_id;
    }
    return b;
}

// Block-by-block reference: for every block, run the inference forward over the
// clean preceding context plus that block's corrupted tokens.
double per_block_oracle(const ModelConfig& cfg, const ModelParams& p, const MaskedBatch& b) {
    const std::size_t len = b.clean.length();
    const std::size_t L = b.clean.block_size;
    const auto mask = AttentionMask::blockwise(L, b.prompt_len);
    double total = 0.0;
    for (std::size_t start = b.prompt_len; start < len; start += L) {
        const std::size_t end = std::min(len, start + L);
        std::vector<TokenId> ids(b.clean.ids.begin(), b.clean.ids.begin() + static_cast<std::ptrdiff_t>(start));
        ids.insert(ids.end(), b.corrupted.begin() + static_cast<std::ptrdiff_t>(start),
                   b.corrupted.begin() + static_cast<std::ptrdiff_t>(end));
        const auto r = forward(cfg, p, ids, testing::iota_positions(0, end), mask);
        for (std::size_t i = start; i < end; ++i) {
            if (!b.mask_flags[i]) continue;
            const auto row = r.logits.row(i);
            total += log_sum_exp(row) - row[static_cast<std::size_t>(b.clean.ids[i])];
        }
    }
    return total / b.t;
}

TEST(Schedule, LinearTimeWeightIsInverseT) {
    NoiseSchedule s;
    EXPECT_EQ(s.alpha(0.0), 1.0);
    EXPECT_EQ(s.alpha(1.0), 0.0);
    for (double t : {1e-3, 0.1, 0.5, 0.9, 1.0}) EXPECT_NEAR(s.time_weight(t), 1.0 / t, 1e-12 / t);
}

TEST(Schedule, SampledTimestepsStayInRange) {
    Rng rng(1);
    for (int i = 0; i < 10000; ++i) {
        const double t = sample_timestep(rng);
        EXPECT_GT(t, kMinTimestep);
        EXPECT_LE(t, 1.0);
    }
}

TEST(Corrupt, EndpointsOfTheSchedule) {
    const auto v = TokenVocabulary::build(5, 0, {});
    Rng rng(2);
    const auto x0 = testing::text_sequence(v, 40, rng);
    const auto all = corrupt(x0, 3, 1.0, v.mask_id(), rng);
    EXPECT_EQ(all.masked_count(), 37u);
    std::size_t total = 0;
    for (int i = 0; i < 200; ++i) total += corrupt(x0, 3, 1e-3, v.mask_id(), rng).masked_count();
    EXPECT_LT(total, 200u * 2);  // at least one each, rarely more
    EXPECT_GE(total, 200u);
}

TEST(Corrupt, HalfRateMonteCarlo) {
    const auto v = TokenVocabulary::build(5, 0, {});
    Rng rng(3);
    const auto x0 = testing::text_sequence(v, 10000, rng);
    const auto b = corrupt(x0, 0, 0.5, v.mask_id(), rng);
    EXPECT_NEAR(static_cast<double>(b.masked_count()) / 10000.0, 0.5, 0.02);
}

TEST(Corrupt, PromptNeverMaskedAndFlagsConsistent) {
    const auto v = TokenVocabulary::build(5, 0, {});
    Rng rng(4);
    const auto x0 = testing::text_sequence(v, 12, rng);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto b = corrupt(x0, 4, rng.uniform(0.05, 1.0), v.mask_id(), rng);
        ASSERT_GE(b.masked_count(), 1u);
        for (std::size_t i = 0; i < 12; ++i) {
            if (i < 4) EXPECT_EQ(b.corrupted[i], x0.ids[i]);
            EXPECT_EQ(b.mask_flags[i] == 1, b.corrupted[i] == v.mask_id() && x0.ids[i] != v.mask_id());
        }
    }
}

TEST(Corrupt, Rejections) {
    const auto v = TokenVocabulary::build(5, 0, {});
    Rng rng(5);
    const auto x0 = testing::text_sequence(v, 4, rng);
    EXPECT_THROW(corrupt(x0, 0, 0.0, v.mask_id(), rng), ConfigError);
    EXPECT_THROW(corrupt(x0, 0, 1.5, v.mask_id(), rng), ConfigError);
    EXPECT_THROW(corrupt(x0, 4, 0.5, v.mask_id(), rng), ConfigError);
}

TEST(Complementary, MasksPartitionTheResponse) {
    const auto v = TokenVocabulary::build(5, 0, {});
    Rng rng(6);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(20);
        const std::size_t p = rng.below(n);
        const auto x0 = testing::text_sequence(v, n, rng);
        const auto [a, b] = complementary_pair(x0, p, rng.uniform(0.01, 1.0), v.mask_id(), rng);
        for (std::size_t i = 0; i < n; ++i) {
            if (i < p) {
                EXPECT_FALSE(a.mask_flags[i] || b.mask_flags[i]);
            } else {
                EXPECT_EQ(a.mask_flags[i] ^ b.mask_flags[i], 1);
            }
        }
    }
}

TEST(Complementary, FullMaskLeavesACleanPartner) {
    const auto v = TokenVocabulary::build(5, 0, {});
    Rng rng(7);
    const auto x0 = testing::text_sequence(v, 8, rng);
    const auto [a, b] = complementary_pair(x0, 2, 1.0, v.mask_id(), rng);
    EXPECT_EQ(a.masked_count(), 6u);
    EXPECT_EQ(b.masked_count(), 0u);
    const ModelConfig cfg{4, 2, 1, 8, v.total_size(), 4, 10000.0, std::nullopt};
    const auto params = ModelParams::random(cfg, 1, 0.3);
    const std::vector<MaskedBatch> both = {a, b};
    const std::vector<MaskedBatch> only = {a};
    EXPECT_NEAR(bdlm_loss(cfg, params, both).loss, bdlm_loss(cfg, params, only).loss / 2.0, 1e-12);
}

TEST(BdlmLoss, UniformPredictorValue) {
    const ModelConfig cfg{4, 2, 1, 8, 4, 2, 10000.0, std::nullopt};
    const std::vector<MaskedBatch> batch = {manual_batch({0, 1}, {1, 1}, 3, 0.5, 0, 2)};
    EXPECT_NEAR(bdlm_loss(cfg, ModelParams::zeros(cfg), batch).loss, 4.0 * std::log(4.0), 1e-9);
}

TEST(BdlmLoss, ConfidentCorrectPredictorIsNearZero) {
    const ModelConfig cfg{4, 2, 1, 8, 4, 2, 10000.0, std::nullopt};
    ModelParams p = ModelParams::zeros(cfg);
    for (auto* g : {&p.layers[0].attn_norm, &p.layers[0].ffn_norm, &p.final_norm}) g->fill(1.0);
    p.embed(3, 0) = 1.0;
    p.head(1, 0) = 20.0;
    const std::vector<MaskedBatch> batch = {manual_batch({1, 1, 1, 1}, {0, 1, 1, 0}, 3, 0.5, 0, 2)};
    EXPECT_LT(bdlm_loss(cfg, p, batch).loss, 1e-15 + 4.0 * 3.0 * std::exp(-40.0));
}

TEST(BdlmLoss, MatchesPerBlockForwardOracle) {
    const auto v = TokenVocabulary::build(6, 0, {});
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        ModelConfig cfg = testing::tiny_config(v.total_size(), 8, 2, 2, 12);
        if (trial % 2) cfg.moe = MoEConfig{3, static_cast<std::size_t>(1 + trial % 3 / 2), 2.5, -0.01, 0.9};
        const auto params = ModelParams::random(cfg, rng.next(), 0.4);
        const std::size_t n = 3 + rng.below(10);
        const std::size_t p = rng.below(3);
        if (p >= n) continue;
        const auto x0 = testing::text_sequence(v, n, rng, 1 + rng.below(4));
        const std::vector<MaskedBatch> batch = {corrupt(x0, p, rng.uniform(0.2, 1.0), v.mask_id(), rng)};
        EXPECT_NEAR(bdlm_loss(cfg, params, batch).loss, per_block_oracle(cfg, params, batch[0]), 1e-10);
    }
}

TEST(BdlmLoss, MeanOverSamples) {
    const auto v = TokenVocabulary::build(6, 0, {});
    Rng rng(9);
    const auto cfg = testing::tiny_config(v.total_size());
    const auto params = ModelParams::random(cfg, 2, 0.3);
    std::vector<MaskedBatch> batch;
    double want = 0.0;
    for (int i = 0; i < 3; ++i) {
        batch.push_back(corrupt(testing::text_sequence(v, 9, rng), 1, 0.6, v.mask_id(), rng));
        want += per_block_oracle(cfg, params, batch.back()) / 3.0;
    }
    EXPECT_NEAR(bdlm_loss(cfg, params, batch).loss, want, 1e-10);
}

TEST(BdlmLoss, RejectsBatchesWithoutMaskedTokens) {
    const ModelConfig cfg{4, 2, 1, 8, 4, 2, 10000.0, std::nullopt};
    const std::vector<MaskedBatch> batch = {manual_batch({0, 1}, {0, 0}, 3, 0.5, 0, 2)};
    EXPECT_THROW(bdlm_loss(cfg, ModelParams::zeros(cfg), batch), ConfigError);
    EXPECT_THROW(bdlm_loss(cfg, ModelParams::zeros(cfg), std::vector<MaskedBatch>{}), ConfigError);
}

template <class LossFn>
double max_fd_error(ModelParams& p, const LossFn& fn) {
    const LossResult base = fn(p);
    std::vector<const Matrix*> grads;
    base.grads.for_each([&](const std::string&, const Matrix& g) { grads.push_back(&g); });
    double worst = 0.0;
    std::size_t idx = 0;
    p.for_each([&](const std::string&, Matrix& m) {
        const Matrix& g = *grads[idx++];
        for (std::size_t k = 0; k < m.size(); ++k) {
            const double orig = m.data[k];
            m.data[k] = orig + 1e-6;
            const double up = fn(p).loss;
            m.data[k] = orig - 1e-6;
            const double down = fn(p).loss;
            m.data[k] = orig;
            const double num = (up - down) / 2e-6;
            worst = std::max(worst, std::abs(g.data[k] - num) / std::max({std::abs(g.data[k]), std::abs(num), 1e-5}));
        }
    });
    return worst;
}

TEST(BdlmLoss, GradientMatchesFiniteDifferences) {
    const auto v = TokenVocabulary::build(3, 0, {});
    Rng rng(10);
    const ModelConfig cfg{8, 2, 1, 12, v.total_size(), 2, 10000.0, std::nullopt};
    auto p = ModelParams::random(cfg, 3, 0.5);
    ASSERT_LE(p.parameter_count(), 1000u);
    std::vector<MaskedBatch> batch;
    for (int i = 0; i < 2; ++i) batch.push_back(corrupt(testing::text_sequence(v, 7, rng, 2), 1, 0.6, v.mask_id(), rng));
    EXPECT_LT(max_fd_error(p, [&](const ModelParams& q) { return bdlm_loss(cfg, q, batch); }), 1e-4);
}

TEST(BdlmLoss, MoeGradientMatchesFiniteDifferences) {
    const auto v = TokenVocabulary::build(3, 0, {});
    Rng rng(11);
    ModelConfig cfg{8, 2, 1, 6, v.total_size(), 2, 10000.0, MoEConfig{3, 2, 2.5, -0.01, 0.9}};
    auto p = ModelParams::random(cfg, 4, 0.5);
    ASSERT_LE(p.parameter_count(), 1000u);
    const std::vector<MaskedBatch> batch = {corrupt(testing::text_sequence(v, 7, rng, 2), 1, 0.7, v.mask_id(), rng)};
    EXPECT_LT(max_fd_error(p, [&](const ModelParams& q) { return bdlm_loss(cfg, q, batch); }), 1e-4);
}

TEST(Reweighting, Factors) {
    const std::vector<std::size_t> counts = {9, 1, 0, 100};
    const auto b = reweighting_factors(counts);
    EXPECT_DOUBLE_EQ(b[0], 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(b[1], 1.0);
    EXPECT_DOUBLE_EQ(b[2], 0.0);
    EXPECT_DOUBLE_EQ(b[3], 0.1);
}

TEST(SftLoss, IdenticalSamplesEqualOneSample) {
    const auto v = TokenVocabulary::build(6, 0, {});
    Rng rng(12);
    const auto cfg = testing::tiny_config(v.total_size());
    const auto params = ModelParams::random(cfg, 5, 0.3);
    const auto b = corrupt(testing::text_sequence(v, 10, rng), 3, 0.5, v.mask_id(), rng);
    const std::vector<MaskedBatch> one = {b};
    const std::vector<MaskedBatch> two = {b, b};
    EXPECT_NEAR(sft_loss(cfg, params, two).loss, sft_loss(cfg, params, one).loss, 1e-12);
    EXPECT_NEAR(sft_loss(cfg, params, one).loss, per_block_oracle(cfg, params, b), 1e-10);
}

TEST(SftLoss, InverseSqrtWeighting) {
    // Uniform predictor: every masked token costs ln V, so L_j = count_j ln V / t.
    const ModelConfig cfg{4, 2, 1, 8, 4, 4, 10000.0, std::nullopt};
    const auto p = ModelParams::zeros(cfg);
    std::vector<TokenId> ids(101, 0);
    std::vector<std::uint8_t> m1(101, 0), m100(101, 1);
    m1[50] = 1;
    m100[0] = 0;
    const std::vector<MaskedBatch> batch = {manual_batch(ids, m1, 3, 0.5, 1, 4), manual_batch(ids, m100, 3, 0.5, 1, 4)};
    const double l1 = 2.0 * std::log(4.0), l100 = 200.0 * std::log(4.0);
    // beta = 1 and 0.1: contributions l1 and 10 * l1, a ratio of sqrt(100) / sqrt(1).
    EXPECT_NEAR(1.0 * l1 * 10.0, 0.1 * l100, 1e-12);
    const double loss = sft_loss(cfg, p, batch).loss;
    EXPECT_NEAR(loss, (1.0 * l1 + 0.1 * l100) / 1.1, 1e-9);
    EXPECT_GE(loss, l1);
    EXPECT_LE(loss, l100);
}

TEST(SftLoss, GradientMatchesFiniteDifferences) {
    const auto v = TokenVocabulary::build(3, 0, {});
    Rng rng(13);
    const ModelConfig cfg{8, 2, 1, 12, v.total_size(), 2, 10000.0, std::nullopt};
    auto p = ModelParams::random(cfg, 6, 0.5);
    std::vector<MaskedBatch> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(corrupt(testing::text_sequence(v, 6, rng, 2), 2, rng.uniform(0.3, 1.0), v.mask_id(), rng));
    EXPECT_LT(max_fd_error(p, [&](const ModelParams& q) { return sft_loss(cfg, q, batch); }), 1e-4);
}

TEST(SftLoss, Rejections) {
    const ModelConfig cfg{4, 2, 1, 8, 4, 2, 10000.0, std::nullopt};
    const auto p = ModelParams::zeros(cfg);
    EXPECT_THROW(sft_loss(cfg, p, std::vector<MaskedBatch>{}), ConfigError);
    const std::vector<MaskedBatch> no_prompt = {manual_batch({0, 1}, {1, 1}, 3, 0.5, 0, 2)};
    EXPECT_THROW(sft_loss(cfg, p, no_prompt), ConfigError);
}

TEST(DualCopy, VisibilityRules) {
    // prompt 1, blocks of 2: positions 1,2 -> block 1; 3 -> block 2.
    const auto b = manual_batch({0, 1, 2, 1}, {0, 1, 0, 1}, 3, 0.5, 1, 2);
    const auto in = build_dual_copy(b, {});
    ASSERT_EQ(in.ids.size(), 7u);
    const std::size_t n = 7;
    auto allowed = [&](std::size_t a, std::size_t c) { return in.allow[a * n + c] == 1; };
    EXPECT_TRUE(allowed(2, 1));   // clean block 1 sees itself
    EXPECT_FALSE(allowed(1, 3));  // clean block 1 cannot see clean block 2
    EXPECT_FALSE(allowed(0, 4));  // clean never sees noisy
    EXPECT_TRUE(allowed(4, 0));   // noisy block 1 sees the prompt
    EXPECT_FALSE(allowed(4, 1));  // but not its own clean copy
    EXPECT_TRUE(allowed(4, 5));   // noisy block 1 sees its block
    EXPECT_FALSE(allowed(4, 6));
    EXPECT_TRUE(allowed(6, 2));   // noisy block 2 sees clean block 1
    EXPECT_FALSE(allowed(6, 3));
    EXPECT_EQ(in.weights, (std::vector<double>{0, 0, 0, 0, 2.0, 0, 2.0}));
}

}  // namespace
}  // namespace dlm
