// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dlm/autodiff.hpp"
#include "dlm/common.hpp"
#include "dlm/moe.hpp"

namespace dlm {

struct ModelConfig {
    std::size_t d_model = 16;
    std::size_t n_heads = 2;
    std::size_t n_layers = 1;
    std::size_t d_ff = 32;
    std::size_t vocab_size = 16;
    std::size_t block_size = 4;
    double rope_base = 10000.0;
    std::optional<MoEConfig> moe;

    std::size_t head_dim() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct FeedForwardParams {
    Matrix w_in;   ///< d_ff x d_model
    Matrix w_out;  ///< d_model x d_ff
};

struct LayerParams {
    Matrix attn_norm;  ///< 1 x d_model
    Matrix wq, wk, wv, wo;
    Matrix ffn_norm;
    FeedForwardParams ffn;                 ///< dense path (empty under MoE)
    Matrix gate;                           ///< n_experts x d_model (MoE only)
    std::vector<FeedForwardParams> experts;
    RouterState router;
};

struct ModelParams {
    Matrix embed;  ///< vocab x d_model
    std::vector<LayerParams> layers;
    Matrix final_norm;
    Matrix head;  ///< vocab x d_model

    /// Zero-filled tensors with the shapes implied by cfg.
    static ModelParams zeros(const ModelConfig& cfg);
    /// Weights uniform in [-scale, scale]; norm gains 1; router bias 0.
    static ModelParams random(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.02);

    /// Visits every trainable tensor in declaration order.
    void for_each(const std::function<void(const std::string&, Matrix&)>& fn);
    void for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const;
    std::size_t parameter_count() const;
};

/// Query/key visibility over original positions. Either a block descriptor
/// (any length) or a dense materialised matrix.
class AttentionMask {
public:
    /// Positions below prompt_len form one fully visible block; after it,
    /// consecutive runs of block_size positions form blocks.
    static AttentionMask blockwise(std::size_t block_size, std::size_t prompt_len);
    static AttentionMask dense(std::size_t n, std::vector<std::uint8_t> bits);

    bool allows(std::size_t query_pos, std::size_t key_pos) const;
    std::size_t block_of(std::size_t pos) const;
    bool is_dense() const { return dense_n_ > 0 || dense_bits_.size() > 0; }
    std::size_t dense_size() const { return dense_n_; }
    std::size_t block_size() const { return block_size_; }
    std::size_t prompt_len() const { return prompt_len_; }

    /// Elementwise AND of two masks, materialised over n positions.
    static AttentionMask intersect(const AttentionMask& a, const AttentionMask& b, std::size_t n);

private:
    std::size_t block_size_ = 1;
    std::size_t prompt_len_ = 0;
    std::size_t dense_n_ = 0;
    std::vector<std::uint8_t> dense_bits_;
};

/// Dense block mask: key j is visible from query i iff block(j) <= block(i).
AttentionMask build_block_mask(std::size_t seq_len, std::size_t block_size, std::size_t prompt_len);

/// Rotates each row (one head vector of even width) by its position.
/// Throws ConfigError on odd width or a positions/rows mismatch.
Matrix apply_rope(const Matrix& vectors, const std::vector<std::size_t>& positions, double rope_base);

/// Post-RoPE keys and values of processed positions, one pair per layer.
class PrefixCache {
public:
    PrefixCache() = default;
    explicit PrefixCache(std::size_t n_layers, std::size_t d_model);

    const std::vector<std::size_t>& retained() const { return retained_; }
    std::size_t size() const { return retained_.size(); }
    std::size_t n_layers() const { return keys_.size(); }
    const Matrix& keys(std::size_t layer) const { return keys_[layer]; }
    const Matrix& values(std::size_t layer) const { return values_[layer]; }
    bool empty() const { return retained_.empty(); }

    /// Appends rows for `positions`; each layer's keys/values must have one row per position.
    void append(const std::vector<std::size_t>& positions, const std::vector<Matrix>& keys,
                const std::vector<Matrix>& values);
    /// Keeps only the given slots (ascending slot indices).
    PrefixCache select_slots(const std::vector<std::size_t>& slots) const;
    /// Drops every position >= pos.
    void truncate_before(std::size_t pos);
    /// Checks retained is strictly increasing and tensor shapes agree.
    bool consistent() const;

    bool operator==(const PrefixCache&) const = default;

private:
    std::vector<std::size_t> retained_;
    std::vector<Matrix> keys_;
    std::vector<Matrix> values_;
};

enum class CacheMode { kAppend, kReadOnly };

struct ForwardResult {
    Matrix logits;  ///< inputs x vocab
    /// Query-key pairs enabled by the mask, summed over layers.
    std::uint64_t attended = 0;
    /// Per layer, the routing chosen for each input row (MoE models only).
    std::vector<std::vector<Routing>> routings;
};

/// Inference forward pass. `positions` are original sequence indices and
/// drive both RoPE and the mask. With a cache, every cached position must
/// precede every input position; in kAppend mode the inputs' keys/values are
/// appended to the cache. Throws RuntimeFault naming the layer on non-finite
/// activations.
ForwardResult forward(const ModelConfig& cfg, const ModelParams& params, const std::vector<TokenId>& ids,
                      const std::vector<std::size_t>& positions, const AttentionMask& mask,
                      PrefixCache* cache = nullptr, CacheMode mode = CacheMode::kAppend);

/// Parameters bound as tape leaves, mirroring ModelParams.
struct ParamVars {
    ad::Var embed;
    struct Layer {
        ad::Var attn_norm, wq, wk, wv, wo, ffn_norm, w_in, w_out, gate;
        std::vector<ad::Var> exp_in, exp_out;
    };
    std::vector<Layer> layers;
    ad::Var final_norm, head;
};

/// Registers params on the tape; gradients accumulate into `grads` (may be null).
ParamVars bind_params(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& params, ModelParams* grads);

/// Differentiable forward over explicit slots: slot i holds ids[i] at
/// positions[i]; allow is the n x n slot visibility matrix. Returns logits.
ad::Var forward_tape(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& params, const ParamVars& vars,
                     const std::vector<TokenId>& ids, const std::vector<std::size_t>& positions,
                     const std::vector<std::uint8_t>& allow);

}  // namespace dlm
