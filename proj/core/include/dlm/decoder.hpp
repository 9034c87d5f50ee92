// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "dlm/model.hpp"
#include "dlm/sprint.hpp"
#include "dlm/vocab.hpp"

namespace dlm {

struct GenerateOptions {
    std::size_t n_blocks = 1;
    std::size_t block_size = 8;
    UnmaskPolicy policy;
    PruneConfig prune = PruneConfig::full_retention();
    /// Sample committed tokens from the softmax instead of taking the argmax.
    bool sample_tokens = false;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Committed ids and confidences for a set of masked positions.
struct Commit {
    std::vector<TokenId> ids;
    std::vector<double> confidences;
};

/// Per row: argmax over the vocabulary excluding MASK and size tokens, with
/// its probability under the full-vocabulary softmax.
Commit greedy_commit(const Matrix& logits, const TokenVocabulary& vocab);

/// Like greedy_commit but draws the id from the softmax restricted to
/// non-excluded ids.
Commit sampled_commit(const Matrix& logits, const TokenVocabulary& vocab, Rng& rng);

struct StepRecord {
    std::size_t block = 0;
    std::size_t step = 0;
    std::vector<std::size_t> accepted;  ///< absolute positions committed at this step
};

struct GenerationResult {
    TokenSequence tokens;  ///< prompt followed by the generated blocks
    std::uint64_t nfe = 0;
    std::uint64_t attended = 0;
    std::uint64_t wall_ns = 0;
    std::vector<std::size_t> per_block_steps;
    std::vector<StepRecord> steps;
    /// Prefix positions retained after pruning, per block.
    std::vector<std::size_t> retained_prefix;
};

/// Block-wise generation. Each block starts with a full forward over the
/// whole sequence; the prefix part of the resulting cache is scored and pruned
/// once, and later steps forward only the current block against it.
GenerationResult generate(const ModelConfig& cfg, const ModelParams& params, const TokenVocabulary& vocab,
                          const TokenSequence& prompt, const GenerateOptions& opts);

/// Recomputes the full sequence at every step, without any cache or pruning.
GenerationResult generate_reference(const ModelConfig& cfg, const ModelParams& params, const TokenVocabulary& vocab,
                                    const TokenSequence& prompt, const GenerateOptions& opts);

}  // namespace dlm
