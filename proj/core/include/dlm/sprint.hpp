// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

// Training-free decoding acceleration: importance scoring and modality-aware
// pruning of the prefix KV cache, and confidence-adaptive unmasking.

#pragma once

#include <span>
#include <vector>

#include "dlm/model.hpp"
#include "dlm/vocab.hpp"

namespace dlm {

struct PruneConfig {
    double alpha = 0.5;   ///< blend between key-norm importance and confidence
    double r_text = 1.0;
    double r_img = 0.8;
    double r_global = 0.5;

    /// Everything retained; pruning is skipped entirely.
    static PruneConfig full_retention() { return {0.5, 1.0, 1.0, 1.0}; }
    static PruneConfig selective_image() { return {0.5, 1.0, 0.8, 0.5}; }

    bool retains_everything() const { return r_text >= 1.0 && r_img >= 1.0 && r_global >= 1.0; }
    void validate() const;
    bool operator==(const PruneConfig&) const = default;
};

struct ImportanceRecord {
    std::size_t position = 0;
    double key_norm_importance = 0.0;
    double confidence = 0.0;
    double score = 0.0;
    Modality modality = Modality::kText;
};

enum class UnmaskMode { kFixed, kAdaptive };

struct UnmaskPolicy {
    double tau = 0.95;
    std::size_t total_steps = 8;
    UnmaskMode mode = UnmaskMode::kAdaptive;

    void validate() const;
    bool operator==(const UnmaskPolicy&) const = default;
};

/// Scores every cached position. `logits` row r belongs to cache slot r.
/// Key norm per position is the layer average of the full key vector's L2
/// norm, then divided by the mean over all scored positions.
std::vector<ImportanceRecord> score_prefix(const PrefixCache& cache, const Matrix& logits,
                                           const std::vector<ModalitySpan>& spans, const PruneConfig& cfg);

/// Slots (ascending) that survive pruning. Per-modality top-floor(r * n)
/// selection, then the global cap evicts IMAGE before TEXT; SPECIAL is never
/// evicted. Lower positions win score ties.
std::vector<std::size_t> retained_slots(const std::vector<ImportanceRecord>& records, const PruneConfig& cfg);

/// Physically removes evicted rows. Rejects configurations that would evict
/// every position of a non-empty prefix.
PrefixCache prune_prefix(const std::vector<ImportanceRecord>& records, const PrefixCache& cache,
                         const PruneConfig& cfg);

/// ceil(m / remaining_steps)
std::size_t acceptance_floor(std::size_t remaining_masked, std::size_t remaining_steps);

/// Indices (ascending) of masked positions to commit this step. ADAPTIVE takes
/// every c > tau and tops up to the floor by confidence; FIXED takes exactly
/// the floor by confidence. Confidence ties go to the lower index.
std::vector<std::size_t> select_unmask(std::span<const double> confidences, const UnmaskPolicy& policy,
                                       std::size_t remaining_steps);

}  // namespace dlm
