// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

// Offline first-fit-decreasing packing of variable-length samples into
// fixed-capacity sequences, with a segment-restricted attention mask.

#pragma once

#include <iosfwd>
#include <vector>

#include "dlm/model.hpp"
#include "dlm/vocab.hpp"

namespace dlm {

struct PackSample {
    std::size_t id = 0;
    std::size_t length = 0;
};

struct Segment {
    std::size_t sample_id = 0;
    std::size_t offset = 0;
    std::size_t length = 0;   ///< occupied slots, a multiple of the block size
    std::size_t content = 0;  ///< the sample's own tokens; the rest is in-segment padding

    bool operator==(const Segment&) const = default;
};

struct PackedSequence {
    std::size_t capacity = 0;
    std::vector<Segment> segments;
    std::size_t pad = 0;  ///< trailing slots after the last segment

    /// Trailing pad plus in-segment padding.
    std::size_t padding() const;
    /// Checks lengths + pad == capacity and ordered, non-overlapping segments.
    bool consistent() const;
    bool operator==(const PackedSequence&) const = default;
};

/// Rounds every length up to a block_size multiple, then packs first-fit-decreasing
/// (ties keep input order). capacity must be a multiple of block_size.
/// Throws ConfigError naming the sample when a rounded length exceeds capacity.
std::vector<PackedSequence> pack(const std::vector<PackSample>& samples, std::size_t capacity,
                                 std::size_t block_size = 1);

std::size_t total_padding(const std::vector<PackedSequence>& packed);
/// Padding when every sample gets its own capacity-length row.
std::size_t naive_padding(const std::vector<PackSample>& samples, std::size_t capacity);

/// Block mask over the packed row (no prompt) restricted to same-segment pairs.
/// The trailing pad forms its own segment.
AttentionMask segment_mask(const PackedSequence& packed, std::size_t block_size);

struct PackedShard {
    std::vector<CorpusRecord> rows;
    std::vector<PackedSequence> layout;
};

/// Packs corpus records (sample id = record index). Padding uses pad_id and is labelled SPECIAL.
PackedShard pack_corpus(const std::vector<CorpusRecord>& records, std::size_t capacity, std::size_t block_size,
                        TokenId pad_id);

/// One JSON line per packed row: {"row", "capacity", "pad", "segments": [{sample_id, offset, length, content}]}.
void write_sidecar(std::ostream& out, const std::vector<PackedSequence>& layout);

}  // namespace dlm
