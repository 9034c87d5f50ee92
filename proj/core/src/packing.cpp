// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/packing.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

namespace dlm {

std::size_t PackedSequence::padding() const {
    std::size_t total = pad;
    for (const auto& s : segments) total += s.length - s.content;
    return total;
}

bool PackedSequence::consistent() const {
    std::size_t cursor = 0;
    for (const auto& s : segments) {
        if (s.offset != cursor || s.content > s.length || s.length == 0) return false;
        cursor += s.length;
    }
    return cursor + pad == capacity;
}

std::vector<PackedSequence> pack(const std::vector<PackSample>& samples, std::size_t capacity,
                                 std::size_t block_size) {
    if (block_size == 0) throw ConfigError("pack: block_size must be >= 1");
    if (capacity == 0 || capacity % block_size != 0) {
        throw ConfigError("pack: capacity must be a positive multiple of block_size");
    }
    std::vector<std::size_t> rounded(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::size_t len = std::max<std::size_t>(samples[i].length, 1);
        rounded[i] = (len + block_size - 1) / block_size * block_size;
        if (rounded[i] > capacity) {
            throw ConfigError("pack: sample " + std::to_string(samples[i].id) + " (length " +
                              std::to_string(samples[i].length) + ") exceeds capacity " + std::to_string(capacity));
        }
    }
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rounded[a] > rounded[b]; });

    std::vector<PackedSequence> bins;
    std::vector<std::size_t> used;
    for (std::size_t i : order) {
        std::size_t b = 0;
        while (b < bins.size() && used[b] + rounded[i] > capacity) ++b;
        if (b == bins.size()) {
            bins.push_back(PackedSequence{capacity, {}, 0});
            used.push_back(0);
        }
        bins[b].segments.push_back(Segment{samples[i].id, used[b], rounded[i], samples[i].length});
        used[b] += rounded[i];
    }
    for (std::size_t b = 0; b < bins.size(); ++b) bins[b].pad = capacity - used[b];
    return bins;
}

std::size_t total_padding(const std::vector<PackedSequence>& packed) {
    std::size_t total = 0;
    for (const auto& p : packed) total += p.padding();
    return total;
}

std::size_t naive_padding(const std::vector<PackSample>& samples, std::size_t capacity) {
    std::size_t total = 0;
    for (const auto& s : samples) {
        if (s.length > capacity) throw ConfigError("naive_padding: sample " + std::to_string(s.id) + " exceeds capacity");
        total += capacity - s.length;
    }
    return total;
}

AttentionMask segment_mask(const PackedSequence& packed, std::size_t block_size) {
    if (!packed.consistent()) throw ConfigError("segment_mask: inconsistent packed sequence");
    const std::size_t n = packed.capacity;
    std::vector<std::size_t> seg(n, packed.segments.size());
    for (std::size_t s = 0; s < packed.segments.size(); ++s) {
        const auto& g = packed.segments[s];
        if (g.offset % block_size != 0 || g.length % block_size != 0) {
            throw ConfigError("segment_mask: segment is not block aligned");
        }
        std::fill(seg.begin() + static_cast<std::ptrdiff_t>(g.offset),
                  seg.begin() + static_cast<std::ptrdiff_t>(g.offset + g.length), s);
    }
    std::vector<std::uint8_t> bits(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) bits[i * n + j] = seg[i] == seg[j] ? 1 : 0;
    }
    return AttentionMask::intersect(build_block_mask(n, block_size, 0), AttentionMask::dense(n, std::move(bits)), n);
}

PackedShard pack_corpus(const std::vector<CorpusRecord>& records, std::size_t capacity, std::size_t block_size,
                        TokenId pad_id) {
    std::vector<PackSample> samples;
    samples.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) samples.push_back({i, records[i].ids.size()});
    PackedShard shard;
    shard.layout = pack(samples, capacity, block_size);
    for (const auto& packed : shard.layout) {
        CorpusRecord row;
        for (const auto& s : packed.segments) {
            const CorpusRecord& rec = records[s.sample_id];
            for (const auto& span : rec.spans) {
                row.spans.push_back({span.start + s.offset, span.end + s.offset, span.modality});
            }
            row.ids.insert(row.ids.end(), rec.ids.begin(), rec.ids.end());
            if (s.length > s.content) {
                row.spans.push_back({s.offset + s.content, s.offset + s.length, Modality::kSpecial});
                row.ids.insert(row.ids.end(), s.length - s.content, pad_id);
            }
        }
        if (packed.pad > 0) {
            row.spans.push_back({capacity - packed.pad, capacity, Modality::kSpecial});
            row.ids.insert(row.ids.end(), packed.pad, pad_id);
        }
        shard.rows.push_back(std::move(row));
    }
    return shard;
}

void write_sidecar(std::ostream& out, const std::vector<PackedSequence>& layout) {
    for (std::size_t r = 0; r < layout.size(); ++r) {
        nlohmann::json segs = nlohmann::json::array();
        for (const auto& s : layout[r].segments) {
            segs.push_back({{"sample_id", s.sample_id}, {"offset", s.offset}, {"length", s.length},
                            {"content", s.content}});
        }
        out << nlohmann::json{{"row", r}, {"capacity", layout[r].capacity}, {"pad", layout[r].pad},
                              {"segments", segs}}
                   .dump()
            << '\n';
    }
}

}  // namespace dlm
