// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/sprint.hpp"

#include <algorithm>
#include <numeric>

namespace dlm {

void PruneConfig::validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(alpha) || !in_unit(r_text) || !in_unit(r_img) || !in_unit(r_global)) {
        throw ConfigError("prune: alpha and keep ratios must lie in [0, 1]");
    }
}

void UnmaskPolicy::validate() const {
    if (!(tau >= 0.0)) throw ConfigError("unmask: tau must be >= 0");
    if (total_steps < 1) throw ConfigError("unmask: total_steps must be >= 1");
}

namespace {

Modality modality_at(const std::vector<ModalitySpan>& spans, std::size_t pos) {
    auto it = std::upper_bound(spans.begin(), spans.end(), pos,
                               [](std::size_t p, const ModalitySpan& s) { return p < s.start; });
    if (it == spans.begin() || pos >= std::prev(it)->end) {
        throw ConfigError("score_prefix: position " + std::to_string(pos) + " has no modality span");
    }
    return std::prev(it)->modality;
}

double top1_probability(std::span<const double> logits) {
    const double lse = log_sum_exp(logits);
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    return std::exp(mx - lse);
}

}  // namespace

std::vector<ImportanceRecord> score_prefix(const PrefixCache& cache, const Matrix& logits,
                                           const std::vector<ModalitySpan>& spans, const PruneConfig& cfg) {
    cfg.validate();
    const std::size_t n = cache.size();
    if (n == 0) return {};
    if (logits.rows != n) throw ConfigError("score_prefix: need one logits row per cached position");

    std::vector<double> norms(n, 0.0);
    for (std::size_t l = 0; l < cache.n_layers(); ++l) {
        const Matrix& k = cache.keys(l);
        for (std::size_t s = 0; s < n; ++s) {
            double ss = 0.0;
            for (double v : k.row(s)) ss += v * v;
            norms[s] += std::sqrt(ss);
        }
    }
    for (double& v : norms) v /= static_cast<double>(cache.n_layers());
    const double mean = std::accumulate(norms.begin(), norms.end(), 0.0) / static_cast<double>(n);

    std::vector<ImportanceRecord> out(n);
    for (std::size_t s = 0; s < n; ++s) {
        auto& r = out[s];
        r.position = cache.retained()[s];
        r.key_norm_importance = mean > 0.0 ? norms[s] / mean : 1.0;
        r.confidence = top1_probability(logits.row(s));
        r.score = cfg.alpha * r.key_norm_importance + (1.0 - cfg.alpha) * r.confidence;
        r.modality = modality_at(spans, r.position);
    }
    return out;
}

std::vector<std::size_t> retained_slots(const std::vector<ImportanceRecord>& records, const PruneConfig& cfg) {
    cfg.validate();
    // Descending score, ascending position on ties.
    auto better = [&](std::size_t a, std::size_t b) {
        if (records[a].score != records[b].score) return records[a].score > records[b].score;
        return records[a].position < records[b].position;
    };
    std::vector<std::size_t> text, image, keep;
    for (std::size_t s = 0; s < records.size(); ++s) {
        switch (records[s].modality) {
            case Modality::kText: text.push_back(s); break;
            case Modality::kImage: image.push_back(s); break;
            case Modality::kSpecial: keep.push_back(s); break;
        }
    }
    auto top = [&](std::vector<std::size_t>& group, double ratio) {
        std::stable_sort(group.begin(), group.end(), better);
        const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(group.size())));
        group.resize(std::min(k, group.size()));
    };
    top(text, cfg.r_text);
    top(image, cfg.r_img);

    const auto cap = static_cast<std::size_t>(std::floor(cfg.r_global * static_cast<double>(records.size())));
    std::size_t total = keep.size() + text.size() + image.size();
    // Groups are best-first, so eviction pops from the back.
    while (total > cap && !image.empty()) {
        image.pop_back();
        --total;
    }
    while (total > cap && !text.empty()) {
        text.pop_back();
        --total;
    }
    keep.insert(keep.end(), text.begin(), text.end());
    keep.insert(keep.end(), image.begin(), image.end());
    std::sort(keep.begin(), keep.end());
    return keep;
}

PrefixCache prune_prefix(const std::vector<ImportanceRecord>& records, const PrefixCache& cache,
                         const PruneConfig& cfg) {
    if (records.size() != cache.size()) throw ConfigError("prune_prefix: records must cover the cache exactly");
    for (std::size_t s = 0; s < records.size(); ++s) {
        if (records[s].position != cache.retained()[s]) {
            throw ConfigError("prune_prefix: record positions do not match the cache");
        }
    }
    if (cfg.retains_everything()) return cache;
    const auto slots = retained_slots(records, cfg);
    if (slots.empty() && !records.empty()) {
        throw ConfigError("prune_prefix: keep ratios would evict the entire prefix");
    }
    if (slots.size() == cache.size()) return cache;
    return cache.select_slots(slots);
}

std::size_t acceptance_floor(std::size_t remaining_masked, std::size_t remaining_steps) {
    if (remaining_steps == 0) throw ConfigError("acceptance_floor: no steps remaining");
    return (remaining_masked + remaining_steps - 1) / remaining_steps;
}

std::vector<std::size_t> select_unmask(std::span<const double> confidences, const UnmaskPolicy& policy,
                                       std::size_t remaining_steps) {
    const std::size_t m = confidences.size();
    if (m == 0) throw ConfigError("select_unmask: nothing left to unmask");
    const std::size_t floor = std::max<std::size_t>(1, acceptance_floor(m, remaining_steps));

    std::vector<std::size_t> ranked(m);
    std::iota(ranked.begin(), ranked.end(), 0);
    std::stable_sort(ranked.begin(), ranked.end(),
                     [&](std::size_t a, std::size_t b) { return confidences[a] > confidences[b]; });

    std::vector<std::size_t> accepted;
    if (policy.mode == UnmaskMode::kAdaptive) {
        for (std::size_t i : ranked) {
            if (confidences[i] > policy.tau) accepted.push_back(i);
        }
    }
    // ranked is best-first, and the threshold set is a prefix of it.
    for (std::size_t i = accepted.size(); accepted.size() < floor && i < m; ++i) accepted.push_back(ranked[i]);
    std::sort(accepted.begin(), accepted.end());
    return accepted;
}

}  // namespace dlm
