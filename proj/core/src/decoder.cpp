// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/decoder.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

namespace dlm {

void GenerateOptions::validate() const {
    if (n_blocks < 1) throw ConfigError("generate: n_blocks must be >= 1");
    if (block_size < 1) throw ConfigError("generate: block_size must be >= 1");
    policy.validate();
    prune.validate();
}

namespace {

bool excluded(TokenId id, const TokenVocabulary& vocab) { return id == vocab.mask_id() || vocab.is_size_token(id); }

}  // namespace

Commit greedy_commit(const Matrix& logits, const TokenVocabulary& vocab) {
    Commit c;
    for (std::size_t r = 0; r < logits.rows; ++r) {
        const auto row = logits.row(r);
        TokenId best = -1;
        for (std::size_t v = 0; v < row.size(); ++v) {
            const auto id = static_cast<TokenId>(v);
            if (excluded(id, vocab)) continue;
            if (best < 0 || row[v] > row[static_cast<std::size_t>(best)]) best = id;
        }
        if (best < 0) throw ConfigError("greedy_commit: every id is excluded");
        c.ids.push_back(best);
        c.confidences.push_back(std::exp(row[static_cast<std::size_t>(best)] - log_sum_exp(row)));
    }
    return c;
}

Commit sampled_commit(const Matrix& logits, const TokenVocabulary& vocab, Rng& rng) {
    Commit c;
    std::vector<double> p;
    for (std::size_t r = 0; r < logits.rows; ++r) {
        const auto row = logits.row(r);
        p.assign(row.begin(), row.end());
        softmax_inplace(p);
        double mass = 0.0;
        for (std::size_t v = 0; v < p.size(); ++v) {
            if (excluded(static_cast<TokenId>(v), vocab)) p[v] = 0.0;
            mass += p[v];
        }
        double u = rng.uniform() * mass;
        std::size_t pick = 0;
        for (std::size_t v = 0; v < p.size(); ++v) {
            if (p[v] == 0.0) continue;
            pick = v;
            if (u < p[v]) break;
            u -= p[v];
        }
        c.ids.push_back(static_cast<TokenId>(pick));
        c.confidences.push_back(p[pick]);
    }
    return c;
}

namespace {

/// Per-block bookkeeping shared by both decoding paths.
struct DenoiseState {
    std::size_t block = 0;
    std::size_t step = 0;
    std::size_t block_start = 0;
    std::vector<std::size_t> masked;  ///< absolute positions, ascending
};

/// Applies one denoising step given logits for the masked positions (rows in
/// `masked` order). Returns the accepted absolute positions.
std::vector<std::size_t> denoise_step(DenoiseState& st, const Matrix& masked_logits, std::vector<TokenId>& ids,
                                      const TokenVocabulary& vocab, const GenerateOptions& opts, Rng& rng) {
    const Commit commit = opts.sample_tokens ? sampled_commit(masked_logits, vocab, rng)
                                             : greedy_commit(masked_logits, vocab);
    const std::size_t remaining = opts.policy.total_steps > st.step ? opts.policy.total_steps - st.step : 1;
    const auto chosen = select_unmask(commit.confidences, opts.policy, remaining);
    std::vector<std::size_t> accepted;
    for (std::size_t idx : chosen) {
        ids[st.masked[idx]] = commit.ids[idx];
        accepted.push_back(st.masked[idx]);
    }
    std::vector<std::size_t> still;
    std::set_difference(st.masked.begin(), st.masked.end(), accepted.begin(), accepted.end(),
                        std::back_inserter(still));
    st.masked = std::move(still);
    ++st.step;
    return accepted;
}

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), m.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
    }
    return out;
}

std::vector<std::size_t> iota_positions(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> v(end - begin);
    std::iota(v.begin(), v.end(), begin);
    return v;
}

/// Prompt spans with the last prompt position forced to SPECIAL, followed by
/// spans derived from the generated ids.
std::vector<ModalitySpan> pruning_spans(const TokenSequence& prompt, const std::vector<TokenId>& ids,
                                        std::size_t upto, const TokenVocabulary& vocab) {
    std::vector<ModalitySpan> spans;
    const std::size_t p = prompt.length();
    for (const auto& s : prompt.spans) {
        if (s.end < p) {
            spans.push_back(s);
        } else if (s.start < p - 1) {
            spans.push_back({s.start, p - 1, s.modality});
        }
    }
    spans.push_back({p - 1, p, Modality::kSpecial});
    for (std::size_t i = p; i < upto; ++i) {
        const Modality m = vocab.modality_of(ids[i]);
        if (spans.back().modality == m && spans.back().end == i) {
            spans.back().end = i + 1;
        } else {
            spans.push_back({i, i + 1, m});
        }
    }
    return spans;
}

void check_prompt(const TokenSequence& prompt, const TokenVocabulary& vocab, const ModelConfig& cfg,
                  const GenerateOptions& opts) {
    opts.validate();
    if (prompt.length() == 0) throw ConfigError("generate: prompt must be non-empty");
    validate(prompt, vocab);
    if (vocab.total_size() != cfg.vocab_size) throw ConfigError("generate: vocabulary does not match the model");
}

GenerationResult finish(const TokenSequence& prompt, std::vector<TokenId> ids, const TokenVocabulary& vocab,
                        GenerationResult res, std::chrono::steady_clock::time_point t0) {
    res.tokens.block_size = prompt.block_size;
    res.tokens.spans = prompt.spans;
    const std::size_t p = prompt.length();
    std::vector<TokenId> gen(ids.begin() + static_cast<std::ptrdiff_t>(p), ids.end());
    for (auto s : spans_from_ids(gen, vocab)) res.tokens.spans.push_back({s.start + p, s.end + p, s.modality});
    res.tokens.ids = std::move(ids);
    res.wall_ns = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count());
    return res;
}

}  // namespace

GenerationResult generate(const ModelConfig& cfg, const ModelParams& params, const TokenVocabulary& vocab,
                          const TokenSequence& prompt, const GenerateOptions& opts) {
    check_prompt(prompt, vocab, cfg, opts);
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t p = prompt.length();
    const AttentionMask mask = AttentionMask::blockwise(opts.block_size, p);
    Rng rng(opts.seed);

    GenerationResult res;
    std::vector<TokenId> ids = prompt.ids;
    for (std::size_t b = 0; b < opts.n_blocks; ++b) {
        DenoiseState st;
        st.block = b;
        st.block_start = ids.size();
        ids.insert(ids.end(), opts.block_size, vocab.mask_id());
        st.masked = iota_positions(st.block_start, ids.size());
        const auto block_positions = st.masked;

        // First step: full pass over prompt, committed blocks and the masked block.
        PrefixCache cache;
        ForwardResult full = forward(cfg, params, ids, iota_positions(0, ids.size()), mask, &cache);
        ++res.nfe;
        res.attended += full.attended;
        cache.truncate_before(st.block_start);
        if (!opts.prune.retains_everything()) {
            const Matrix prefix_logits = gather_rows(full.logits, iota_positions(0, st.block_start));
            const auto records =
                score_prefix(cache, prefix_logits, pruning_spans(prompt, ids, st.block_start, vocab), opts.prune);
            cache = prune_prefix(records, cache, opts.prune);
        }
        res.retained_prefix.push_back(cache.size());

        Matrix masked_logits = gather_rows(full.logits, st.masked);
        for (;;) {
            auto accepted = denoise_step(st, masked_logits, ids, vocab, opts, rng);
            res.steps.push_back({b, st.step - 1, std::move(accepted)});
            if (st.masked.empty()) break;
            const std::vector<TokenId> block_ids(ids.begin() + static_cast<std::ptrdiff_t>(st.block_start), ids.end());
            ForwardResult step = forward(cfg, params, block_ids, block_positions, mask, &cache, CacheMode::kReadOnly);
            ++res.nfe;
            res.attended += step.attended;
            std::vector<std::size_t> rows;
            for (std::size_t pos : st.masked) rows.push_back(pos - st.block_start);
            masked_logits = gather_rows(step.logits, rows);
        }
        res.per_block_steps.push_back(st.step);
    }
    return finish(prompt, std::move(ids), vocab, std::move(res), t0);
}

GenerationResult generate_reference(const ModelConfig& cfg, const ModelParams& params, const TokenVocabulary& vocab,
                                    const TokenSequence& prompt, const GenerateOptions& opts) {
    check_prompt(prompt, vocab, cfg, opts);
    const auto t0 = std::chrono::steady_clock::now();
    const AttentionMask mask = AttentionMask::blockwise(opts.block_size, prompt.length());
    Rng rng(opts.seed);

    GenerationResult res;
    std::vector<TokenId> ids = prompt.ids;
    for (std::size_t b = 0; b < opts.n_blocks; ++b) {
        DenoiseState st;
        st.block = b;
        st.block_start = ids.size();
        ids.insert(ids.end(), opts.block_size, vocab.mask_id());
        st.masked = iota_positions(st.block_start, ids.size());
        res.retained_prefix.push_back(st.block_start);
        while (!st.masked.empty()) {
            ForwardResult full = forward(cfg, params, ids, iota_positions(0, ids.size()), mask);
            ++res.nfe;
            res.attended += full.attended;
            auto accepted = denoise_step(st, gather_rows(full.logits, st.masked), ids, vocab, opts, rng);
            res.steps.push_back({b, st.step - 1, std::move(accepted)});
        }
        res.per_block_steps.push_back(st.step);
    }
    return finish(prompt, std::move(ids), vocab, std::move(res), t0);
}

}  // namespace dlm
