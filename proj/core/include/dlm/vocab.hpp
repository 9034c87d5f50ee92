// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dlm/common.hpp"

namespace dlm {

enum class Modality { kText, kImage, kSpecial };

std::string_view to_string(Modality m);
Modality modality_from_string(std::string_view s);

/// Extended vocabulary: text ids, then visual codebook ids, then special tokens.
/// Special order is MASK, BOS, EOS, IMG_START, IMG_END, then one size token per
/// registered resolution ("imgsize_<pixels>") in registration order.
class TokenVocabulary {
public:
    static TokenVocabulary build(std::size_t text_size, std::size_t visual_size,
                                 const std::vector<int>& resolutions);

    std::size_t text_size() const { return text_size_; }
    std::size_t visual_size() const { return visual_size_; }
    std::size_t total_size() const { return text_size_ + visual_size_ + specials_.size(); }
    const std::vector<int>& resolutions() const { return resolutions_; }
    const std::vector<std::string>& special_names() const { return specials_; }

    TokenId mask_id() const { return special_base(); }
    TokenId bos_id() const { return special_base() + 1; }
    TokenId eos_id() const { return special_base() + 2; }
    TokenId img_start_id() const { return special_base() + 3; }
    TokenId img_end_id() const { return special_base() + 4; }
    TokenId first_visual_id() const { return static_cast<TokenId>(text_size_); }

    /// Id of "imgsize_<pixels>"; throws ConfigError if not registered.
    TokenId size_token(int pixels) const;
    bool is_size_token(TokenId id) const;
    bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < total_size(); }
    Modality modality_of(TokenId id) const;
    /// Human-readable name: "t<i>", "v<i>" or the special token's name.
    std::string name_of(TokenId id) const;
    std::optional<TokenId> find_special(std::string_view name) const;

    bool operator==(const TokenVocabulary&) const = default;

private:
    TokenId special_base() const { return static_cast<TokenId>(text_size_ + visual_size_); }

    std::size_t text_size_ = 0;
    std::size_t visual_size_ = 0;
    std::vector<int> resolutions_;
    std::vector<std::string> specials_;
};

/// Half-open [start, end) run of one modality.
struct ModalitySpan {
    std::size_t start = 0;
    std::size_t end = 0;
    Modality modality = Modality::kText;

    std::size_t length() const { return end - start; }
    bool operator==(const ModalitySpan&) const = default;
};

struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<ModalitySpan> spans;
    std::size_t block_size = 1;

    std::size_t length() const { return ids.size(); }
    /// K = ceil(length / block_size).
    std::size_t num_blocks() const { return block_size == 0 ? 0 : (ids.size() + block_size - 1) / block_size; }
    Modality modality_at(std::size_t pos) const;
};

/// True when spans are sorted, non-overlapping, non-empty and cover [0, length).
bool spans_tile(const std::vector<ModalitySpan>& spans, std::size_t length);

/// Throws ConfigError on broken tiling, ids outside the vocabulary or block_size 0.
void validate(const TokenSequence& seq, const TokenVocabulary& vocab);

/// Spans derived from each id's vocabulary modality, merging equal neighbours.
std::vector<ModalitySpan> spans_from_ids(const std::vector<TokenId>& ids, const TokenVocabulary& vocab);

/// Inserts the height and width size tokens at `start` and re-tiles the spans.
/// Rejects insertion points strictly inside an IMAGE span.
TokenSequence annotate_image_block(const TokenSequence& seq, std::size_t start, TokenId height_tok,
                                   TokenId width_tok, const TokenVocabulary& vocab);

/// One corpus line: {"ids":[...],"spans":[[start,end,"TEXT"],...],"prompt_len":n}.
struct CorpusRecord {
    std::vector<TokenId> ids;
    std::vector<ModalitySpan> spans;
    std::size_t prompt_len = 0;
};

std::vector<CorpusRecord> read_corpus(std::istream& in);
void write_corpus_record(std::ostream& out, const CorpusRecord& rec);
CorpusRecord parse_corpus_line(std::string_view line);

}  // namespace dlm
