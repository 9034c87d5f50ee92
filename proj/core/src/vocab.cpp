// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/vocab.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <set>

#include <nlohmann/json.hpp>

namespace dlm {

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::kText: return "TEXT";
        case Modality::kImage: return "IMAGE";
        case Modality::kSpecial: return "SPECIAL";
    }
    return "TEXT";
}

Modality modality_from_string(std::string_view s) {
    if (s == "TEXT") return Modality::kText;
    if (s == "IMAGE") return Modality::kImage;
    if (s == "SPECIAL") return Modality::kSpecial;
    throw ConfigError("unknown modality '" + std::string(s) + "'");
}

TokenVocabulary TokenVocabulary::build(std::size_t text_size, std::size_t visual_size,
                                       const std::vector<int>& resolutions) {
    if (text_size < 2) throw ConfigError("vocabulary needs at least 2 text tokens");
    std::set<int> seen;
    for (int r : resolutions) {
        if (r <= 0) throw ConfigError("resolution must be positive: " + std::to_string(r));
        if (!seen.insert(r).second) throw ConfigError("duplicate resolution: " + std::to_string(r));
    }
    TokenVocabulary v;
    v.text_size_ = text_size;
    v.visual_size_ = visual_size;
    v.resolutions_ = resolutions;
    v.specials_ = {"MASK", "BOS", "EOS", "IMG_START", "IMG_END"};
    for (int r : resolutions) v.specials_.push_back("imgsize_" + std::to_string(r));
    return v;
}

TokenId TokenVocabulary::size_token(int pixels) const {
    auto it = std::find(resolutions_.begin(), resolutions_.end(), pixels);
    if (it == resolutions_.end()) throw ConfigError("no size token for resolution " + std::to_string(pixels));
    return special_base() + 5 + static_cast<TokenId>(it - resolutions_.begin());
}

bool TokenVocabulary::is_size_token(TokenId id) const {
    const TokenId first = special_base() + 5;
    return id >= first && id < first + static_cast<TokenId>(resolutions_.size());
}

Modality TokenVocabulary::modality_of(TokenId id) const {
    if (!contains(id)) throw ConfigError("token id out of range: " + std::to_string(id));
    if (static_cast<std::size_t>(id) < text_size_) return Modality::kText;
    if (id < special_base()) return Modality::kImage;
    return Modality::kSpecial;
}

std::string TokenVocabulary::name_of(TokenId id) const {
    switch (modality_of(id)) {
        case Modality::kText: return "t" + std::to_string(id);
        case Modality::kImage: return "v" + std::to_string(id - first_visual_id());
        case Modality::kSpecial: return specials_[static_cast<std::size_t>(id - special_base())];
    }
    return {};
}

std::optional<TokenId> TokenVocabulary::find_special(std::string_view name) const {
    for (std::size_t i = 0; i < specials_.size(); ++i) {
        if (specials_[i] == name) return special_base() + static_cast<TokenId>(i);
    }
    return std::nullopt;
}

Modality TokenSequence::modality_at(std::size_t pos) const {
    for (const auto& s : spans) {
        if (pos >= s.start && pos < s.end) return s.modality;
    }
    throw ConfigError("position " + std::to_string(pos) + " not covered by any span");
}

bool spans_tile(const std::vector<ModalitySpan>& spans, std::size_t length) {
    std::size_t cursor = 0;
    for (const auto& s : spans) {
        if (s.start != cursor || s.end <= s.start) return false;
        cursor = s.end;
    }
    return cursor == length;
}

void validate(const TokenSequence& seq, const TokenVocabulary& vocab) {
    if (seq.block_size == 0) throw ConfigError("block_size must be >= 1");
    if (!spans_tile(seq.spans, seq.length())) throw ConfigError("spans do not tile the sequence");
    for (TokenId id : seq.ids) {
        if (!vocab.contains(id)) throw ConfigError("token id out of range: " + std::to_string(id));
    }
}

std::vector<ModalitySpan> spans_from_ids(const std::vector<TokenId>& ids, const TokenVocabulary& vocab) {
    std::vector<ModalitySpan> spans;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const Modality m = vocab.modality_of(ids[i]);
        if (!spans.empty() && spans.back().modality == m) {
            spans.back().end = i + 1;
        } else {
            spans.push_back({i, i + 1, m});
        }
    }
    return spans;
}

TokenSequence annotate_image_block(const TokenSequence& seq, std::size_t start, TokenId height_tok,
                                   TokenId width_tok, const TokenVocabulary& vocab) {
    if (start > seq.length()) throw ConfigError("insertion point beyond sequence end");
    if (!vocab.is_size_token(height_tok) || !vocab.is_size_token(width_tok)) {
        throw ConfigError("height/width tokens must be registered size tokens");
    }
    TokenSequence out;
    out.block_size = seq.block_size;
    out.ids.reserve(seq.ids.size() + 2);
    out.ids.insert(out.ids.end(), seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(start));
    out.ids.push_back(height_tok);
    out.ids.push_back(width_tok);
    out.ids.insert(out.ids.end(), seq.ids.begin() + static_cast<std::ptrdiff_t>(start), seq.ids.end());

    const ModalitySpan inserted{start, start + 2, Modality::kSpecial};
    bool placed = false;
    for (const auto& s : seq.spans) {
        if (start > s.start && start < s.end) {
            if (s.modality == Modality::kImage) throw ConfigError("insertion would split an IMAGE span");
            out.spans.push_back({s.start, start, s.modality});
            out.spans.push_back(inserted);
            out.spans.push_back({start + 2, s.end + 2, s.modality});
            placed = true;
            continue;
        }
        if (!placed && s.start >= start) {
            out.spans.push_back(inserted);
            placed = true;
        }
        if (s.start >= start) {
            out.spans.push_back({s.start + 2, s.end + 2, s.modality});
        } else {
            out.spans.push_back(s);
        }
    }
    if (!placed) out.spans.push_back(inserted);
    return out;
}

CorpusRecord parse_corpus_line(std::string_view line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("corpus line is not JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("corpus record must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (key != "ids" && key != "spans" && key != "prompt_len") {
            throw ConfigError("unknown corpus field '" + key + "'");
        }
    }
    CorpusRecord rec;
    try {
        rec.ids = j.at("ids").get<std::vector<TokenId>>();
        if (j.contains("spans")) {
            for (const auto& s : j.at("spans")) {
                if (!s.is_array() || s.size() != 3) throw ConfigError("span must be [start,end,modality]");
                rec.spans.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(),
                                     modality_from_string(s[2].get<std::string>())});
            }
        } else {
            rec.spans.push_back({0, rec.ids.size(), Modality::kText});
        }
        rec.prompt_len = j.value("prompt_len", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed corpus record: ") + e.what());
    }
    if (!spans_tile(rec.spans, rec.ids.size())) throw ConfigError("corpus spans do not tile the record");
    if (rec.prompt_len > rec.ids.size()) throw ConfigError("prompt_len exceeds record length");
    return rec;
}

std::vector<CorpusRecord> read_corpus(std::istream& in) {
    std::vector<CorpusRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(parse_corpus_line(line));
    }
    return out;
}

void write_corpus_record(std::ostream& out, const CorpusRecord& rec) {
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& s : rec.spans) spans.push_back({s.start, s.end, to_string(s.modality)});
    nlohmann::json j{{"ids", rec.ids}, {"spans", spans}};
    if (rec.prompt_len > 0) j["prompt_len"] = rec.prompt_len;
    out << j.dump() << '\n';
}

}  // namespace dlm
