// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration (strict JSON) and append-only JSON-lines run reports.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlm/decoder.hpp"
#include "dlm/flow.hpp"
#include "dlm/model.hpp"
#include "dlm/vocab.hpp"

namespace dlm {

inline constexpr int kReportSchemaVersion = 1;

struct VocabSpec {
    std::size_t text = 12;
    std::size_t visual = 0;
    std::vector<int> resolutions;

    TokenVocabulary build() const { return TokenVocabulary::build(text, visual, resolutions); }
};

enum class ModelSource { kRandom, kConfident, kFile };

struct ModelSpec {
    ModelSource source = ModelSource::kRandom;
    std::filesystem::path path;  ///< kFile only
    ModelConfig config;          ///< vocab_size follows the vocabulary
    std::uint64_t init_seed = 1;
    double init_scale = 0.02;
    double margin = 12.0;  ///< kConfident: logit margin of the favoured token
};

enum class Variant { kBaseline, kSprint, kBoth };

struct GenerateSection {
    std::size_t n_blocks = 4;
    std::size_t block_size = 8;
    std::size_t steps = 8;
    double tau = 0.95;
    UnmaskMode mode = UnmaskMode::kAdaptive;
    PruneConfig prune = PruneConfig::selective_image();
    Variant variant = Variant::kSprint;
    std::size_t runs = 1;
    std::size_t prompt_len = 4;
    std::vector<TokenId> prompt;  ///< overrides prompt_len when non-empty
    bool sample_tokens = false;
};

struct TrainSection {
    std::size_t batch = 128;
    std::size_t steps = 2000;
    double lr = 2e-3;
};

struct PackSection {
    std::size_t capacity = 64;
    std::size_t block_size = 8;
};

struct FlowSection {
    std::size_t dim = 2;
    std::size_t hidden = 64;
    std::size_t cond_dim = 8;
    std::size_t teacher_steps = 50;
    std::size_t student_steps = 8;
    std::size_t distill_steps = 4000;
    std::size_t samples = 2048;
    std::size_t resamplings = 8;
    double stddev = 0.6;
    double jvp_eps = 1e-3;
};

struct MoeSimSection {
    std::vector<double> gate_logits = {2.0, 0.0, 0.0, 0.0};
    std::size_t top_k = 1;
    double gate_scale = 2.5;
    double update_rate = -0.01;
    double load_decay = 0.9;
    std::size_t updates = 500;
    std::size_t tokens_per_step = 64;
    double logit_noise = 0.0;
};

struct GradcheckSection {
    double eps = 1e-6;
    double tolerance = 1e-4;
    std::size_t probes = 0;  ///< coordinates checked per loss; 0 checks every parameter
};

struct RunConfig {
    std::uint64_t seed = 0;
    VocabSpec vocab;
    ModelSpec model;
    GenerateSection generate;
    TrainSection train;
    PackSection pack;
    FlowSection flow;
    MoeSimSection moesim;
    GradcheckSection gradcheck;
};

/// Parses a config document; unknown keys and wrong types throw ConfigError.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
/// Every field, defaults included.
nlohmann::json to_json(const RunConfig& cfg);
/// FNV-1a 64 of the canonical dump of to_json(cfg), as 16 hex digits.
std::string fingerprint(const RunConfig& cfg);
std::uint64_t fnv1a64(std::string_view bytes);

/// Record skeleton: schema_version, command, fingerprint, config, seed, timestamp.
nlohmann::json make_report(const std::string& command, const RunConfig& cfg, std::uint64_t seed);

/// Appends one JSON line per record.
void append_reports(const std::filesystem::path& path, const std::vector<nlohmann::json>& records);
/// Reads every line; throws ConfigError on malformed lines or a schema mismatch.
std::vector<nlohmann::json> read_reports(const std::filesystem::path& path);

}  // namespace dlm
