// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

// Command implementations behind the dlm tool, plus the experiment drivers
// they share with tests.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlm/packing.hpp"
#include "dlm/report.hpp"

namespace dlm {

struct LoadedModel {
    ModelConfig cfg;
    ModelParams params;
    TokenVocabulary vocab;
};

/// Small random weights, then the MASK embedding set to a unit vector on
/// dimension 0 and one text token's head row aligned with it so that every
/// masked position predicts that token with logit margin ~`margin`.
ModelParams make_confident_model(const ModelConfig& cfg, const TokenVocabulary& vocab, std::uint64_t seed,
                                 double scale, double margin);

/// Builds or loads the model named by the config; vocab_size follows the vocabulary.
LoadedModel build_model(const RunConfig& cfg);

/// The configured prompt, or prompt_len text tokens drawn from `run_seed`.
TokenSequence make_prompt(const GenerateSection& gen, const TokenVocabulary& vocab, std::uint64_t run_seed);

/// Baseline is FIXED unmasking under full retention; SPRINT uses the configured policy and pruning.
GenerateOptions generate_options(const GenerateSection& gen, bool baseline, std::uint64_t run_seed);

/// Seed of run i.
inline std::uint64_t run_seed(std::uint64_t seed, std::size_t run) { return seed + run; }

/// One generate record for (variant, run).
nlohmann::json run_generation(const RunConfig& cfg, const LoadedModel& model, bool baseline, std::size_t run,
                              std::uint64_t seed);

/// Records for every configured run and variant, in (run, baseline-before-sprint) order.
/// jobs > 1 spreads runs over threads without changing the output.
std::vector<nlohmann::json> cmd_generate(const RunConfig& cfg, std::uint64_t seed, std::size_t jobs = 1);

/// Pairs the generate records of two reports in file order.
nlohmann::json cmd_compare(const std::vector<nlohmann::json>& a, const std::vector<nlohmann::json>& b);

struct ReplayOutcome {
    std::size_t checked = 0;
    std::size_t skipped = 0;
    std::vector<std::string> mismatches;
    bool ok() const { return mismatches.empty(); }
};

/// Re-executes generate and moesim records from their embedded config and seed.
ReplayOutcome replay_reports(const std::vector<nlohmann::json>& records);

struct GradcheckRow {
    std::string loss;
    std::size_t parameters = 0;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    bool pass = false;
};

/// |a - n| / max(|a|, |n|, 1e-5)
double gradient_rel_error(double analytic, double numeric);

std::vector<GradcheckRow> run_gradcheck(const GradcheckSection& gc, std::uint64_t seed);
nlohmann::json cmd_gradcheck(const RunConfig& cfg, std::uint64_t seed);

/// Packs a corpus and writes the packed rows and the segment sidecar.
nlohmann::json cmd_pack(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& corpus,
                        const std::filesystem::path& shard_out, const std::filesystem::path& sidecar_out);

struct MoeSimResult {
    std::vector<double> gaps;                ///< max-load gap after each observation
    std::vector<double> variances;           ///< variance of the load estimate
    std::vector<std::vector<double>> loads;  ///< load estimate after each observation
    std::vector<double> final_bias;
};

/// updates + 1 observations with one bias update between consecutive ones.
MoeSimResult simulate_moe(const MoeSimSection& sim, std::uint64_t seed);
nlohmann::json cmd_moesim(const RunConfig& cfg, std::uint64_t seed);

struct FlowCodeMetrics {
    std::size_t code = 0;
    double teacher_self_distance = 0.0;  ///< mean ED between independent teacher clouds
    double student_distance = 0.0;       ///< mean ED between student and teacher clouds
    double undistilled_distance = 0.0;   ///< teacher at the student's step count
    std::vector<double> teacher_mean, student_mean;
};

struct FlowExperimentResult {
    std::vector<FlowCodeMetrics> codes;
    double final_fm_loss = 0.0;
    double final_distill_loss = 0.0;
    flow::FlowConfig config;
    flow::FlowParams teacher, student;
};

FlowExperimentResult run_flow_experiment(const FlowSection& fs, const TrainSection& train, std::uint64_t seed);
nlohmann::json cmd_flow(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& weights_out = {});

}  // namespace dlm
