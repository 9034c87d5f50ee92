// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "dlm/bench.hpp"

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config = true) {
    if (needs_config) {
        cmd->add_option("--config", c.config, "run configuration (JSON)")->check(CLI::ExistingFile);
        cmd->add_option("--seed", c.seed, "seed (overrides the config)");
    }
    cmd->add_option("--out", c.out, "report file (JSON lines, appended)")->required();
}

dlm::RunConfig load(const Common& c) {
    return c.config.empty() ? dlm::parse_run_config(nlohmann::json::object()) : dlm::load_run_config(c.config);
}

std::uint64_t seed_of(const Common& c, const dlm::RunConfig& cfg) { return c.seed.value_or(cfg.seed); }

void print_summary(const nlohmann::json& rec, std::initializer_list<const char*> keys) {
    std::cout << rec.at("command").get<std::string>();
    for (const char* k : keys) {
        if (rec.contains(k)) std::cout << ' ' << k << '=' << rec.at(k).dump();
    }
    std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dlm: block diffusion decoding, SPRINT acceleration and training-objective tools"};
    app.require_subcommand(1);

    Common gen_c, cmp_c, grad_c, pack_c, moe_c, flow_c, replay_c;
    std::size_t jobs = 1;
    std::string report_a, report_b, corpus, shard, sidecar, weights, replay_in;

    auto* gen = app.add_subcommand("generate", "decode under baseline and/or SPRINT settings");
    add_common(gen, gen_c);
    gen->add_option("--jobs", jobs, "threads over independent runs")->check(CLI::PositiveNumber);

    auto* cmp = app.add_subcommand("compare", "agreement and cost ratios between two generate reports");
    add_common(cmp, cmp_c, false);
    cmp->add_option("report_a", report_a)->required()->check(CLI::ExistingFile);
    cmp->add_option("report_b", report_b)->required()->check(CLI::ExistingFile);

    auto* grad = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients of every loss");
    add_common(grad, grad_c);

    auto* pk = app.add_subcommand("pack", "first-fit-decreasing packing of a corpus");
    add_common(pk, pack_c);
    pk->add_option("--corpus", corpus, "corpus (JSON lines)")->required()->check(CLI::ExistingFile);
    pk->add_option("--shard", shard, "packed rows (default: <out>.shard.jsonl)");
    pk->add_option("--sidecar", sidecar, "segment descriptors (default: <out>.segments.jsonl)");

    auto* moe = app.add_subcommand("moesim", "router load trajectory under skewed gates");
    add_common(moe, moe_c);

    auto* fl = app.add_subcommand("flow", "teacher training, distillation and energy-distance report");
    add_common(fl, flow_c);
    fl->add_option("--weights", weights, "write the distilled sampler's parameters");

    auto* rp = app.add_subcommand("replay", "re-run reports from their embedded config and seed");
    add_common(rp, replay_c, false);
    rp->add_option("report", replay_in)->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) {
            const auto cfg = load(gen_c);
            const auto recs = dlm::cmd_generate(cfg, seed_of(gen_c, cfg), jobs);
            dlm::append_reports(gen_c.out, recs);
            for (const auto& r : recs) print_summary(r, {"variant", "run", "nfe", "attended"});
        } else if (*cmp) {
            const auto rec = dlm::cmd_compare(dlm::read_reports(report_a), dlm::read_reports(report_b));
            dlm::append_reports(cmp_c.out, {rec});
            print_summary(rec, {"token_agreement", "nfe_ratio", "attended_ratio", "wall_ratio"});
        } else if (*grad) {
            const auto cfg = load(grad_c);
            const auto rec = dlm::cmd_gradcheck(cfg, seed_of(grad_c, cfg));
            dlm::append_reports(grad_c.out, {rec});
            for (const auto& row : rec.at("results")) {
                std::cout << (row.at("pass").get<bool>() ? "PASS " : "FAIL ") << row.at("loss").get<std::string>()
                          << " max_rel_error=" << row.at("max_rel_error").get<double>()
                          << " checked=" << row.at("checked") << '\n';
            }
            return rec.at("pass").get<bool>() ? 0 : 1;
        } else if (*pk) {
            const auto cfg = load(pack_c);
            if (shard.empty()) shard = pack_c.out + ".shard.jsonl";
            if (sidecar.empty()) sidecar = pack_c.out + ".segments.jsonl";
            const auto rec = dlm::cmd_pack(cfg, seed_of(pack_c, cfg), corpus, shard, sidecar);
            dlm::append_reports(pack_c.out, {rec});
            print_summary(rec, {"samples", "rows", "padding", "naive_padding", "utilization"});
        } else if (*moe) {
            const auto cfg = load(moe_c);
            const auto rec = dlm::cmd_moesim(cfg, seed_of(moe_c, cfg));
            dlm::append_reports(moe_c.out, {rec});
            print_summary(rec, {"initial_gap", "final_gap", "final_load"});
        } else if (*fl) {
            const auto cfg = load(flow_c);
            const auto rec = dlm::cmd_flow(cfg, seed_of(flow_c, cfg), weights);
            dlm::append_reports(flow_c.out, {rec});
            for (const auto& c : rec.at("codes")) {
                std::cout << "flow code=" << c.at("code") << " ratio=" << c.at("ratio")
                          << " student=" << c.at("student_distance") << " self=" << c.at("teacher_self_distance")
                          << '\n';
            }
        } else if (*rp) {
            const auto outcome = dlm::replay_reports(dlm::read_reports(replay_in));
            nlohmann::json rec = {{"schema_version", dlm::kReportSchemaVersion},
                                  {"command", "replay"},
                                  {"source", replay_in},
                                  {"checked", outcome.checked},
                                  {"skipped", outcome.skipped},
                                  {"mismatches", outcome.mismatches}};
            dlm::append_reports(replay_c.out, {rec});
            print_summary(rec, {"checked", "skipped", "mismatches"});
            return outcome.ok() ? 0 : 1;
        }
    } catch (const dlm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
