// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/report.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>

#include "dlm/container.hpp"

namespace dlm {

namespace {

using nlohmann::json;

/// Strict view over one JSON object: every key read is recorded and
/// finish() rejects the rest.
class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError(where_ + "." + key + ": wrong type");
        }
    }

    void read_count(const char* key, std::size_t& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        if (!it->is_number_integer() || it->get<std::int64_t>() < 0) {
            throw ConfigError(where_ + "." + key + ": expected a non-negative integer");
        }
        out = it->get<std::size_t>();
    }

    const json* child(const char* key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
        }
    }

    const std::string& where() const { return where_; }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

UnmaskMode mode_from_string(const std::string& s) {
    if (s == "adaptive") return UnmaskMode::kAdaptive;
    if (s == "fixed") return UnmaskMode::kFixed;
    throw ConfigError("generate.mode: expected 'adaptive' or 'fixed', got '" + s + "'");
}

std::string to_string(UnmaskMode m) { return m == UnmaskMode::kAdaptive ? "adaptive" : "fixed"; }

Variant variant_from_string(const std::string& s) {
    if (s == "baseline") return Variant::kBaseline;
    if (s == "sprint") return Variant::kSprint;
    if (s == "both") return Variant::kBoth;
    throw ConfigError("generate.variant: expected 'baseline', 'sprint' or 'both', got '" + s + "'");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::kBaseline: return "baseline";
        case Variant::kSprint: return "sprint";
        case Variant::kBoth: return "both";
    }
    return "sprint";
}

ModelSource source_from_string(const std::string& s) {
    if (s == "random") return ModelSource::kRandom;
    if (s == "confident") return ModelSource::kConfident;
    if (s == "file") return ModelSource::kFile;
    throw ConfigError("model.source: expected 'random', 'confident' or 'file', got '" + s + "'");
}

std::string to_string(ModelSource s) {
    switch (s) {
        case ModelSource::kRandom: return "random";
        case ModelSource::kConfident: return "confident";
        case ModelSource::kFile: return "file";
    }
    return "random";
}

void parse_model(const json& j, ModelSpec& m) {
    Section s(j, "model");
    std::string source = to_string(m.source);
    s.read("source", source);
    m.source = source_from_string(source);
    std::string path = m.path.string();
    s.read("path", path);
    m.path = path;
    s.read_count("d_model", m.config.d_model);
    s.read_count("n_heads", m.config.n_heads);
    s.read_count("n_layers", m.config.n_layers);
    s.read_count("d_ff", m.config.d_ff);
    s.read_count("block_size", m.config.block_size);
    s.read("rope_base", m.config.rope_base);
    s.read("init_seed", m.init_seed);
    s.read("init_scale", m.init_scale);
    s.read("margin", m.margin);
    if (const json* moe = s.child("moe"); moe != nullptr && !moe->is_null()) {
        Section ms(*moe, "model.moe");
        MoEConfig mc;
        ms.read_count("n_experts", mc.n_experts);
        ms.read_count("top_k", mc.top_k);
        ms.read("gate_scale", mc.gate_scale);
        ms.read("update_rate", mc.update_rate);
        ms.read("load_decay", mc.load_decay);
        ms.finish();
        mc.validate();
        m.config.moe = mc;
    }
    s.finish();
    if (m.source == ModelSource::kFile && m.path.empty()) throw ConfigError("model: source 'file' needs a path");
}

void parse_prune(const json& j, PruneConfig& p) {
    if (j.is_string()) {
        const auto name = j.get<std::string>();
        if (name == "full") {
            p = PruneConfig::full_retention();
        } else if (name == "selective") {
            p = PruneConfig::selective_image();
        } else {
            throw ConfigError("generate.prune: unknown preset '" + name + "'");
        }
        return;
    }
    Section s(j, "generate.prune");
    s.read("alpha", p.alpha);
    s.read("r_text", p.r_text);
    s.read("r_img", p.r_img);
    s.read("r_global", p.r_global);
    s.finish();
    p.validate();
}

}  // namespace

RunConfig parse_run_config(const json& j) {
    RunConfig cfg;
    Section top(j, "config");
    top.read("seed", cfg.seed);
    if (const json* v = top.child("vocab")) {
        Section s(*v, "vocab");
        s.read_count("text", cfg.vocab.text);
        s.read_count("visual", cfg.vocab.visual);
        s.read("resolutions", cfg.vocab.resolutions);
        s.finish();
    }
    if (const json* m = top.child("model")) parse_model(*m, cfg.model);
    if (const json* g = top.child("generate")) {
        auto& gen = cfg.generate;
        Section s(*g, "generate");
        s.read_count("n_blocks", gen.n_blocks);
        s.read_count("block_size", gen.block_size);
        s.read_count("steps", gen.steps);
        s.read("tau", gen.tau);
        std::string mode = to_string(gen.mode);
        s.read("mode", mode);
        gen.mode = mode_from_string(mode);
        if (const json* p = s.child("prune")) parse_prune(*p, gen.prune);
        std::string variant = to_string(gen.variant);
        s.read("variant", variant);
        gen.variant = variant_from_string(variant);
        s.read_count("runs", gen.runs);
        s.read_count("prompt_len", gen.prompt_len);
        s.read("prompt", gen.prompt);
        s.read("sample_tokens", gen.sample_tokens);
        s.finish();
    }
    if (const json* t = top.child("train")) {
        Section s(*t, "train");
        s.read_count("batch", cfg.train.batch);
        s.read_count("steps", cfg.train.steps);
        s.read("lr", cfg.train.lr);
        s.finish();
    }
    if (const json* p = top.child("pack")) {
        Section s(*p, "pack");
        s.read_count("capacity", cfg.pack.capacity);
        s.read_count("block_size", cfg.pack.block_size);
        s.finish();
    }
    if (const json* f = top.child("flow")) {
        auto& fl = cfg.flow;
        Section s(*f, "flow");
        s.read_count("dim", fl.dim);
        s.read_count("hidden", fl.hidden);
        s.read_count("cond_dim", fl.cond_dim);
        s.read_count("teacher_steps", fl.teacher_steps);
        s.read_count("student_steps", fl.student_steps);
        s.read_count("distill_steps", fl.distill_steps);
        s.read_count("samples", fl.samples);
        s.read_count("resamplings", fl.resamplings);
        s.read("stddev", fl.stddev);
        s.read("jvp_eps", fl.jvp_eps);
        s.finish();
    }
    if (const json* m = top.child("moesim")) {
        auto& ms = cfg.moesim;
        Section s(*m, "moesim");
        s.read("gate_logits", ms.gate_logits);
        s.read_count("top_k", ms.top_k);
        s.read("gate_scale", ms.gate_scale);
        s.read("update_rate", ms.update_rate);
        s.read("load_decay", ms.load_decay);
        s.read_count("updates", ms.updates);
        s.read_count("tokens_per_step", ms.tokens_per_step);
        s.read("logit_noise", ms.logit_noise);
        s.finish();
    }
    if (const json* g = top.child("gradcheck")) {
        Section s(*g, "gradcheck");
        s.read("eps", cfg.gradcheck.eps);
        s.read("tolerance", cfg.gradcheck.tolerance);
        s.read_count("probes", cfg.gradcheck.probes);
        s.finish();
    }
    top.finish();

    const auto& gen = cfg.generate;
    if (gen.n_blocks < 1 || gen.block_size < 1 || gen.steps < 1 || gen.runs < 1) {
        throw ConfigError("generate: n_blocks, block_size, steps and runs must be >= 1");
    }
    if (gen.prompt.empty() && gen.prompt_len < 1) throw ConfigError("generate: prompt_len must be >= 1");
    if (cfg.pack.capacity < 1 || cfg.pack.block_size < 1) throw ConfigError("pack: capacity and block_size must be >= 1");
    if (cfg.flow.teacher_steps < 1 || cfg.flow.student_steps < 1 || cfg.flow.samples < 2 || cfg.flow.resamplings < 1) {
        throw ConfigError("flow: step counts, samples and resamplings must be positive");
    }
    if (!(cfg.flow.stddev > 0.0) || !(cfg.flow.jvp_eps > 0.0)) throw ConfigError("flow: stddev and jvp_eps must be > 0");
    if (cfg.moesim.gate_logits.empty()) throw ConfigError("moesim: gate_logits must be non-empty");
    if (!(cfg.gradcheck.eps > 0.0)) throw ConfigError("gradcheck: eps must be > 0");
    cfg.vocab.build();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

json to_json(const RunConfig& cfg) {
    const auto& m = cfg.model;
    json model = {{"source", to_string(m.source)},
                  {"path", m.path.string()},
                  {"d_model", m.config.d_model},
                  {"n_heads", m.config.n_heads},
                  {"n_layers", m.config.n_layers},
                  {"d_ff", m.config.d_ff},
                  {"block_size", m.config.block_size},
                  {"rope_base", m.config.rope_base},
                  {"init_seed", m.init_seed},
                  {"init_scale", m.init_scale},
                  {"margin", m.margin},
                  {"moe", nullptr}};
    if (m.config.moe) {
        const auto& mc = *m.config.moe;
        model["moe"] = {{"n_experts", mc.n_experts},
                        {"top_k", mc.top_k},
                        {"gate_scale", mc.gate_scale},
                        {"update_rate", mc.update_rate},
                        {"load_decay", mc.load_decay}};
    }
    const auto& g = cfg.generate;
    const auto& f = cfg.flow;
    const auto& ms = cfg.moesim;
    return {
        {"vocab", {{"text", cfg.vocab.text}, {"visual", cfg.vocab.visual}, {"resolutions", cfg.vocab.resolutions}}},
        {"model", model},
        {"generate",
         {{"n_blocks", g.n_blocks},
          {"block_size", g.block_size},
          {"steps", g.steps},
          {"tau", g.tau},
          {"mode", to_string(g.mode)},
          {"prune", {{"alpha", g.prune.alpha}, {"r_text", g.prune.r_text}, {"r_img", g.prune.r_img}, {"r_global", g.prune.r_global}}},
          {"variant", to_string(g.variant)},
          {"runs", g.runs},
          {"prompt_len", g.prompt_len},
          {"prompt", g.prompt},
          {"sample_tokens", g.sample_tokens}}},
        {"train", {{"batch", cfg.train.batch}, {"steps", cfg.train.steps}, {"lr", cfg.train.lr}}},
        {"pack", {{"capacity", cfg.pack.capacity}, {"block_size", cfg.pack.block_size}}},
        {"flow",
         {{"dim", f.dim},
          {"hidden", f.hidden},
          {"cond_dim", f.cond_dim},
          {"teacher_steps", f.teacher_steps},
          {"student_steps", f.student_steps},
          {"distill_steps", f.distill_steps},
          {"samples", f.samples},
          {"resamplings", f.resamplings},
          {"stddev", f.stddev},
          {"jvp_eps", f.jvp_eps}}},
        {"moesim",
         {{"gate_logits", ms.gate_logits},
          {"top_k", ms.top_k},
          {"gate_scale", ms.gate_scale},
          {"update_rate", ms.update_rate},
          {"load_decay", ms.load_decay},
          {"updates", ms.updates},
          {"tokens_per_step", ms.tokens_per_step},
          {"logit_noise", ms.logit_noise}}},
        {"gradcheck", {{"eps", cfg.gradcheck.eps}, {"tolerance", cfg.gradcheck.tolerance}, {"probes", cfg.gradcheck.probes}}},
    };
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string fingerprint(const RunConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(cfg).dump())));
    return buf;
}

json make_report(const std::string& command, const RunConfig& cfg, std::uint64_t seed) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm utc{};
    gmtime_r(&now, &utc);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &utc);
    return {{"schema_version", kReportSchemaVersion},
            {"command", command},
            {"fingerprint", fingerprint(cfg)},
            {"config", to_json(cfg)},
            {"seed", seed},
            {"timestamp", stamp}};
}

void append_reports(const std::filesystem::path& path, const std::vector<json>& records) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw RuntimeFault("cannot open report file " + path.string());
    for (const auto& r : records) out << r.dump() << '\n';
    if (!out) throw RuntimeFault("failed writing report file " + path.string());
}

std::vector<json> read_reports(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open report " + path.string());
    std::vector<json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.is_object() || j.value("schema_version", -1) != kReportSchemaVersion) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": unsupported report schema");
        }
        out.push_back(std::move(j));
    }
    return out;
}

}  // namespace dlm
