// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include "dlm/container.hpp"
#include "dlm/objectives.hpp"

namespace dlm {

using nlohmann::json;

ModelParams make_confident_model(const ModelConfig& cfg, const TokenVocabulary& vocab, std::uint64_t seed,
                                 double scale, double margin) {
    if (vocab.total_size() != cfg.vocab_size) throw ConfigError("confident model: vocabulary does not match");
    ModelParams p = ModelParams::random(cfg, seed, scale);
    const auto mask = static_cast<std::size_t>(vocab.mask_id());
    for (std::size_t c = 0; c < cfg.d_model; ++c) p.embed(mask, c) = c == 0 ? 1.0 : 0.0;
    Rng rng(seed ^ 0x5eedULL);
    const std::size_t favoured = rng.below(vocab.text_size());
    // The final norm maps the mask direction to about sqrt(d) on dimension 0.
    p.head(favoured, 0) = margin / std::sqrt(static_cast<double>(cfg.d_model));
    return p;
}

LoadedModel build_model(const RunConfig& cfg) {
    LoadedModel m{cfg.model.config, {}, cfg.vocab.build()};
    if (cfg.model.source == ModelSource::kFile) {
        auto [mc, params] = load_model(cfg.model.path);
        if (mc.vocab_size != m.vocab.total_size()) {
            throw ConfigError("model file vocabulary (" + std::to_string(mc.vocab_size) +
                              ") does not match the configured vocabulary (" +
                              std::to_string(m.vocab.total_size()) + ")");
        }
        m.cfg = mc;
        m.params = std::move(params);
        return m;
    }
    m.cfg.vocab_size = m.vocab.total_size();
    m.cfg.validate();
    if (cfg.model.source == ModelSource::kConfident) {
        m.params = make_confident_model(m.cfg, m.vocab, cfg.model.init_seed, cfg.model.init_scale, cfg.model.margin);
    } else {
        m.params = ModelParams::random(m.cfg, cfg.model.init_seed, cfg.model.init_scale);
    }
    return m;
}

TokenSequence make_prompt(const GenerateSection& gen, const TokenVocabulary& vocab, std::uint64_t seed) {
    TokenSequence seq;
    seq.block_size = gen.block_size;
    if (!gen.prompt.empty()) {
        seq.ids = gen.prompt;
    } else {
        Rng rng(seed);
        for (std::size_t i = 0; i < gen.prompt_len; ++i) {
            seq.ids.push_back(static_cast<TokenId>(rng.below(vocab.text_size())));
        }
    }
    seq.spans = spans_from_ids(seq.ids, vocab);
    validate(seq, vocab);
    return seq;
}

GenerateOptions generate_options(const GenerateSection& gen, bool baseline, std::uint64_t seed) {
    GenerateOptions o;
    o.n_blocks = gen.n_blocks;
    o.block_size = gen.block_size;
    o.policy = UnmaskPolicy{gen.tau, gen.steps, baseline ? UnmaskMode::kFixed : gen.mode};
    o.prune = baseline ? PruneConfig::full_retention() : gen.prune;
    o.sample_tokens = gen.sample_tokens;
    o.seed = seed;
    o.validate();
    return o;
}

json run_generation(const RunConfig& cfg, const LoadedModel& model, bool baseline, std::size_t run,
                    std::uint64_t seed) {
    const std::uint64_t rs = run_seed(seed, run);
    const TokenSequence prompt = make_prompt(cfg.generate, model.vocab, rs);
    const GenerateOptions opts = generate_options(cfg.generate, baseline, rs);
    const GenerationResult res = generate(model.cfg, model.params, model.vocab, prompt, opts);
    json rec = make_report("generate", cfg, seed);
    rec["variant"] = baseline ? "baseline" : "sprint";
    rec["run"] = run;
    rec["run_seed"] = rs;
    rec["prompt_len"] = prompt.length();
    rec["tokens"] = res.tokens.ids;
    rec["nfe"] = res.nfe;
    rec["attended"] = res.attended;
    rec["wall_ns"] = res.wall_ns;
    rec["per_block_steps"] = res.per_block_steps;
    rec["retained_prefix"] = res.retained_prefix;
    return rec;
}

std::vector<json> cmd_generate(const RunConfig& cfg, std::uint64_t seed, std::size_t jobs) {
    const LoadedModel model = build_model(cfg);
    std::vector<bool> variants;
    if (cfg.generate.variant != Variant::kSprint) variants.push_back(true);
    if (cfg.generate.variant != Variant::kBaseline) variants.push_back(false);
    const std::size_t per_run = variants.size();
    std::vector<json> out(cfg.generate.runs * per_run);
    auto work = [&](std::size_t first, std::size_t stride) {
        for (std::size_t run = first; run < cfg.generate.runs; run += stride) {
            for (std::size_t v = 0; v < per_run; ++v) out[run * per_run + v] = run_generation(cfg, model, variants[v], run, seed);
        }
    };
    jobs = std::clamp<std::size_t>(jobs, 1, cfg.generate.runs);
    if (jobs == 1) {
        work(0, 1);
        return out;
    }
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) {
        pool.emplace_back([&, j] {
            try {
                work(j, jobs);
            } catch (...) {
                errors[j] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

namespace {

std::vector<const json*> generate_records(const std::vector<json>& recs) {
    std::vector<const json*> out;
    for (const auto& r : recs) {
        if (r.value("command", "") == "generate") out.push_back(&r);
    }
    return out;
}

double safe_ratio(double num, double den) { return den == 0.0 ? (num == 0.0 ? 1.0 : INFINITY) : num / den; }

}  // namespace

json cmd_compare(const std::vector<json>& a, const std::vector<json>& b) {
    const auto ra = generate_records(a);
    const auto rb = generate_records(b);
    if (ra.empty() || ra.size() != rb.size()) {
        throw ConfigError("compare: reports hold " + std::to_string(ra.size()) + " and " + std::to_string(rb.size()) +
                          " generate records");
    }
    std::size_t matched = 0, total = 0;
    double nfe_a = 0, nfe_b = 0, att_a = 0, att_b = 0, wall_a = 0, wall_b = 0;
    json divergence = json::array();
    for (std::size_t i = 0; i < ra.size(); ++i) {
        const auto ta = ra[i]->at("tokens").get<std::vector<TokenId>>();
        const auto tb = rb[i]->at("tokens").get<std::vector<TokenId>>();
        const auto pa = ra[i]->at("prompt_len").get<std::size_t>();
        const auto pb = rb[i]->at("prompt_len").get<std::size_t>();
        if (pa != pb || ta.size() != tb.size() || !std::equal(ta.begin(), ta.begin() + static_cast<std::ptrdiff_t>(pa), tb.begin())) {
            throw ConfigError("compare: record " + std::to_string(i) + " pairs different prompts or lengths");
        }
        json first = nullptr;
        for (std::size_t k = pa; k < ta.size(); ++k) {
            if (ta[k] == tb[k]) {
                ++matched;
            } else if (first.is_null()) {
                first = k - pa;
            }
            ++total;
        }
        divergence.push_back(first);
        nfe_a += ra[i]->at("nfe").get<double>();
        nfe_b += rb[i]->at("nfe").get<double>();
        att_a += ra[i]->at("attended").get<double>();
        att_b += rb[i]->at("attended").get<double>();
        wall_a += ra[i]->at("wall_ns").get<double>();
        wall_b += rb[i]->at("wall_ns").get<double>();
    }
    const double agreement = total == 0 ? 1.0 : static_cast<double>(matched) / static_cast<double>(total);
    return {{"schema_version", kReportSchemaVersion},
            {"command", "compare"},
            {"fingerprint_a", ra.front()->at("fingerprint")},
            {"fingerprint_b", rb.front()->at("fingerprint")},
            {"pairs", ra.size()},
            {"token_agreement", agreement},
            {"first_divergence", divergence},
            {"nfe_ratio", safe_ratio(nfe_b, nfe_a)},
            {"attended_ratio", safe_ratio(att_b, att_a)},
            {"wall_ratio", safe_ratio(wall_b, wall_a)}};
}

ReplayOutcome replay_reports(const std::vector<json>& records) {
    ReplayOutcome out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const json& r = records[i];
        const std::string command = r.value("command", "");
        if (command != "generate" && command != "moesim") {
            ++out.skipped;
            continue;
        }
        const RunConfig cfg = parse_run_config(r.at("config"));
        const std::string where = "record " + std::to_string(i) + ": ";
        if (fingerprint(cfg) != r.at("fingerprint").get<std::string>()) {
            out.mismatches.push_back(where + "fingerprint does not match the embedded config");
            continue;
        }
        const auto seed = r.at("seed").get<std::uint64_t>();
        ++out.checked;
        if (command == "generate") {
            const LoadedModel model = build_model(cfg);
            const bool baseline = r.at("variant").get<std::string>() == "baseline";
            const json again = run_generation(cfg, model, baseline, r.at("run").get<std::size_t>(), seed);
            for (const char* key : {"tokens", "nfe", "attended"}) {
                if (again.at(key) != r.at(key)) out.mismatches.push_back(where + key + " differ");
            }
        } else {
            const json again = cmd_moesim(cfg, seed);
            for (const char* key : {"gap_trajectory", "final_gap", "final_load", "final_bias"}) {
                if (again.at(key) != r.at(key)) out.mismatches.push_back(where + key + " differ");
            }
        }
    }
    return out;
}

double gradient_rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
    return std::abs(analytic - numeric) / denom;
}

namespace {

/// Visits `probes` random coordinates (all when probes == 0) and compares
/// central differences of `loss` against `grad`.
template <class Params>
GradcheckRow check_coordinates(const std::string& name, Params& params, const Params& grad,
                               const std::function<double()>& loss, const GradcheckSection& gc, Rng& rng) {
    GradcheckRow row{name, 0, 0, 0.0, false};
    std::vector<std::pair<Matrix*, const Matrix*>> tensors;
    std::vector<const Matrix*> grads;
    grad.for_each([&](const std::string&, const Matrix& g) { grads.push_back(&g); });
    std::size_t idx = 0;
    params.for_each([&](const std::string&, Matrix& m) {
        tensors.emplace_back(&m, grads.at(idx++));
        row.parameters += m.size();
    });
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    if (gc.probes == 0) {
        for (std::size_t t = 0; t < tensors.size(); ++t) {
            for (std::size_t i = 0; i < tensors[t].first->size(); ++i) coords.emplace_back(t, i);
        }
    } else {
        for (std::size_t k = 0; k < gc.probes; ++k) {
            std::size_t flat = rng.below(row.parameters);
            std::size_t t = 0;
            while (flat >= tensors[t].first->size()) flat -= tensors[t++].first->size();
            coords.emplace_back(t, flat);
        }
    }
    for (const auto& [t, i] : coords) {
        double& w = tensors[t].first->data[i];
        const double orig = w;
        w = orig + gc.eps;
        const double up = loss();
        w = orig - gc.eps;
        const double down = loss();
        w = orig;
        const double numeric = (up - down) / (2.0 * gc.eps);
        row.max_rel_error = std::max(row.max_rel_error, gradient_rel_error(tensors[t].second->data[i], numeric));
        ++row.checked;
    }
    row.pass = row.max_rel_error < gc.tolerance;
    return row;
}

std::vector<MaskedBatch> gradcheck_batches(const TokenVocabulary& vocab, std::size_t prompt_len, Rng& rng) {
    std::vector<MaskedBatch> out;
    for (std::size_t s = 0; s < 2; ++s) {
        TokenSequence x0;
        x0.block_size = 2;
        for (std::size_t i = 0; i < prompt_len + 4; ++i) x0.ids.push_back(static_cast<TokenId>(rng.below(vocab.text_size())));
        x0.spans = spans_from_ids(x0.ids, vocab);
        out.push_back(corrupt(x0, prompt_len, 0.3 + 0.5 * rng.uniform(), vocab.mask_id(), rng));
    }
    return out;
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck(const GradcheckSection& gc, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<GradcheckRow> rows;
    const TokenVocabulary vocab = TokenVocabulary::build(3, 0, {});
    ModelConfig mc{8, 2, 1, 12, vocab.total_size(), 2, 10000.0, std::nullopt};

    auto model_row = [&](const std::string& name, const ModelConfig& cfg, bool sft) {
        ModelParams p = ModelParams::random(cfg, rng.next(), 0.5);
        const auto batch = gradcheck_batches(vocab, sft ? 2 : 1, rng);
        auto eval = [&] { return sft ? sft_loss(cfg, p, batch) : bdlm_loss(cfg, p, batch); };
        const LossResult base = eval();
        rows.push_back(check_coordinates<ModelParams>(name, p, base.grads, [&] { return eval().loss; }, gc, rng));
    };
    model_row("bdlm_loss", mc, false);
    model_row("sft_loss", mc, true);
    ModelConfig moe = mc;
    moe.moe = MoEConfig{3, 2, 2.5, -0.01, 0.9};
    moe.d_ff = 6;
    model_row("bdlm_loss_moe", moe, false);

    const flow::FlowConfig fc{2, 12, 2, 3};
    std::vector<flow::FlowPath> paths;
    for (std::size_t i = 0; i < 4; ++i) {
        paths.push_back(flow::make_path({rng.normal(), rng.normal()}, {rng.normal(), rng.normal()},
                                        0.1 + 0.8 * rng.uniform(), i % 2));
    }
    const std::vector<flow::Condition> conds = {{0}, {1, 0}};
    {
        auto p = flow::FlowParams::random(fc, rng.next(), 0.5);
        const auto base = flow::fm_loss(fc, p, paths, conds);
        rows.push_back(check_coordinates<flow::FlowParams>(
            "fm_loss", p, base.grads, [&] { return flow::fm_loss(fc, p, paths, conds).loss; }, gc, rng));
    }
    {
        auto p = flow::FlowParams::random(fc, rng.next(), 0.5);
        const flow::FlowParams frozen = p;
        const auto base = flow::distill_loss(fc, p, frozen, paths, conds);
        rows.push_back(check_coordinates<flow::FlowParams>(
            "distill_loss", p, base.grads, [&] { return flow::distill_loss(fc, p, frozen, paths, conds).loss; }, gc,
            rng));
    }
    return rows;
}

json cmd_gradcheck(const RunConfig& cfg, std::uint64_t seed) {
    json rec = make_report("gradcheck", cfg, seed);
    json table = json::array();
    bool all = true;
    for (const auto& r : run_gradcheck(cfg.gradcheck, seed)) {
        table.push_back({{"loss", r.loss},
                         {"parameters", r.parameters},
                         {"checked", r.checked},
                         {"max_rel_error", r.max_rel_error},
                         {"pass", r.pass}});
        all = all && r.pass;
    }
    rec["results"] = table;
    rec["pass"] = all;
    return rec;
}

json cmd_pack(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& corpus,
              const std::filesystem::path& shard_out, const std::filesystem::path& sidecar_out) {
    std::ifstream in(corpus);
    if (!in) throw ConfigError("cannot open corpus " + corpus.string());
    const auto records = read_corpus(in);
    const TokenVocabulary vocab = cfg.vocab.build();
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (TokenId id : records[i].ids) {
            if (!vocab.contains(id)) throw ConfigError("corpus record " + std::to_string(i) + " has an id outside the vocabulary");
        }
    }
    const PackedShard shard = pack_corpus(records, cfg.pack.capacity, cfg.pack.block_size, vocab.eos_id());
    {
        std::ofstream out(shard_out);
        if (!out) throw RuntimeFault("cannot write " + shard_out.string());
        for (const auto& row : shard.rows) write_corpus_record(out, row);
    }
    {
        std::ofstream out(sidecar_out);
        if (!out) throw RuntimeFault("cannot write " + sidecar_out.string());
        write_sidecar(out, shard.layout);
    }
    std::vector<PackSample> samples;
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        samples.push_back({i, records[i].ids.size()});
        tokens += records[i].ids.size();
    }
    json rec = make_report("pack", cfg, seed);
    const std::size_t slots = shard.rows.size() * cfg.pack.capacity;
    rec["samples"] = records.size();
    rec["rows"] = shard.rows.size();
    rec["tokens"] = tokens;
    rec["padding"] = total_padding(shard.layout);
    rec["naive_padding"] = naive_padding(samples, cfg.pack.capacity);
    rec["utilization"] = slots == 0 ? 0.0 : static_cast<double>(tokens) / static_cast<double>(slots);
    rec["shard"] = shard_out.string();
    rec["sidecar"] = sidecar_out.string();
    return rec;
}

MoeSimResult simulate_moe(const MoeSimSection& sim, std::uint64_t seed) {
    const MoEConfig mc{sim.gate_logits.size(), sim.top_k, sim.gate_scale, sim.update_rate, sim.load_decay};
    mc.validate();
    if (sim.tokens_per_step < 1) throw ConfigError("moesim: tokens_per_step must be >= 1");
    Rng rng(seed);
    RouterState state = RouterState::uniform(mc.n_experts);
    MoeSimResult res;
    std::vector<Routing> routings(sim.tokens_per_step);
    std::vector<double> logits(mc.n_experts);
    for (std::size_t step = 0; step <= sim.updates; ++step) {
        for (auto& r : routings) {
            for (std::size_t e = 0; e < mc.n_experts; ++e) {
                logits[e] = sim.gate_logits[e] + (sim.logit_noise > 0.0 ? sim.logit_noise * rng.normal() : 0.0);
            }
            r = route(logits, state, mc);
        }
        observe_load(state, selection_frequencies(routings, mc.n_experts), mc.load_decay);
        res.gaps.push_back(state.max_load_gap());
        double var = 0.0;
        for (double f : state.load) var += (f - state.target()) * (f - state.target());
        res.variances.push_back(var / static_cast<double>(mc.n_experts));
        res.loads.push_back(state.load);
        if (step < sim.updates) update_bias(state, std::vector<double>(state.load), mc.update_rate);
    }
    res.final_bias = state.bias;
    return res;
}

json cmd_moesim(const RunConfig& cfg, std::uint64_t seed) {
    const MoeSimResult res = simulate_moe(cfg.moesim, seed);
    json rec = make_report("moesim", cfg, seed);
    rec["gap_trajectory"] = res.gaps;
    rec["variance_trajectory"] = res.variances;
    rec["initial_gap"] = res.gaps.front();
    rec["final_gap"] = res.gaps.back();
    rec["final_load"] = res.loads.back();
    rec["final_bias"] = res.final_bias;
    return rec;
}

namespace {

flow::GaussianTask make_task(const FlowSection& fs) {
    flow::GaussianTask task;
    std::vector<double> m(fs.dim, 0.0);
    m[0] = 2.0;
    if (fs.dim > 1) m[1] = 1.0;
    task.means.push_back(m);
    for (double& v : m) v = -v;
    task.means.push_back(m);
    task.stddev = fs.stddev;
    return task;
}

std::vector<double> column_means(const Matrix& x) {
    std::vector<double> mu(x.cols, 0.0);
    for (std::size_t r = 0; r < x.rows; ++r) {
        for (std::size_t c = 0; c < x.cols; ++c) mu[c] += x(r, c) / static_cast<double>(x.rows);
    }
    return mu;
}

}  // namespace

FlowExperimentResult run_flow_experiment(const FlowSection& fs, const TrainSection& train, std::uint64_t seed) {
    FlowExperimentResult res;
    res.config = flow::FlowConfig{fs.dim, fs.hidden, 2, fs.cond_dim};
    res.config.validate();
    const flow::GaussianTask task = make_task(fs);
    Rng rng(seed);
    res.teacher = flow::FlowParams::random(res.config, rng.next());
    flow::train_teacher(res.config, res.teacher, task, {train.steps, train.batch, train.lr, fs.jvp_eps}, rng);
    res.student = res.teacher;
    flow::distill_student(res.config, res.student, res.teacher, task, fs.teacher_steps,
                          {fs.distill_steps, train.batch, train.lr, fs.jvp_eps}, rng);

    const std::vector<flow::Condition> conds = {{0}, {1}};
    std::vector<flow::FlowPath> probe;
    for (std::size_t i = 0; i < train.batch; ++i) {
        const std::size_t code = i % 2;
        std::vector<double> x0(fs.dim);
        for (double& v : x0) v = rng.normal();
        probe.push_back(flow::make_path(std::move(x0), task.draw(code, rng), rng.uniform(), code));
    }
    res.final_fm_loss = flow::fm_loss(res.config, res.teacher, probe, conds).loss;
    res.final_distill_loss = flow::distill_loss(res.config, res.student, res.student, probe, conds, fs.jvp_eps).loss;

    for (std::size_t code = 0; code < 2; ++code) {
        FlowCodeMetrics m;
        m.code = code;
        Matrix teacher_all, student_all;
        for (std::size_t r = 0; r < fs.resamplings; ++r) {
            const Matrix t1 = flow::sample_batch(res.config, res.teacher, conds[code], fs.teacher_steps, fs.samples, rng);
            const Matrix t2 = flow::sample_batch(res.config, res.teacher, conds[code], fs.teacher_steps, fs.samples, rng);
            const Matrix s = flow::sample_batch(res.config, res.student, conds[code], fs.student_steps, fs.samples, rng);
            const Matrix u = flow::sample_batch(res.config, res.teacher, conds[code], fs.student_steps, fs.samples, rng);
            m.teacher_self_distance += flow::energy_distance(t1, t2);
            m.student_distance += flow::energy_distance(s, t1);
            m.undistilled_distance += flow::energy_distance(u, t1);
            if (r == 0) {
                m.teacher_mean = column_means(t1);
                m.student_mean = column_means(s);
            }
        }
        const auto n = static_cast<double>(fs.resamplings);
        m.teacher_self_distance /= n;
        m.student_distance /= n;
        m.undistilled_distance /= n;
        res.codes.push_back(std::move(m));
    }
    return res;
}

json cmd_flow(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& weights_out) {
    const FlowExperimentResult res = run_flow_experiment(cfg.flow, cfg.train, seed);
    if (!weights_out.empty()) {
        flow::FlowParams deploy = res.student;
        deploy.drop_aux_head();
        std::ofstream out(weights_out, std::ios::binary);
        if (!out) throw RuntimeFault("cannot write " + weights_out.string());
        write_container(out, flow::pack_flow(res.config, deploy));
    }
    json rec = make_report("flow", cfg, seed);
    json codes = json::array();
    bool pass = true;
    for (const auto& m : res.codes) {
        const double ratio = m.student_distance / m.teacher_self_distance;
        codes.push_back({{"code", m.code},
                         {"teacher_self_distance", m.teacher_self_distance},
                         {"student_distance", m.student_distance},
                         {"undistilled_distance", m.undistilled_distance},
                         {"ratio", ratio},
                         {"teacher_mean", m.teacher_mean},
                         {"student_mean", m.student_mean}});
        pass = pass && ratio <= 2.0;
    }
    rec["codes"] = codes;
    rec["final_fm_loss"] = res.final_fm_loss;
    rec["final_distill_loss"] = res.final_distill_loss;
    rec["within_2x"] = pass;
    return rec;
}

}  // namespace dlm
