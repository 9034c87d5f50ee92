// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "dlm/bench.hpp"
#include "dlm/objectives.hpp"

namespace {

struct Toy {
    dlm::TokenVocabulary vocab = dlm::TokenVocabulary::build(24, 0, {});
    dlm::ModelConfig cfg;
    dlm::ModelParams params;

    Toy() {
        cfg = dlm::ModelConfig{64, 4, 4, 256, vocab.total_size(), 8, 10000.0, std::nullopt};
        params = dlm::ModelParams::random(cfg, 3);
    }
};

const Toy& toy() {
    static const Toy t;
    return t;
}

dlm::TokenSequence prompt_of(const Toy& t, std::size_t n) {
    dlm::GenerateSection gen;
    gen.prompt_len = n;
    return dlm::make_prompt(gen, t.vocab, 11);
}

void BM_Forward(benchmark::State& state) {
    const Toy& t = toy();
    const auto n = static_cast<std::size_t>(state.range(0));
    std::vector<dlm::TokenId> ids(n);
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
        ids[i] = static_cast<dlm::TokenId>(i % t.vocab.text_size());
        pos[i] = i;
    }
    const auto mask = dlm::AttentionMask::blockwise(8, 8);
    for (auto _ : state) {
        benchmark::DoNotOptimize(dlm::forward(t.cfg, t.params, ids, pos, mask));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(40)->Arg(72);

void run_generate(benchmark::State& state, bool sprint) {
    const Toy& t = toy();
    dlm::GenerateSection gen;
    gen.n_blocks = 4;
    gen.steps = 8;
    gen.tau = 0.5;
    const auto opts = dlm::generate_options(gen, !sprint, 1);
    const auto prompt = prompt_of(t, 16);
    std::uint64_t nfe = 0, attended = 0;
    for (auto _ : state) {
        const auto res = dlm::generate(t.cfg, t.params, t.vocab, prompt, opts);
        nfe = res.nfe;
        attended = res.attended;
        benchmark::DoNotOptimize(res.tokens.ids.data());
    }
    state.counters["nfe"] = static_cast<double>(nfe);
    state.counters["attended"] = static_cast<double>(attended);
}

void BM_GenerateBaseline(benchmark::State& state) { run_generate(state, false); }
void BM_GenerateSprint(benchmark::State& state) { run_generate(state, true); }
BENCHMARK(BM_GenerateBaseline)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GenerateSprint)->Unit(benchmark::kMillisecond);

void BM_BdlmLoss(benchmark::State& state) {
    const auto vocab = dlm::TokenVocabulary::build(8, 0, {});
    const dlm::ModelConfig cfg{16, 2, 1, 32, vocab.total_size(), 4, 10000.0, std::nullopt};
    const auto params = dlm::ModelParams::random(cfg, 5);
    dlm::Rng rng(2);
    dlm::TokenSequence x0;
    x0.block_size = 4;
    for (int i = 0; i < 20; ++i) x0.ids.push_back(static_cast<dlm::TokenId>(rng.below(8)));
    x0.spans = dlm::spans_from_ids(x0.ids, vocab);
    const std::vector<dlm::MaskedBatch> batch = {dlm::corrupt(x0, 4, 0.5, vocab.mask_id(), rng)};
    for (auto _ : state) benchmark::DoNotOptimize(dlm::bdlm_loss(cfg, params, batch).loss);
}
BENCHMARK(BM_BdlmLoss)->Unit(benchmark::kMicrosecond);

void BM_Pack(benchmark::State& state) {
    dlm::Rng rng(7);
    std::vector<dlm::PackSample> samples;
    for (std::size_t i = 0; i < static_cast<std::size_t>(state.range(0)); ++i) samples.push_back({i, 1 + rng.below(512)});
    for (auto _ : state) benchmark::DoNotOptimize(dlm::pack(samples, 512, 8));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Pack)->Arg(1000)->Arg(10000);

}  // namespace
BENCHMARK_MAIN();
