// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/model.hpp"

#include <algorithm>

#include "dlm/kernels.hpp"

namespace dlm {

void ModelConfig::validate() const {
    if (d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1 || vocab_size < 1 || block_size < 1) {
        throw ConfigError("model: all counts must be >= 1");
    }
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ConfigError("model: head dimension must be even for RoPE");
    if (!(rope_base > 1.0)) throw ConfigError("model: rope_base must be > 1");
    if (moe) moe->validate();
}

namespace {

FeedForwardParams ffn_zeros(const ModelConfig& cfg) {
    return {Matrix(cfg.d_ff, cfg.d_model), Matrix(cfg.d_model, cfg.d_ff)};
}

}  // namespace

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    ModelParams p;
    p.embed = Matrix(cfg.vocab_size, d);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
        l.attn_norm = Matrix(1, d);
        l.wq = Matrix(d, d);
        l.wk = Matrix(d, d);
        l.wv = Matrix(d, d);
        l.wo = Matrix(d, d);
        l.ffn_norm = Matrix(1, d);
        if (cfg.moe) {
            l.gate = Matrix(cfg.moe->n_experts, d);
            l.experts.assign(cfg.moe->n_experts, ffn_zeros(cfg));
            l.router = RouterState::uniform(cfg.moe->n_experts);
        } else {
            l.ffn = ffn_zeros(cfg);
        }
    }
    p.final_norm = Matrix(1, d);
    p.head = Matrix(cfg.vocab_size, d);
    return p;
}

ModelParams ModelParams::random(const ModelConfig& cfg, std::uint64_t seed, double scale) {
    ModelParams p = zeros(cfg);
    Rng rng(seed);
    p.for_each([&](const std::string& name, Matrix& m) {
        const bool is_norm = name.find("norm") != std::string::npos;
        for (double& v : m.data) v = is_norm ? 1.0 : rng.uniform(-scale, scale);
    });
    return p;
}

void ModelParams::for_each(const std::function<void(const std::string&, Matrix&)>& fn) {
    fn("embed", embed);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        const std::string pre = "layers." + std::to_string(i) + ".";
        fn(pre + "attn_norm", l.attn_norm);
        fn(pre + "wq", l.wq);
        fn(pre + "wk", l.wk);
        fn(pre + "wv", l.wv);
        fn(pre + "wo", l.wo);
        fn(pre + "ffn_norm", l.ffn_norm);
        if (l.experts.empty()) {
            fn(pre + "ffn.w_in", l.ffn.w_in);
            fn(pre + "ffn.w_out", l.ffn.w_out);
        } else {
            fn(pre + "gate", l.gate);
            for (std::size_t e = 0; e < l.experts.size(); ++e) {
                const std::string ep = pre + "experts." + std::to_string(e) + ".";
                fn(ep + "w_in", l.experts[e].w_in);
                fn(ep + "w_out", l.experts[e].w_out);
            }
        }
    }
    fn("final_norm", final_norm);
    fn("head", head);
}

void ModelParams::for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const {
    const_cast<ModelParams*>(this)->for_each([&](const std::string& n, Matrix& m) { fn(n, m); });
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
}

// ---------------------------------------------------------------------------

AttentionMask AttentionMask::blockwise(std::size_t block_size, std::size_t prompt_len) {
    if (block_size == 0) throw ConfigError("block_size must be >= 1");
    AttentionMask m;
    m.block_size_ = block_size;
    m.prompt_len_ = prompt_len;
    return m;
}

AttentionMask AttentionMask::dense(std::size_t n, std::vector<std::uint8_t> bits) {
    if (bits.size() != n * n) throw ConfigError("dense mask must be n x n");
    AttentionMask m;
    m.dense_n_ = n;
    m.dense_bits_ = std::move(bits);
    return m;
}

std::size_t AttentionMask::block_of(std::size_t pos) const {
    if (pos < prompt_len_) return 0;
    return 1 + (pos - prompt_len_) / block_size_;
}

bool AttentionMask::allows(std::size_t q, std::size_t k) const {
    if (is_dense()) {
        if (q >= dense_n_ || k >= dense_n_) return false;
        return dense_bits_[q * dense_n_ + k] != 0;
    }
    return block_of(k) <= block_of(q);
}

AttentionMask AttentionMask::intersect(const AttentionMask& a, const AttentionMask& b, std::size_t n) {
    std::vector<std::uint8_t> bits(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) bits[i * n + j] = a.allows(i, j) && b.allows(i, j);
    }
    return dense(n, std::move(bits));
}

AttentionMask build_block_mask(std::size_t seq_len, std::size_t block_size, std::size_t prompt_len) {
    if (prompt_len > seq_len) throw ConfigError("prompt_len exceeds seq_len");
    const AttentionMask desc = AttentionMask::blockwise(block_size, prompt_len);
    std::vector<std::uint8_t> bits(seq_len * seq_len);
    for (std::size_t i = 0; i < seq_len; ++i) {
        for (std::size_t j = 0; j < seq_len; ++j) bits[i * seq_len + j] = desc.allows(i, j);
    }
    return AttentionMask::dense(seq_len, std::move(bits));
}

Matrix apply_rope(const Matrix& vectors, const std::vector<std::size_t>& positions, double rope_base) {
    if (vectors.cols % 2 != 0) throw ConfigError("apply_rope: head dimension must be even");
    if (positions.size() != vectors.rows) throw ConfigError("apply_rope: one position per row required");
    Matrix out = vectors;
    for (std::size_t r = 0; r < out.rows; ++r) kernels::rope_rotate(out.row(r), 1, positions[r], rope_base);
    return out;
}

// ---------------------------------------------------------------------------

PrefixCache::PrefixCache(std::size_t n_layers, std::size_t d_model)
    : keys_(n_layers, Matrix(0, d_model)), values_(n_layers, Matrix(0, d_model)) {}

void PrefixCache::append(const std::vector<std::size_t>& positions, const std::vector<Matrix>& keys,
                         const std::vector<Matrix>& values) {
    if (keys.size() != keys_.size() || values.size() != values_.size()) {
        throw ConfigError("cache append: layer count mismatch");
    }
    std::size_t last = retained_.empty() ? 0 : retained_.back();
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if ((i > 0 || !retained_.empty()) && positions[i] <= last) {
            throw ConfigError("cache append: positions must increase");
        }
        last = positions[i];
    }
    for (std::size_t l = 0; l < keys.size(); ++l) {
        if (keys[l].rows != positions.size() || values[l].rows != positions.size()) {
            throw ConfigError("cache append: one key/value row per position required");
        }
    }
    retained_.insert(retained_.end(), positions.begin(), positions.end());
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        keys_[l].data.insert(keys_[l].data.end(), keys[l].data.begin(), keys[l].data.end());
        keys_[l].rows += keys[l].rows;
        values_[l].data.insert(values_[l].data.end(), values[l].data.begin(), values[l].data.end());
        values_[l].rows += values[l].rows;
    }
}

PrefixCache PrefixCache::select_slots(const std::vector<std::size_t>& slots) const {
    PrefixCache out(keys_.size(), keys_.empty() ? 0 : keys_[0].cols);
    for (std::size_t s : slots) {
        if (s >= retained_.size()) throw ConfigError("cache select: slot out of range");
        if (!out.retained_.empty() && retained_[s] <= out.retained_.back()) {
            throw ConfigError("cache select: slots must be ascending");
        }
        out.retained_.push_back(retained_[s]);
    }
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        const std::size_t d = keys_[l].cols;
        for (std::size_t s : slots) {
            out.keys_[l].data.insert(out.keys_[l].data.end(), keys_[l].data.begin() + static_cast<std::ptrdiff_t>(s * d),
                                     keys_[l].data.begin() + static_cast<std::ptrdiff_t>((s + 1) * d));
            out.values_[l].data.insert(out.values_[l].data.end(),
                                       values_[l].data.begin() + static_cast<std::ptrdiff_t>(s * d),
                                       values_[l].data.begin() + static_cast<std::ptrdiff_t>((s + 1) * d));
        }
        out.keys_[l].rows = slots.size();
        out.values_[l].rows = slots.size();
    }
    return out;
}

void PrefixCache::truncate_before(std::size_t pos) {
    const auto keep = static_cast<std::size_t>(
        std::lower_bound(retained_.begin(), retained_.end(), pos) - retained_.begin());
    retained_.resize(keep);
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        keys_[l].data.resize(keep * keys_[l].cols);
        keys_[l].rows = keep;
        values_[l].data.resize(keep * values_[l].cols);
        values_[l].rows = keep;
    }
}

bool PrefixCache::consistent() const {
    for (std::size_t i = 1; i < retained_.size(); ++i) {
        if (retained_[i] <= retained_[i - 1]) return false;
    }
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        if (keys_[l].rows != retained_.size() || values_[l].rows != retained_.size()) return false;
        if (keys_[l].data.size() != keys_[l].rows * keys_[l].cols) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------

namespace {

Matrix project(const Matrix& x, const Matrix& w) {
    Matrix out(x.rows, w.rows);
    for (std::size_t r = 0; r < x.rows; ++r) kernels::matvec_nt(x.row(r), w, out.row(r));
    return out;
}

Matrix rmsnorm_rows(const Matrix& x, const Matrix& gain) {
    Matrix out(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) kernels::rmsnorm(x.row(r), gain.row(0), out.row(r));
    return out;
}

void feed_forward_row(const FeedForwardParams& f, std::span<const double> x, std::span<double> out,
                      std::vector<double>& hidden) {
    hidden.resize(f.w_in.rows);
    kernels::matvec_nt(x, f.w_in, hidden);
    for (double& v : hidden) v = kernels::silu(v);
    kernels::matvec_nt(hidden, f.w_out, out);
}

void check_finite(const Matrix& m, std::size_t layer, const char* what) {
    if (!all_finite(m.data)) {
        throw RuntimeFault(std::string("non-finite activation (") + what + ") in layer " + std::to_string(layer));
    }
}

}  // namespace

ForwardResult forward(const ModelConfig& cfg, const ModelParams& params, const std::vector<TokenId>& ids,
                      const std::vector<std::size_t>& positions, const AttentionMask& mask, PrefixCache* cache,
                      CacheMode mode) {
    const std::size_t n = ids.size();
    const std::size_t d = cfg.d_model;
    if (n == 0) throw ConfigError("forward: empty input");
    if (positions.size() != n) throw ConfigError("forward: one position per input token required");
    for (std::size_t i = 1; i < n; ++i) {
        if (positions[i] <= positions[i - 1]) throw ConfigError("forward: positions must be strictly increasing");
    }
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw ConfigError("forward: token id out of range: " + std::to_string(id));
        }
    }
    if (cache != nullptr) {
        if (cache->n_layers() == 0) *cache = PrefixCache(cfg.n_layers, d);
        if (cache->n_layers() != cfg.n_layers) throw ConfigError("forward: cache layer count mismatch");
        if (!cache->empty() && cache->retained().back() >= positions.front()) {
            throw ConfigError("forward: input position collides with or precedes cached positions");
        }
    }
    const std::size_t n_cached = cache != nullptr ? cache->size() : 0;

    // Key index space: cached slots first, then the inputs, both ascending in position.
    std::vector<std::vector<std::size_t>> allowed(n);
    std::uint64_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < n_cached; ++s) {
            if (mask.allows(positions[i], cache->retained()[s])) allowed[i].push_back(s);
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (mask.allows(positions[i], positions[j])) allowed[i].push_back(n_cached + j);
        }
        pairs += allowed[i].size();
    }

    ForwardResult res;
    Matrix h(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(params.embed.data.data() + static_cast<std::size_t>(ids[r]) * d, d, h.data.data() + r * d);
    }

    std::vector<Matrix> new_keys(cfg.n_layers), new_values(cfg.n_layers);
    std::vector<double> probs;
    std::vector<double> hidden;
    std::vector<double> row_out(d);
    const std::size_t hd = cfg.head_dim();

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& lp = params.layers[l];
        const Matrix x = rmsnorm_rows(h, lp.attn_norm);
        Matrix q = project(x, lp.wq);
        Matrix k = project(x, lp.wk);
        Matrix v = project(x, lp.wv);
        for (std::size_t r = 0; r < n; ++r) {
            kernels::rope_rotate(q.row(r), cfg.n_heads, positions[r], cfg.rope_base);
            kernels::rope_rotate(k.row(r), cfg.n_heads, positions[r], cfg.rope_base);
        }
        Matrix keys_all;
        Matrix values_all;
        if (n_cached > 0) {
            keys_all = Matrix(n_cached + n, d);
            values_all = Matrix(n_cached + n, d);
            std::copy(cache->keys(l).data.begin(), cache->keys(l).data.end(), keys_all.data.begin());
            std::copy(k.data.begin(), k.data.end(), keys_all.data.begin() + static_cast<std::ptrdiff_t>(n_cached * d));
            std::copy(cache->values(l).data.begin(), cache->values(l).data.end(), values_all.data.begin());
            std::copy(v.data.begin(), v.data.end(),
                      values_all.data.begin() + static_cast<std::ptrdiff_t>(n_cached * d));
        }
        const Matrix& kref = n_cached > 0 ? keys_all : k;
        const Matrix& vref = n_cached > 0 ? values_all : v;

        Matrix attn(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            probs.resize(allowed[i].size());
            for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
                kernels::attend_head(q.data.data() + i * d, kref, vref, allowed[i], hh, hd,
                                     attn.data.data() + i * d, probs.data());
            }
        }
        res.attended += pairs;
        const Matrix o = project(attn, lp.wo);
        for (std::size_t idx = 0; idx < h.size(); ++idx) h.data[idx] += o.data[idx];
        check_finite(h, l, "attention");

        const Matrix x2 = rmsnorm_rows(h, lp.ffn_norm);
        if (cfg.moe) {
            std::vector<Routing> routings;
            routings.reserve(n);
            std::vector<double> gate_logits(cfg.moe->n_experts);
            std::vector<double> expert_out(d);
            for (std::size_t r = 0; r < n; ++r) {
                kernels::matvec_nt(x2.row(r), lp.gate, gate_logits);
                Routing rt = route(gate_logits, lp.router, *cfg.moe);
                std::fill(row_out.begin(), row_out.end(), 0.0);
                for (std::size_t kk = 0; kk < rt.experts.size(); ++kk) {
                    feed_forward_row(lp.experts[rt.experts[kk]], x2.row(r), expert_out, hidden);
                    for (std::size_t c = 0; c < d; ++c) row_out[c] += rt.weights[kk] * expert_out[c];
                }
                for (std::size_t c = 0; c < d; ++c) h(r, c) += row_out[c];
                routings.push_back(std::move(rt));
            }
            res.routings.push_back(std::move(routings));
        } else {
            for (std::size_t r = 0; r < n; ++r) {
                feed_forward_row(lp.ffn, x2.row(r), row_out, hidden);
                for (std::size_t c = 0; c < d; ++c) h(r, c) += row_out[c];
            }
        }
        check_finite(h, l, "feed-forward");
        new_keys[l] = std::move(k);
        new_values[l] = std::move(v);
    }

    res.logits = project(rmsnorm_rows(h, params.final_norm), params.head);
    check_finite(res.logits, cfg.n_layers, "logits");
    if (cache != nullptr && mode == CacheMode::kAppend) cache->append(positions, new_keys, new_values);
    return res;
}

// ---------------------------------------------------------------------------

ParamVars bind_params(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& params, ModelParams* grads) {
    auto sink = [&](auto member) -> Matrix* { return grads == nullptr ? nullptr : member(*grads); };
    ParamVars v;
    v.embed = tape.parameter(params.embed, sink([](ModelParams& g) { return &g.embed; }));
    v.layers.resize(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const LayerParams& lp = params.layers[i];
        LayerParams* lg = grads == nullptr ? nullptr : &grads->layers[i];
        auto g = [&](Matrix LayerParams::*m) -> Matrix* { return lg == nullptr ? nullptr : &(lg->*m); };
        auto& lv = v.layers[i];
        lv.attn_norm = tape.parameter(lp.attn_norm, g(&LayerParams::attn_norm));
        lv.wq = tape.parameter(lp.wq, g(&LayerParams::wq));
        lv.wk = tape.parameter(lp.wk, g(&LayerParams::wk));
        lv.wv = tape.parameter(lp.wv, g(&LayerParams::wv));
        lv.wo = tape.parameter(lp.wo, g(&LayerParams::wo));
        lv.ffn_norm = tape.parameter(lp.ffn_norm, g(&LayerParams::ffn_norm));
        if (cfg.moe) {
            lv.gate = tape.parameter(lp.gate, g(&LayerParams::gate));
            for (std::size_t e = 0; e < lp.experts.size(); ++e) {
                lv.exp_in.push_back(tape.parameter(lp.experts[e].w_in, lg ? &lg->experts[e].w_in : nullptr));
                lv.exp_out.push_back(tape.parameter(lp.experts[e].w_out, lg ? &lg->experts[e].w_out : nullptr));
            }
        } else {
            lv.w_in = tape.parameter(lp.ffn.w_in, lg ? &lg->ffn.w_in : nullptr);
            lv.w_out = tape.parameter(lp.ffn.w_out, lg ? &lg->ffn.w_out : nullptr);
        }
    }
    v.final_norm = tape.parameter(params.final_norm, sink([](ModelParams& g) { return &g.final_norm; }));
    v.head = tape.parameter(params.head, sink([](ModelParams& g) { return &g.head; }));
    return v;
}

ad::Var forward_tape(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& params, const ParamVars& vars,
                     const std::vector<TokenId>& ids, const std::vector<std::size_t>& positions,
                     const std::vector<std::uint8_t>& allow) {
    using namespace ad;
    Var h = embedding(tape, vars.embed, ids);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lv = vars.layers[l];
        const Var x = rmsnorm(tape, h, lv.attn_norm);
        const Var q = rope(tape, matmul_nt(tape, x, lv.wq), positions, cfg.n_heads, cfg.rope_base);
        const Var k = rope(tape, matmul_nt(tape, x, lv.wk), positions, cfg.n_heads, cfg.rope_base);
        const Var v = matmul_nt(tape, x, lv.wv);
        const Var a = attention(tape, q, k, v, allow, cfg.n_heads);
        h = add(tape, h, matmul_nt(tape, a, lv.wo));

        const Var x2 = rmsnorm(tape, h, lv.ffn_norm);
        Var ff;
        if (cfg.moe) {
            const Var gate = matmul_nt(tape, x2, lv.gate);
            const Matrix& gv = tape.value(gate);
            std::vector<std::vector<std::size_t>> selection(ids.size());
            for (std::size_t r = 0; r < ids.size(); ++r) {
                selection[r] = route(gv.row(r), params.layers[l].router, *cfg.moe).experts;
            }
            std::vector<Var> outs;
            for (std::size_t e = 0; e < lv.exp_in.size(); ++e) {
                outs.push_back(matmul_nt(tape, silu(tape, matmul_nt(tape, x2, lv.exp_in[e])), lv.exp_out[e]));
            }
            ff = moe_combine(tape, gate, outs, selection, cfg.moe->gate_scale);
        } else {
            ff = matmul_nt(tape, silu(tape, matmul_nt(tape, x2, lv.w_in)), lv.w_out);
        }
        h = add(tape, h, ff);
    }
    return matmul_nt(tape, rmsnorm(tape, h, vars.final_norm), vars.head);
}

}  // namespace dlm
