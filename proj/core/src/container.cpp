// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlm/container.hpp"

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

namespace dlm {

namespace {

constexpr char kMagic[4] = {'D', 'L', 'M', 'P'};

template <typename U>
void put_le(std::ostream& out, U v) {
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(buf, sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
    unsigned char buf[sizeof(U)];
    if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw ConfigError("container: truncated input");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

std::string get_bytes(std::istream& in, std::size_t n) {
    std::string s(n, '\0');
    if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) throw ConfigError("container: truncated input");
    return s;
}

}  // namespace

const Matrix& Container::get(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t.value;
    }
    throw ConfigError("container: missing tensor '" + name + "'");
}

void write_container(std::ostream& out, const Container& c) {
    out.write(kMagic, 4);
    put_le<std::uint32_t>(out, kContainerVersion);
    put_le<std::uint64_t>(out, c.config_json.size());
    out.write(c.config_json.data(), static_cast<std::streamsize>(c.config_json.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put_le<std::uint64_t>(out, t.value.rows);
        put_le<std::uint64_t>(out, t.value.cols);
        for (double v : t.value.data) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw RuntimeFault("container: write failed");
}

Container read_container(std::istream& in) {
    const std::string magic = get_bytes(in, 4);
    if (magic != std::string(kMagic, 4)) throw ConfigError("container: bad magic");
    const auto version = get_le<std::uint32_t>(in);
    if (version != kContainerVersion) throw ConfigError("container: unsupported version " + std::to_string(version));
    Container c;
    c.config_json = get_bytes(in, get_le<std::uint64_t>(in));
    const auto count = get_le<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = get_bytes(in, get_le<std::uint32_t>(in));
        const auto rows = get_le<std::uint64_t>(in);
        const auto cols = get_le<std::uint64_t>(in);
        t.value = Matrix(rows, cols);
        for (double& v : t.value.data) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
        c.tensors.push_back(std::move(t));
    }
    return c;
}

nlohmann::json to_json(const ModelConfig& cfg) {
    nlohmann::json j{{"d_model", cfg.d_model},   {"n_heads", cfg.n_heads},     {"n_layers", cfg.n_layers},
                     {"d_ff", cfg.d_ff},         {"vocab_size", cfg.vocab_size}, {"block_size", cfg.block_size},
                     {"rope_base", cfg.rope_base}};
    if (cfg.moe) {
        j["moe"] = {{"n_experts", cfg.moe->n_experts},   {"top_k", cfg.moe->top_k},
                    {"gate_scale", cfg.moe->gate_scale}, {"update_rate", cfg.moe->update_rate},
                    {"load_decay", cfg.moe->load_decay}};
    } else {
        j["moe"] = nullptr;
    }
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.d_ff = j.at("d_ff").get<std::size_t>();
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.block_size = j.at("block_size").get<std::size_t>();
        cfg.rope_base = j.value("rope_base", 10000.0);
        if (j.contains("moe") && !j.at("moe").is_null()) {
            const auto& m = j.at("moe");
            MoEConfig moe;
            moe.n_experts = m.at("n_experts").get<std::size_t>();
            moe.top_k = m.at("top_k").get<std::size_t>();
            moe.gate_scale = m.value("gate_scale", 2.5);
            moe.update_rate = m.value("update_rate", -0.01);
            moe.load_decay = m.value("load_decay", 0.9);
            cfg.moe = moe;
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

Container pack_model(const ModelConfig& cfg, const ModelParams& params) {
    Container c;
    c.config_json = to_json(cfg).dump();
    params.for_each([&](const std::string& name, const Matrix& m) { c.tensors.push_back({name, m}); });
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        const auto& r = params.layers[i].router;
        if (r.bias.empty()) continue;
        const std::string pre = "layers." + std::to_string(i) + ".router.";
        Matrix bias(1, r.bias.size());
        bias.data = r.bias;
        Matrix load(1, r.load.size());
        load.data = r.load;
        c.tensors.push_back({pre + "bias", bias});
        c.tensors.push_back({pre + "load_ema", load});
    }
    return c;
}

std::pair<ModelConfig, ModelParams> unpack_model(const Container& c) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(c.config_json);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("container: config is not JSON: ") + e.what());
    }
    ModelConfig cfg = model_config_from_json(j);
    ModelParams params = ModelParams::zeros(cfg);
    params.for_each([&](const std::string& name, Matrix& m) {
        const Matrix& src = c.get(name);
        if (!src.same_shape(m)) throw ConfigError("container: tensor '" + name + "' has the wrong shape");
        m = src;
    });
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        auto& r = params.layers[i].router;
        if (r.bias.empty()) continue;
        const std::string pre = "layers." + std::to_string(i) + ".router.";
        r.bias = c.get(pre + "bias").data;
        r.load = c.get(pre + "load_ema").data;
        if (r.bias.size() != cfg.moe->n_experts || r.load.size() != cfg.moe->n_experts) {
            throw ConfigError("container: router tensors have the wrong size");
        }
        r.load_initialized = true;
    }
    return {cfg, std::move(params)};
}

void save_model(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFault("cannot open " + path.string() + " for writing");
    write_container(out, pack_model(cfg, params));
}

std::pair<ModelConfig, ModelParams> load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open model file " + path.string());
    return unpack_model(read_container(in));
}

}  // namespace dlm
