// Copyright (C) 2026 The dlm-sprint Authors
// SPDX-License-Identifier: Apache-2.0

// Binary parameter container:
//   "DLMP" | u32 version | u64 json_len | json bytes | u32 n_tensors |
//   n_tensors x (u32 name_len | name | u64 rows | u64 cols | rows*cols f64)
// All integers and doubles little-endian.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dlm/common.hpp"
#include "dlm/model.hpp"

namespace dlm {

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
    std::string name;
    Matrix value;
};

struct Container {
    std::string config_json;
    std::vector<NamedTensor> tensors;

    const Matrix& get(const std::string& name) const;
};

void write_container(std::ostream& out, const Container& c);
Container read_container(std::istream& in);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Trainable tensors in declaration order, then each layer's router bias and load_ema.
Container pack_model(const ModelConfig& cfg, const ModelParams& params);
std::pair<ModelConfig, ModelParams> unpack_model(const Container& c);

void save_model(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_model(const std::filesystem::path& path);

}  // namespace dlm
