#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "apf/model.hpp"

namespace apf {

/// Model container: "APF1", u32 LE manifest length, JSON manifest (config,
/// parameter names, shapes, byte offsets into the data section), then the
/// parameter blocks as little-endian float64.
struct Checkpoint {
  ModelConfig config;
  ParameterSet params;
  nlohmann::json metadata;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

/// Dotted path of the first field where two JSON documents differ, or "" if equal.
std::string first_divergent_field(const nlohmann::json& a, const nlohmann::json& b, const std::string& prefix = "");

}  // namespace apf
