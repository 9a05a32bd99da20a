#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "ulike/data.hpp"
#include "ulike/network.hpp"
#include "ulike/trainer.hpp"

namespace ulike::cli {

struct CostSection {
  GridShape input{128, 128, 128};
  /// Preset strings for `count` ("mamba_3d", "mamba_3d+tri", ...).
  std::vector<std::string> variants{"mamba_1d", "mamba_3d", "trans_sra", "trans_vanilla"};
};

struct DataSection {
  SyntheticVolumeSpec volume;
  Index n_train = 200;
  Index n_val = 50;
};

/// Parsed run configuration. Every section is optional in the file; missing
/// keys keep their defaults, unknown keys are a ConfigError.
struct RunConfig {
  std::uint64_t seed = 0;
  NetworkConfig network;
  CostSection cost;
  TrainConfig train;
  DataSection data;

  /// Pushes the top-level seed into the sections that carry one.
  void propagate_seed();
  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
/// Fully resolved form with every field spelled out; keys are sorted so the
/// dump is stable.
nlohmann::json to_json(const RunConfig& cfg);
/// 16 hex digits of FNV-1a over the compact resolved JSON.
std::string config_hash(const RunConfig& cfg);

}  // namespace ulike::cli
