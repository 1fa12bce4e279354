#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hmnas/finetune.hpp"
#include "hmnas/masker.hpp"
#include "hmnas/searchspace.hpp"
#include "hmnas/trainer.hpp"

namespace hmnas {

struct AblationConfig {
  int random_archs = 5;  // seeds for the random-architecture arm
};

/// Everything one run needs. Per-module seeds are not configurable; they are
/// derived from `seed` so each stage can be reproduced on its own.
struct ExperimentConfig {
  std::string dataset = "synthetic:blobs2:0";
  std::string out = "runs/default";
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  SearchSpaceSpec search;
  TrainConfig train;
  MaskTrainConfig masker;
  FinetuneConfig finetune;
  AblationConfig ablation;

  void validate() const;
  // Copies the derived per-stage seeds into the module configs.
  void apply_seeds();
  bool operator==(const ExperimentConfig& o) const;
};

// Every accepted key, in canonical (echo) order.
std::vector<std::string> config_keys();

/// Sets one key. Bare names are accepted when exactly one module owns them
/// (`tau` means `masker.tau`). Throws ConfigError naming the key.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& cfg, const std::string& key);

// `key = value` lines, `#` comments. Errors name the line and key. Validates.
ExperimentConfig parse_config_string(const std::string& text);
ExperimentConfig parse_config(const std::filesystem::path& path);
// `key=value` strings as given to --stage-override.
void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides);

// Every key with its resolved value; parse_config_string(echo) == cfg.
std::string echo_config(const ExperimentConfig& cfg);

}  // namespace hmnas
