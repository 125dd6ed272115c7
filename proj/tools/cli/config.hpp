// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "udapter/adapters.hpp"
#include "udapter/data.hpp"
#include "udapter/divergence.hpp"
#include "udapter/encoder.hpp"
#include "udapter/training.hpp"

namespace udapter::cli {

enum class InputFormat { kText, kVector };

struct DataConfig {
  InputFormat format = InputFormat::kText;
  // Keys: source_train, source_dev, source_test, target_train, target_dev, target_test.
  std::map<std::string, std::filesystem::path> paths;
  std::vector<std::filesystem::path> corpus;  // pretraining text; defaults to both train splits
  std::optional<SynthShiftConfig> synth;      // generated into <run_dir>/data when set
  std::uint64_t projection_seed = 0;

  std::optional<std::filesystem::path> path(const std::string& key) const;
};

struct PretrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double mask_prob = 0.15;
};

struct RunConfig {
  EncoderConfig encoder;
  AdapterConfig adapter;
  DivergenceSpec divergence;
  TrainPlan train;
  bool task_only = false;
  PretrainConfig pretrain;
  DataConfig data;
  std::filesystem::path run_dir;
  // Upstream checkpoints; "{seed}" expands to the run seed.
  std::map<std::string, std::string> checkpoints;

  nlohmann::json to_json() const;
};

// Parses and validates; unknown keys and bad values are ConfigErrors.
// Relative paths resolve against `base_dir`.
RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

std::string expand_seed(const std::string& pattern, std::uint64_t seed);

}  // namespace udapter::cli
