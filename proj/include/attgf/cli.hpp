#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attgf/dataset.hpp"
#include "attgf/losses.hpp"
#include "attgf/meta.hpp"
#include "attgf/metrics.hpp"
#include "attgf/model.hpp"
#include "attgf/study.hpp"

namespace attgf {

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitRuntime = 3 };

// Everything a run reads from its YAML config, after command-line overrides.
struct Settings {
  std::uint64_t seed = 0;
  ModelConfig model;
  MetaConfig meta;
  LossWeights loss;
  PairPlan pairs;
  SynthConfig synth;
  AblationMode ablation = AblationMode::full;
  std::optional<int> unseen_domain;
  MappingForm mapping = MappingForm::logistic;
  int null_shuffles = 1000;
  double rejection_threshold = kDefaultRejectionThreshold;
  int practice_size = 5;
};

// Desk-scale defaults: small inputs and channel widths.
Settings default_settings();
// Unknown keys and malformed values raise ConfigError.
Settings load_settings(const std::filesystem::path& path, Settings base = default_settings());
std::string settings_to_yaml(const Settings& settings);

// Environment variable naming the default data root.
inline constexpr const char* kDataRootEnv = "ATTGF_DATA_ROOT";

int run_cli(const std::vector<std::string>& args);

}  // namespace attgf
