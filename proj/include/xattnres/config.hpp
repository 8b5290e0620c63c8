#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "xattnres/backbone.hpp"
#include "xattnres/data.hpp"
#include "xattnres/training.hpp"

namespace xattnres {

/// Everything one experiment needs. Text form is one `key = value` per line
/// with `#` comments; keys are snake_case and the command-line flags are the
/// same names in kebab-case.
struct ExperimentConfig {
  BackboneConfig model;
  TrainingSettings training;
  SyntheticSpec synthetic;
  /// Directory with images/ and masks/ PGM files; empty means synthetic data.
  std::string data_dir;
  /// Seed of the 8:1:1 split for directory data.
  std::uint64_t split_seed = 0;
  /// Run seed for `run`: drives weight init, shuffling and augmentation.
  std::uint64_t seed = 0;
  /// Seeds swept by `ablate`.
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string out_dir = "out";
  std::string run_id = "run";

  ExperimentConfig();
  void validate() const;
  /// Copies the run seed into the model and training settings.
  ExperimentConfig with_seed(std::uint64_t s) const;
};

/// Every accepted key, in canonical order.
const std::vector<std::string>& config_keys();

/// Sets one key; throws ConfigError naming the key for unknown keys or bad values.
void apply_setting(ExperimentConfig& config, std::string_view key, std::string_view value);

ExperimentConfig parse_config_text(std::string_view text);
ExperimentConfig load_config(const std::string& path);
/// Canonical text form; parse_config_text(to_config_text(c)) reproduces c.
std::string to_config_text(const ExperimentConfig& config);

/// Text form of a model configuration alone, as echoed in checkpoints.
std::string backbone_config_text(const BackboneConfig& config);
BackboneConfig parse_backbone_config_text(std::string_view text);

std::vector<std::uint64_t> parse_seed_list(std::string_view text);

}  // namespace xattnres
