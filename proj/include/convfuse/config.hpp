// SPDX-License-Identifier: Apache-2.0

// Run configuration and its plain-text form: one `key = value` per line, `#`
// starts a comment. The same keys are accepted as `--key value` overrides on
// the command line.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convfuse/backbone.hpp"
#include "convfuse/data.hpp"
#include "convfuse/losses.hpp"

namespace convfuse {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  std::size_t steps = 500;
  std::size_t batch_size = 8;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  OptimizerConfig optim;
  SyntheticParams data;  ///< image_size follows model.image_size
  std::size_t train_samples = 200;
  std::size_t test_samples = 100;
  std::uint64_t model_seed = 1;
  std::uint64_t data_seed = 1;
  std::string dataset_dir;  ///< empty: synthetic corpus
  std::size_t ablation_seeds = 5;
  std::size_t eval_batch = 16;

  void validate() const;

  SyntheticParams train_params() const;
  SyntheticParams test_params() const;
};

struct ConfigKey {
  std::string name;
  std::string help;
};
const std::vector<ConfigKey>& config_keys();

/// Throws ConfigError listing the valid keys when `key` is unknown.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

RunConfig parse_config_text(const std::string& text, RunConfig base = {});
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});

/// Every key in declaration order as `key = value` lines. Parsing the echo
/// reproduces the configuration exactly.
std::string config_echo(const RunConfig& cfg);

}  // namespace convfuse
