// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "convfuse/config.hpp"
#include "convfuse/error.hpp"

namespace convfuse {
namespace {

TEST(Config, DefaultsValidate) {
  const RunConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.model.groups, 3u);
  EXPECT_EQ(cfg.model.channels, 64u);
  EXPECT_EQ(cfg.model.rank, 8u);
  EXPECT_EQ(cfg.model.image_size, 32u);
}

TEST(Config, ParseTextWithCommentsAndSpaces) {
  const RunConfig cfg = parse_config_text(
      "# a comment\n"
      "groups = 4\n"
      "  rank=4   # trailing\n"
      "\n"
      "branch_kernels = 1,3,7\n"
      "conv_lora = off\n"
      "temperature = 0.05\n"
      "prompt_normal = good surface\n");
  EXPECT_EQ(cfg.model.groups, 4u);
  EXPECT_EQ(cfg.model.rank, 4u);
  EXPECT_EQ(cfg.model.branch_kernels, (std::vector<std::size_t>{1, 3, 7}));
  EXPECT_FALSE(cfg.model.conv_lora);
  EXPECT_DOUBLE_EQ(cfg.model.temperature, 0.05);
  EXPECT_EQ(cfg.model.prompt_normal, "good surface");
}

TEST(Config, UnknownKeyListsValidKeys) {
  RunConfig cfg;
  try {
    set_config_value(cfg, "lerning_rate", "1");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("lerning_rate"), std::string::npos);
    for (const auto& key : config_keys()) EXPECT_NE(msg.find(key.name), std::string::npos) << key.name;
  }
}

TEST(Config, MalformedValuesAreRejected) {
  RunConfig cfg;
  EXPECT_THROW(set_config_value(cfg, "groups", "three"), ConfigError);
  EXPECT_THROW(set_config_value(cfg, "groups", "-1"), ConfigError);
  EXPECT_THROW(set_config_value(cfg, "learning_rate", "1e-3x"), ConfigError);
  EXPECT_THROW(set_config_value(cfg, "dfg", "maybe"), ConfigError);
  EXPECT_THROW(parse_config_text("groups\n"), ConfigError);
}

TEST(Config, EchoRoundTripsEveryKey) {
  RunConfig cfg;
  set_config_value(cfg, "learning_rate", "0.0003");
  set_config_value(cfg, "temperature", "0.1");
  set_config_value(cfg, "texture", "grid");
  set_config_value(cfg, "dfg", "false");
  set_config_value(cfg, "model_seed", "18446744073709551615");
  const std::string echo = config_echo(cfg);
  const RunConfig back = parse_config_text(echo);
  EXPECT_EQ(config_echo(back), echo);
  for (const auto& key : config_keys()) EXPECT_EQ(get_config_value(back, key.name), get_config_value(cfg, key.name));
  EXPECT_NE(echo.find("temperature = 0.1\n"), std::string::npos);
  EXPECT_EQ(back.model_seed, 18446744073709551615ull);
}

TEST(Config, ValidationNamesEveryField) {
  RunConfig cfg;
  cfg.optim.batch_size = 0;
  cfg.optim.learning_rate = -1;
  cfg.model.heads = 5;
  try {
    cfg.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("batch_size"), std::string::npos);
    EXPECT_NE(msg.find("learning_rate"), std::string::npos);
    EXPECT_NE(msg.find("heads"), std::string::npos);
  }
}

TEST(Config, SplitsFollowModelImageSize) {
  RunConfig cfg;
  cfg.model.image_size = 48;
  cfg.model.patch_size = 8;
  EXPECT_EQ(cfg.train_params().image_size, 48u);
  EXPECT_EQ(cfg.test_params().count, cfg.test_samples);
  EXPECT_NE(cfg.train_params().id_prefix, cfg.test_params().id_prefix);
}

TEST(Config, FileLoading) {
  const auto path = std::filesystem::temp_directory_path() / "convfuse_test_config.txt";
  std::ofstream(path) << "steps = 7\nbatch_size = 2\n";
  RunConfig base;
  base.optim.learning_rate = 0.5;
  const RunConfig cfg = load_config_file(path, base);
  EXPECT_EQ(cfg.optim.steps, 7u);
  EXPECT_EQ(cfg.optim.batch_size, 2u);
  EXPECT_DOUBLE_EQ(cfg.optim.learning_rate, 0.5);
  std::filesystem::remove(path);
  EXPECT_THROW(load_config_file(path), ConfigError);
}

}  // namespace
}  // namespace convfuse
