#include <gtest/gtest.h>

#include "dmrl/config.hpp"
#include "dmrl/error.hpp"
#include "dmrl/synthgen.hpp"
#include "dmrl/training.hpp"
#include "test_util.hpp"

using namespace dmrl;

TEST(Config, ReadKeyValues) {
  testutil::TempDir dir;
  testutil::write_file(dir / "c.txt", "# comment\n\nembed_dim = 64\n  lambda_d=0.5  \n");
  const auto kv = read_key_values(dir / "c.txt");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"embed_dim", "64"}));
  EXPECT_EQ(kv[1], (std::pair<std::string, std::string>{"lambda_d", "0.5"}));
  testutil::write_file(dir / "bad.txt", "embed_dim 64\n");
  EXPECT_THROW(read_key_values(dir / "bad.txt"), ConfigError);
  EXPECT_THROW(read_key_values(dir / "none.txt"), IoError);
}

TEST(Config, ApplySettingsAndRejectUnknown) {
  ModelConfig model;
  TrainConfig train;
  apply_training_setting(model, train, "num_factors", "8");
  apply_training_setting(model, train, "attention_mode", "no_attention");
  apply_training_setting(model, train, "use_text", "false");
  apply_training_setting(model, train, "learning_rate", "1e-3");
  EXPECT_EQ(model.num_factors, 8u);
  EXPECT_EQ(model.attention_mode, AttentionMode::no_attention);
  EXPECT_FALSE(model.use_text);
  EXPECT_EQ(train.learning_rate, 1e-3);
  EXPECT_THROW(apply_training_setting(model, train, "embedding_size", "3"), ConfigError);
  EXPECT_THROW(apply_training_setting(model, train, "batch_size", "many"), ConfigError);
  EXPECT_THROW(apply_training_setting(model, train, "use_visual", "maybe"), ConfigError);
  EXPECT_THROW(apply_training_setting(model, train, "lambda_d", "1.0x"), ConfigError);
}

TEST(Config, OverrideParsing) {
  EXPECT_EQ(parse_override("seed=3"), (std::pair<std::string, std::string>{"seed", "3"}));
  EXPECT_THROW(parse_override("seed"), ConfigError);
  EXPECT_THROW(parse_override("=3"), ConfigError);
}

TEST(Config, FormatRoundTrips) {
  ModelConfig model;
  TrainConfig train;
  model.lambda_theta = 3.0e-7;
  model.attention_mode = AttentionMode::no_user;
  model.text_input_dim = 17;
  train.learning_rate = 0.1 + 0.2;
  train.seed = 123456789012345ULL;
  testutil::TempDir dir;
  testutil::write_file(dir / "c.txt", format_training_config(model, train));
  ModelConfig model2;
  TrainConfig train2;
  for (const auto& [k, v] : read_key_values(dir / "c.txt")) {
    apply_training_setting(model2, train2, k, v);
  }
  EXPECT_EQ(model2, model);
  EXPECT_EQ(train2, train);
}

TEST(Config, SynthSettings) {
  SynthConfig synth;
  apply_synth_setting(synth, "num_users", "50");
  apply_synth_setting(synth, "noise_std", "0");
  EXPECT_EQ(synth.num_users, 50u);
  EXPECT_EQ(synth.noise_std, 0.0);
  EXPECT_THROW(apply_synth_setting(synth, "learning_rate", "1"), ConfigError);
}
