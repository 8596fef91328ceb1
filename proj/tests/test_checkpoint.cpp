#include <gtest/gtest.h>

#include <filesystem>

#include "dmrl/checkpoint.hpp"
#include "dmrl/error.hpp"
#include "test_util.hpp"

using namespace dmrl;
using testutil::TempDir;

namespace {

Checkpoint make_checkpoint(std::uint64_t seed) {
  Checkpoint ck;
  ck.config.embed_dim = 8;
  ck.config.num_factors = 2;
  ck.config.text_input_dim = 5;
  ck.config.visual_input_dim = 6;
  ck.config.attention_hidden = 4;
  ck.config.lambda_d = 0.25;
  ck.params = ModelParams::initialize(ck.config, 3, 4, seed);
  round_to_storage(ck.params);
  ck.state = TrainState::fresh(ck.params, 1e-3);
  ck.state.epoch = 17;
  ck.state.best_val_recall = 0.3125;
  ck.state.best_epoch = 12;
  ck.state.epochs_since_best = 5;
  for (auto& a : ck.state.adam) {
    a.step_count = 170;
    a.first_moment.fill(0.5);
    a.second_moment.fill(0.25);
  }
  ck.user_keys = {"alice", "bob", "carol"};
  ck.item_keys = {"w", "x", "y", "z"};
  ck.refined_text = Tensor(4, 8, 0.125);
  ck.refined_visual = Tensor(4, 8, -0.5);
  return ck;
}

} // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir;
  const auto ck = make_checkpoint(1);
  save_checkpoint(ck, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt", ck.config);
  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(testutil::read_file(dir / "a.ckpt"), testutil::read_file(dir / "b.ckpt"));
  EXPECT_EQ(testutil::read_file(dir / "a.ckpt").substr(0, 8), "DMRLCK01");

  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.params.user_table, ck.params.user_table);
  EXPECT_EQ(back.params.attention.proj, ck.params.attention.proj);
  EXPECT_EQ(back.params.visual.b0, ck.params.visual.b0);
  EXPECT_EQ(back.state.epoch, 17u);
  EXPECT_EQ(back.state.best_val_recall, 0.3125);
  EXPECT_EQ(back.state.best_epoch, 12u);
  EXPECT_EQ(back.state.epochs_since_best, 5u);
  EXPECT_EQ(back.state.step_count(), 170u);
  ASSERT_EQ(back.state.adam.size(), ck.state.adam.size());
  EXPECT_EQ(back.state.adam[3].second_moment, ck.state.adam[3].second_moment);
  EXPECT_EQ(back.user_keys, ck.user_keys);
  EXPECT_EQ(back.item_keys, ck.item_keys);
  EXPECT_EQ(back.refined_text, ck.refined_text);
  EXPECT_EQ(back.refined_visual, ck.refined_visual);
}

TEST(Checkpoint, ConfigMismatchIsReported) {
  TempDir dir;
  const auto ck = make_checkpoint(2);
  save_checkpoint(ck, dir / "a.ckpt");
  auto other = ck.config;
  other.embed_dim = 16;
  try {
    load_checkpoint(dir / "a.ckpt", other);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("embed_dim"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(load_checkpoint(dir / "a.ckpt"));
}

TEST(Checkpoint, BadMagicAndTruncation) {
  TempDir dir;
  save_checkpoint(make_checkpoint(3), dir / "a.ckpt");
  const auto bytes = testutil::read_file(dir / "a.ckpt");

  auto corrupt = bytes;
  corrupt[7] = '9';
  testutil::write_file(dir / "magic.ckpt", corrupt);
  EXPECT_THROW(load_checkpoint(dir / "magic.ckpt"), FormatError);

  for (std::size_t cut : {std::size_t{4}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    testutil::write_file(dir / "cut.ckpt", bytes.substr(0, cut));
    EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), FormatError) << cut;
  }
  EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), IoError);
}

TEST(Checkpoint, SaveLeavesNoTemporaryFile) {
  TempDir dir;
  save_checkpoint(make_checkpoint(4), dir / "a.ckpt");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& entry : std::filesystem::directory_iterator(dir.path())) {
    ++files;
  }
  EXPECT_EQ(files, 1u);
}
