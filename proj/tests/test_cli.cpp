#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "dmrl/cli.hpp"
#include "test_util.hpp"

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "dmrl");
  std::vector<const char*> argv;
  for (const auto& a : args) {
    argv.push_back(a.c_str());
  }
  std::ostringstream out;
  std::ostringstream err;
  Outcome o;
  o.code = dmrl::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

} // namespace

TEST(Cli, EvaluateWithoutCheckpointIsAValidationError) {
  const auto o = run({"evaluate", "--data", "x", "--report", "r.tsv"});
  EXPECT_EQ(o.code, dmrl::cli::kExitValidation);
  EXPECT_NE(o.err.find("--checkpoint"), std::string::npos) << o.err;
  EXPECT_EQ(std::count(o.err.begin(), o.err.end(), '\n'), 1);
}

TEST(Cli, UnknownVerbAndMissingVerb) {
  EXPECT_EQ(run({"frobnicate"}).code, dmrl::cli::kExitValidation);
  EXPECT_EQ(run({}).code, dmrl::cli::kExitValidation);
}

TEST(Cli, GradcheckPasses) {
  const auto o = run({"gradcheck"});
  EXPECT_EQ(o.code, dmrl::cli::kExitOk) << o.err;
  const auto pos = o.out.find("max_relative_error\t");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_LT(std::stod(o.out.substr(pos + 19)), 1e-4);
}

TEST(Cli, HelpListsEveryFlag) {
  const auto o = run({"train", "--help"});
  EXPECT_EQ(o.code, dmrl::cli::kExitOk);
  for (const char* flag : {"--data", "--text-features", "--visual-features", "--config", "--set", "--resume", "--out"}) {
    EXPECT_NE(o.out.find(flag), std::string::npos) << flag;
  }
}

TEST(Cli, UnknownConfigKeyIsRejectedBeforeWork) {
  testutil::TempDir dir;
  const auto o = run({"gen-synthetic", "--set", "bogus=1", "--out", (dir / "s").string()});
  EXPECT_EQ(o.code, dmrl::cli::kExitValidation);
  EXPECT_FALSE(std::filesystem::exists(dir / "s" / "interactions.tsv"));
}

TEST(Cli, MissingInputFileIsARuntimeError) {
  testutil::TempDir dir;
  const auto o = run({"prepare", "--interactions", (dir / "nope.tsv").string(), "--out", (dir / "d").string()});
  EXPECT_EQ(o.code, dmrl::cli::kExitRuntime);
}

TEST(Cli, EndToEndPipeline) {
  testutil::TempDir dir;
  const auto s = (dir / "synth").string();
  const auto d = (dir / "data").string();
  const auto m = (dir / "model").string();
  auto o = run({"gen-synthetic", "--set", "num_users=40", "--set", "num_items=80", "--set", "text_dim=8", "--set",
                "visual_dim=8", "--out", s});
  ASSERT_EQ(o.code, 0) << o.err;
  o = run({"prepare", "--interactions", s + "/interactions.tsv", "--min-interactions", "1", "--out", d});
  ASSERT_EQ(o.code, 0) << o.err;
  o = run({"train", "--data", d, "--text-features", s + "/text_features.tsv", "--visual-features",
           s + "/visual_features.tsv", "--set", "embed_dim=16", "--set", "attention_hidden=8", "--set", "max_epochs=3",
           "--set", "batch_size=64", "--out", m});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "model" / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "model" / "train_log.tsv"));
  o = run({"evaluate", "--checkpoint", m + "/best.ckpt", "--data", d, "--report", m + "/report.tsv"});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("recall@20"), std::string::npos);
  o = run({"recommend", "--checkpoint", m + "/best.ckpt", "--user", "u3", "--k", "5", "--data", d});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(std::count(o.out.begin(), o.out.end(), '\n'), 5);
  o = run({"inspect-attention", "--checkpoint", m + "/best.ckpt", "--user", "u3", "--item", "i5", "--out",
           m + "/b.tsv"});
  ASSERT_EQ(o.code, 0) << o.err;
  o = run({"recommend", "--checkpoint", m + "/best.ckpt", "--user", "nobody"});
  EXPECT_EQ(o.code, dmrl::cli::kExitValidation);
  o = run({"train", "--data", d, "--set", "use_text=false", "--set", "use_visual=false", "--set", "embed_dim=7",
           "--out", (dir / "bad").string()});
  EXPECT_EQ(o.code, dmrl::cli::kExitValidation);
}
