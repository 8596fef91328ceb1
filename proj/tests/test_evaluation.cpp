#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "dmrl/error.hpp"
#include "dmrl/evaluation.hpp"
#include "test_util.hpp"

using namespace dmrl;

namespace {

std::vector<Index> iota_list(std::size_t n) {
  std::vector<Index> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = static_cast<Index>(i);
  }
  return v;
}

std::vector<std::vector<std::string>> read_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> fields;
    std::istringstream s(line);
    for (std::string f; std::getline(s, f, '\t');) {
      fields.push_back(f);
    }
    rows.push_back(fields);
  }
  return rows;
}

struct Toy {
  ModelConfig config;
  ModelParams params;
};

Toy id_only(std::size_t users, std::size_t items, std::uint64_t seed, std::size_t K = 2) {
  Toy t;
  t.config.embed_dim = 8;
  t.config.num_factors = K;
  t.config.use_text = false;
  t.config.use_visual = false;
  t.config.attention_hidden = 4;
  t.params = ModelParams::initialize(t.config, users, items, seed);
  return t;
}

} // namespace

TEST(Recall, Examples) {
  const std::vector<Index> ranked{7, 3, 9, 1};
  EXPECT_EQ(*recall_at_k(ranked, std::vector<Index>{3, 5}, 20), 0.5);
  EXPECT_EQ(*recall_at_k(ranked, std::vector<Index>{1, 7}, 20), 1.0);
  EXPECT_EQ(*recall_at_k(ranked, std::vector<Index>{1}, 2), 0.0);
  EXPECT_FALSE(recall_at_k(ranked, std::vector<Index>{}, 20).has_value());
}

TEST(Ndcg, Examples) {
  const std::vector<Index> ranked{4, 2, 8};
  EXPECT_EQ(*ndcg_at_k(ranked, std::vector<Index>{4}, 20), 1.0);
  EXPECT_DOUBLE_EQ(*ndcg_at_k(ranked, std::vector<Index>{2}, 20), 1.0 / std::log2(3.0));
  EXPECT_NEAR(*ndcg_at_k(ranked, std::vector<Index>{2}, 20), 0.6309, 5e-5);
  EXPECT_EQ(*ndcg_at_k(ranked, std::vector<Index>{8}, 2), 0.0);
  EXPECT_FALSE(ndcg_at_k(ranked, std::vector<Index>{}, 20).has_value());
}

TEST(Ndcg, IdealIffTopRanksAndMonotone) {
  const auto ranked = iota_list(10);
  EXPECT_EQ(*ndcg_at_k(ranked, std::vector<Index>{0, 1, 2}, 5), 1.0);
  EXPECT_LT(*ndcg_at_k(ranked, std::vector<Index>{0, 1, 3}, 5), 1.0);
  double previous = 0.0;
  for (int pos = 9; pos >= 0; --pos) {
    const double v = *ndcg_at_k(ranked, std::vector<Index>{static_cast<Index>(pos), 11}, 10);
    EXPECT_GE(v, previous);
    EXPECT_LE(v, 1.0);
    previous = v;
  }
}

TEST(Metrics, PermutationBelowKDoesNotMatter) {
  std::vector<Index> a{5, 1, 2, 3, 4, 0, 6, 7};
  std::vector<Index> b{5, 1, 2, 7, 6, 0, 4, 3};
  const std::vector<Index> relevant{5, 2, 9};
  EXPECT_EQ(*recall_at_k(a, relevant, 3), *recall_at_k(b, relevant, 3));
  EXPECT_EQ(*ndcg_at_k(a, relevant, 3), *ndcg_at_k(b, relevant, 3));
}

TEST(Metrics, RandomRankingRecallIsKOverN) {
  std::mt19937_64 rng(12);
  const std::size_t n = 100;
  const std::size_t k = 20;
  auto ranked = iota_list(n);
  double sum = 0.0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    std::shuffle(ranked.begin(), ranked.end(), rng);
    sum += *recall_at_k(ranked, std::vector<Index>{0}, k);
  }
  const double p = static_cast<double>(k) / n;
  const double se = std::sqrt(p * (1 - p) / trials);
  EXPECT_NEAR(sum / trials, p, 3 * se);
}

TEST(RankScores, ExclusionTiesAndLimit) {
  const std::vector<double> scores{0.5, 0.9, 0.5, 0.1, 0.5};
  EXPECT_EQ(rank_scores(scores, std::vector<Index>{1, 3}), (std::vector<Index>{0, 2, 4}));
  EXPECT_EQ(rank_scores(scores, std::vector<Index>{}), (std::vector<Index>{1, 0, 2, 4, 3}));
  EXPECT_EQ(rank_scores(scores, std::vector<Index>{}, 2), (std::vector<Index>{1, 0}));
  EXPECT_THROW(rank_scores(scores, iota_list(5)), InvalidInput);
}

TEST(RankItems, ExcludedNeverAppearAndTopMatchesArgmax) {
  const auto toy = id_only(4, 12, 3);
  const ItemScorer scorer(toy.params, {}, toy.config);
  for (Index u = 0; u < 4; ++u) {
    const std::vector<Index> exclude{1, 4, 7};
    const auto ranked = rank_items(u, scorer, exclude);
    EXPECT_EQ(ranked.size(), 9u);
    for (Index i : ranked) {
      EXPECT_TRUE(std::find(exclude.begin(), exclude.end(), i) == exclude.end());
    }
    Index best = 0;
    double best_score = -1e300;
    for (Index i = 0; i < 12; ++i) {
      if (std::find(exclude.begin(), exclude.end(), i) != exclude.end()) {
        continue;
      }
      const double s = predict(u, i, toy.params, {}, toy.config).total;
      if (s > best_score) {
        best_score = s;
        best = i;
      }
    }
    EXPECT_EQ(ranked.front(), best);
  }
}

TEST(Evaluate, MacroAverageAndExclusion) {
  // Scores fall with the item index for every user.
  auto toy = id_only(2, 6, 1, 1);
  toy.params.user_table.fill(0.0);
  toy.params.item_table.fill(0.0);
  for (Index u = 0; u < 2; ++u) {
    toy.params.user_table(u, 0) = 1.0;
  }
  for (Index i = 0; i < 6; ++i) {
    toy.params.item_table(i, 0) = 6.0 - i;
  }
  InteractionDataset ds;
  for (const char* u : {"a", "b"}) {
    ds.users.insert(u);
  }
  for (int i = 0; i < 6; ++i) {
    ds.items.insert("i" + std::to_string(i));
  }
  ds.train = {{0}, {5}};
  ds.validation = {{1}, {}};
  ds.test = {{2}, {4}};
  ds.rebuild_known();
  const ItemScorer scorer(toy.params, {}, toy.config);

  // User a: train 0 and val 1 are excluded, so test item 2 ranks first.
  // User b: ranking 0,1,2,3,4 puts 4 at rank 5.
  const auto report = evaluate(ds, scorer, EvalTarget::test, 1);
  ASSERT_EQ(report.num_evaluated_users, 2u);
  EXPECT_EQ(report.recall[0], 1.0);
  EXPECT_EQ(report.recall[1], 0.0);
  EXPECT_EQ(report.mean_recall, 0.5);

  const auto val = evaluate(ds, scorer, EvalTarget::validation, 1);
  EXPECT_EQ(val.num_evaluated_users, 1u);
  EXPECT_EQ(val.mean_recall, 1.0);

  const auto again = evaluate(ds, scorer, EvalTarget::test, 1, 3);
  EXPECT_EQ(again.recall, report.recall);
  EXPECT_EQ(again.ndcg, report.ndcg);

  ds.test = {{}, {}};
  EXPECT_THROW(evaluate(ds, scorer, EvalTarget::test, 1), InvalidInput);
}

TEST(Evaluate, ReportFiles) {
  testutil::TempDir dir;
  EvalReport report;
  report.k = 20;
  report.users = {0, 1};
  report.recall = {1.0, 0.0};
  report.ndcg = {1.0, 0.0};
  report.mean_recall = 0.5;
  report.mean_ndcg = 0.5;
  report.num_evaluated_users = 2;
  IdMap users;
  users.insert("a");
  users.insert("b");
  write_report(report, users, dir / "report.tsv");
  const auto rows = read_tsv(dir / "report.tsv");
  ASSERT_GE(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"metric", "k", "value"}));
  EXPECT_EQ(rows[1][0], "recall");
  EXPECT_EQ(std::stod(rows[1][2]), 0.5);
  const auto detail = read_tsv(user_detail_path(dir / "report.tsv"));
  ASSERT_GE(detail.size(), 2u);
  EXPECT_EQ(detail.back()[0], "b");
}

TEST(Breakdown, TwelveRowsNormalizedPerFactor) {
  testutil::TempDir dir;
  ModelConfig config;
  config.embed_dim = 16;
  config.num_factors = 4;
  config.text_input_dim = 3;
  config.visual_input_dim = 5;
  config.attention_hidden = 4;
  const auto params = ModelParams::initialize(config, 2, 3, 7);
  Tensor text(3, 3, 0.4);
  Tensor visual(3, 5, -0.2);
  const ItemScorer scorer(params, {&text, &visual}, config);
  const auto b = export_breakdown(1, 2, scorer, dir / "b.tsv");
  const auto rows = read_tsv(dir / "b.tsv");
  ASSERT_EQ(rows.size(), 13u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"factor", "modality", "attention", "rating_raw", "rating_normalized"}));
  for (std::size_t k = 0; k < 4; ++k) {
    double sum = 0.0;
    for (std::size_t m = 0; m < 3; ++m) {
      const auto& row = rows[1 + k * 3 + m];
      EXPECT_EQ(row[1], std::string(1, "ITV"[m]));
      EXPECT_NEAR(std::stod(row[2]), b.attention[k][m], 1e-9);
      sum += std::stod(row[4]);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  EXPECT_THROW(export_breakdown(2, 0, scorer, dir / "x.tsv"), InvalidInput);
}

TEST(Breakdown, UsersDifferOnTheSameItem) {
  ModelConfig config;
  config.embed_dim = 8;
  config.num_factors = 2;
  config.text_input_dim = 3;
  config.visual_input_dim = 3;
  config.attention_hidden = 4;
  const auto params = ModelParams::initialize(config, 2, 2, 5);
  Tensor text(2, 3, 0.7);
  Tensor visual(2, 3, -0.3);
  const ItemScorer scorer(params, {&text, &visual}, config);
  const auto a = scorer.breakdown(0, 1);
  const auto b = scorer.breakdown(1, 1);
  EXPECT_NE(a.attention, b.attention);
}
