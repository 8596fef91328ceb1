#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "dmrl/error.hpp"
#include "dmrl/model.hpp"
#include "dmrl/numerics.hpp"
#include "forward_oracle.hpp"

using namespace dmrl;

namespace {

struct Toy {
  ModelConfig config;
  ModelParams params;
  Tensor text;
  Tensor visual;
  ItemFeatures features() const { return {&text, &visual}; }
};

Toy make_toy(std::uint64_t seed,
             std::size_t users = 2,
             std::size_t items = 3,
             std::size_t d = 8,
             std::size_t K = 2,
             AttentionMode mode = AttentionMode::full) {
  Toy toy;
  toy.config.embed_dim = d;
  toy.config.num_factors = K;
  toy.config.text_input_dim = 5;
  toy.config.visual_input_dim = 6;
  toy.config.attention_hidden = 6;
  toy.config.attention_mode = mode;
  toy.params = ModelParams::initialize(toy.config, users, items, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> normal(0.0, 0.5);
  for (auto& [name, t] : toy.params.named_tensors()) {
    for (double& v : t->values()) {
      v = normal(rng);
    }
  }
  toy.text = Tensor(items, 5);
  toy.visual = Tensor(items, 6);
  for (double& v : toy.text.values()) {
    v = normal(rng);
  }
  for (double& v : toy.visual.values()) {
    v = normal(rng);
  }
  return toy;
}

} // namespace

TEST(Chunk, Coordinates) {
  std::vector<double> v(128);
  std::iota(v.begin(), v.end(), 0.0);
  const auto c = chunk(std::span<const double>(v), 1, 4);
  ASSERT_EQ(c.size(), 32u);
  EXPECT_EQ(c.front(), 32.0);
  EXPECT_EQ(c.back(), 63.0);
  const auto whole = chunk(std::span<const double>(v), 0, 1);
  EXPECT_EQ(whole.size(), 128u);
  std::vector<double> joined;
  for (std::size_t k = 0; k < 8; ++k) {
    const auto part = chunk(std::span<const double>(v), k, 8);
    joined.insert(joined.end(), part.begin(), part.end());
  }
  EXPECT_EQ(joined, v);
  EXPECT_THROW(chunk(std::span<const double>(v), 4, 4), InvalidInput);
}

TEST(Refine, ZeroInputZeroBiasGivesZero) {
  auto toy = make_toy(1);
  toy.params.text.b1.fill(0.0);
  toy.params.text.b0.fill(0.0);
  const std::vector<double> zero(5, 0.0);
  for (double v : refine_features(zero, toy.params.text)) {
    EXPECT_EQ(v, 0.0);
  }
}

TEST(Refine, IdentityWeightsPassPositiveInput) {
  RefinementNet net;
  net.w1 = Tensor(3, 3);
  net.w0 = Tensor(3, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    net.w1(i, i) = 1.0;
    net.w0(i, i) = 1.0;
  }
  net.b1 = Tensor(1, 3);
  net.b0 = Tensor(1, 3);
  const std::vector<double> x{0.5, 2.0, 3.25};
  EXPECT_EQ(refine_features(x, net), x);
  EXPECT_THROW(refine_features(std::vector<double>{1.0}, net), InvalidInput);
}

TEST(Refine, MatchesScalarOracle) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal(0.0, 1.0);
  RefinementNet net;
  net.w1 = Tensor(6, 10);
  net.b1 = Tensor(1, 6);
  net.w0 = Tensor(8, 6);
  net.b0 = Tensor(1, 8);
  for (Tensor* t : {&net.w1, &net.b1, &net.w0, &net.b0}) {
    for (double& v : t->values()) {
      v = normal(rng);
    }
  }
  Tensor features(1, 10);
  for (double& v : features.values()) {
    v = normal(rng);
  }
  const auto got = refine_features(features.row(0), net);
  const auto want = oracle::refine(features, 0, net);
  ASSERT_EQ(got.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Attention, ZeroProjectionIsUniform) {
  auto toy = make_toy(2);
  toy.params.attention.proj.fill(0.0);
  const std::vector<double> c(4, 0.3);
  const auto a = attention_weights(c, c, c, c, toy.params.attention, toy.config);
  for (double w : a) {
    EXPECT_NEAR(w, 1.0 / 3.0, 1e-15);
  }
}

TEST(Attention, UserDependenceByMode) {
  auto toy = make_toy(4);
  const std::vector<double> p1{1.0, -0.5, 0.2, 0.7};
  const std::vector<double> p2{-0.8, 0.1, 0.9, -0.3};
  const std::vector<double> q{0.2, 0.2, -0.4, 0.1};
  const std::vector<double> t{0.5, -0.1, 0.0, 0.3};
  const std::vector<double> v{-0.2, 0.6, 0.4, 0.0};
  const auto a1 = attention_weights(p1, q, t, v, toy.params.attention, toy.config);
  const auto a2 = attention_weights(p2, q, t, v, toy.params.attention, toy.config);
  EXPECT_GT(std::abs(a1[0] - a2[0]) + std::abs(a1[1] - a2[1]), 1e-6);
  EXPECT_NEAR(a1[0] + a1[1] + a1[2], 1.0, 1e-12);

  toy.config.attention_mode = AttentionMode::no_user;
  const auto n1 = attention_weights(p1, q, t, v, toy.params.attention, toy.config);
  const auto n2 = attention_weights(p2, q, t, v, toy.params.attention, toy.config);
  EXPECT_EQ(n1, n2);

  toy.config.attention_mode = AttentionMode::no_attention;
  const auto ones = attention_weights(p1, q, t, v, toy.params.attention, toy.config);
  EXPECT_EQ(ones, (std::array<double, 3>{1.0, 1.0, 1.0}));
  toy.config.use_visual = false;
  EXPECT_EQ(attention_weights(p1, q, t, v, toy.params.attention, toy.config), (std::array<double, 3>{1.0, 1.0, 0.0}));
}

TEST(Attention, InactiveModalityIsRenormalized) {
  auto toy = make_toy(5);
  toy.config.use_text = false;
  const std::vector<double> c{0.1, 0.2, 0.3, 0.4};
  const auto a = attention_weights(c, c, c, c, toy.params.attention, toy.config);
  EXPECT_EQ(a[1], 0.0);
  EXPECT_NEAR(a[0] + a[2], 1.0, 1e-12);
  EXPECT_THROW(attention_weights(c, c, std::vector<double>{1.0}, c, toy.params.attention, toy.config), InvalidInput);
}

TEST(ModalityScore, Examples) {
  const std::vector<double> a{1.0, 0.0};
  const std::vector<double> b{0.0, 1.0};
  EXPECT_NEAR(modality_factor_score(a, b, 1.0), std::log(2.0), 1e-15);
  EXPECT_EQ(modality_factor_score(a, a, 0.0), 0.0);
  const std::vector<double> ones{1.0, 1.0};
  EXPECT_NEAR(modality_factor_score(ones, ones, 0.5), 0.5 * std::log1p(std::exp(2.0)), 1e-15);
  EXPECT_NEAR(modality_factor_score(ones, ones, 0.5), 1.0635, 5e-5);
}

TEST(Bpr, Examples) {
  EXPECT_NEAR(bpr_loss(1.3, 1.3), std::log(2.0), 1e-15);
  EXPECT_NEAR(bpr_loss(50.0, 0.0), 0.0, 1e-20);
  EXPECT_NEAR(bpr_loss(0.0, 2.0), std::log1p(std::exp(2.0)), 1e-15);
  EXPECT_NEAR(bpr_loss(0.0, 2.0), 2.1269, 5e-5);
  EXPECT_TRUE(std::isfinite(bpr_loss(0.0, 1000.0)));
  EXPECT_NEAR(bpr_loss_derivative(0.0, 0.0), -0.5, 1e-15);
}

TEST(Predict, IdOnlyK1ReducesToSoftplusDot) {
  ModelConfig config;
  config.embed_dim = 8;
  config.num_factors = 1;
  config.use_text = false;
  config.use_visual = false;
  const auto params = ModelParams::initialize(config, 3, 4, 9);
  for (Index u = 0; u < 3; ++u) {
    for (Index i = 0; i < 4; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        dot += params.user_table(u, j) * params.item_table(i, j);
      }
      const auto b = predict(u, i, params, {}, config);
      EXPECT_NEAR(b.total, std::log1p(std::exp(dot)), 1e-15);
      EXPECT_EQ(b.attention[0][0], 1.0);
    }
  }
}

TEST(Predict, MatchesOracleInEveryMode) {
  for (auto mode : {AttentionMode::full, AttentionMode::no_user, AttentionMode::no_attention}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto toy = make_toy(seed, 2, 3, 8, 2, mode);
      toy.config.use_text = seed % 3 != 0;
      const ItemScorer scorer(toy.params, toy.features(), toy.config);
      for (Index u = 0; u < 2; ++u) {
        for (Index i = 0; i < 3; ++i) {
          const auto want = oracle::predict(u, i, toy.params, toy.features(), toy.config);
          const auto got = predict(u, i, toy.params, toy.features(), toy.config);
          EXPECT_NEAR(got.total, want.total, 1e-10);
          EXPECT_NEAR(scorer.score(u, i), want.total, 1e-10);
          for (std::size_t k = 0; k < 2; ++k) {
            for (std::size_t m = 0; m < 3; ++m) {
              EXPECT_NEAR(got.attention[k][m], want.attention[k][m], 1e-10);
              EXPECT_NEAR(got.partial[k][m], want.partial[k][m], 1e-10);
            }
          }
        }
      }
    }
  }
}

TEST(Predict, BreakdownInvariants) {
  const auto toy = make_toy(11, 4, 6, 16, 4);
  for (Index u = 0; u < 4; ++u) {
    for (Index i = 0; i < 6; ++i) {
      const auto b = predict(u, i, toy.params, toy.features(), toy.config);
      double sum = 0.0;
      for (std::size_t k = 0; k < 4; ++k) {
        double weights = 0.0;
        double factor = 0.0;
        for (std::size_t m = 0; m < 3; ++m) {
          EXPECT_GT(b.attention[k][m], 0.0);
          EXPECT_GE(b.partial[k][m], 0.0);
          weights += b.attention[k][m];
          factor += b.partial[k][m];
        }
        sum += factor;
        EXPECT_NEAR(weights, 1.0, 1e-6);
        EXPECT_EQ(b.factor[k], factor);
      }
      EXPECT_EQ(b.total, sum);
      EXPECT_GT(b.total, 0.0);
    }
  }
  EXPECT_THROW(predict(4, 0, toy.params, toy.features(), toy.config), InvalidInput);
}

TEST(ItemScorer, ScoreAllMatchesPredict) {
  const auto toy = make_toy(12, 3, 7, 8, 2);
  const ItemScorer scorer(toy.params, toy.features(), toy.config);
  std::vector<double> all(7);
  for (Index u = 0; u < 3; ++u) {
    scorer.score_all(u, all);
    for (Index i = 0; i < 7; ++i) {
      EXPECT_NEAR(all[i], predict(u, i, toy.params, toy.features(), toy.config).total, 1e-12);
    }
  }
}

TEST(DisentangleLoss, SingleFactorIsZero) {
  const auto toy = make_toy(13, 4, 5, 8, 1);
  const std::vector<Index> users{0, 1, 2};
  const std::vector<Index> items{0, 1, 2, 3};
  EXPECT_EQ(disentangle_loss(users, items, toy.params, toy.features(), toy.config), 0.0);
}

TEST(DisentangleLoss, DuplicatedChunksGiveOnePerModality) {
  auto toy = make_toy(14, 6, 6, 8, 2);
  toy.config.use_text = false;
  toy.config.use_visual = false;
  for (Tensor* table : {&toy.params.user_table, &toy.params.item_table}) {
    for (std::size_t r = 0; r < table->rows(); ++r) {
      for (std::size_t j = 0; j < 4; ++j) {
        (*table)(r, 4 + j) = (*table)(r, j);
      }
    }
  }
  const std::vector<Index> ids{0, 1, 2, 3, 4, 5};
  EXPECT_NEAR(disentangle_loss(ids, ids, toy.params, toy.features(), toy.config), 2.0, 1e-6);
}

TEST(DisentangleLoss, MatchesPairwiseRecomputation) {
  const auto toy = make_toy(15, 20, 20, 16, 4);
  std::vector<Index> users;
  std::vector<Index> items;
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<Index> pick(0, 19);
  for (int b = 0; b < 16; ++b) {
    users.push_back(pick(rng));
    items.push_back(pick(rng));
  }
  const auto stack = [](const std::vector<std::vector<double>>& rows, std::size_t k) {
    Tensor t(rows.size(), 4);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t j = 0; j < 4; ++j) {
        t(r, j) = rows[r][k * 4 + j];
      }
    }
    return t;
  };
  const auto pair_sum = [&](const std::vector<std::vector<double>>& rows) {
    double s = 0.0;
    int pairs = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t l = k + 1; l < 4; ++l) {
        s += numerics::dcor(stack(rows, k), stack(rows, l));
        ++pairs;
      }
    }
    EXPECT_EQ(pairs, 6);
    return s;
  };
  std::vector<std::vector<double>> p;
  std::vector<std::vector<double>> q;
  std::vector<std::vector<double>> t;
  std::vector<std::vector<double>> v;
  std::vector<bool> seen_u(20);
  std::vector<bool> seen_i(20);
  for (Index u : users) {
    if (!seen_u[u]) {
      seen_u[u] = true;
      const auto row = toy.params.user_table.row(u);
      p.emplace_back(row.begin(), row.end());
    }
  }
  for (Index i : items) {
    if (!seen_i[i]) {
      seen_i[i] = true;
      const auto row = toy.params.item_table.row(i);
      q.emplace_back(row.begin(), row.end());
      t.push_back(oracle::refine(toy.text, i, toy.params.text));
      v.push_back(oracle::refine(toy.visual, i, toy.params.visual));
    }
  }
  const double want = pair_sum(p) + pair_sum(q) + pair_sum(t) + pair_sum(v);
  EXPECT_NEAR(disentangle_loss(users, items, toy.params, toy.features(), toy.config), want, 1e-9);
}

TEST(TotalLoss, SwitchOffAndZeroParameters) {
  auto toy = make_toy(16, 3, 4, 8, 2);
  toy.config.lambda_theta = 0.0;
  toy.config.lambda_d = 0.0;
  const std::vector<Triple> batch{{0, 1, 2}, {1, 0, 3}, {2, 3, 1}};
  const auto terms = loss_terms(batch, toy.params, toy.features(), toy.config);
  double mean = 0.0;
  for (const auto& t : batch) {
    mean += bpr_loss(predict(t.user, t.positive, toy.params, toy.features(), toy.config).total,
                     predict(t.user, t.negative, toy.params, toy.features(), toy.config).total);
  }
  mean /= 3.0;
  EXPECT_NEAR(terms.total, mean, 1e-12);
  EXPECT_NEAR(terms.bpr, mean, 1e-12);

  auto zero = toy;
  zero.params = toy.params.zeros_like();
  zero.config.lambda_theta = 0.1;
  zero.config.lambda_d = 0.1;
  const auto z = loss_terms(batch, zero.params, zero.features(), zero.config);
  EXPECT_NEAR(z.bpr, std::log(2.0), 1e-15);
  EXPECT_EQ(z.l2, 0.0);
}

TEST(TotalLoss, ValueMatchesLossTermsAndIdentity) {
  auto toy = make_toy(17, 3, 4, 8, 2);
  toy.config.lambda_theta = 0.05;
  toy.config.lambda_d = 0.3;
  const std::vector<Triple> batch{{0, 1, 2}, {1, 0, 3}, {2, 3, 1}, {0, 2, 3}};
  const auto full = total_loss(batch, toy.params, toy.features(), toy.config);
  const auto terms = loss_terms(batch, toy.params, toy.features(), toy.config);
  EXPECT_EQ(full.terms.total, terms.total);
  EXPECT_NEAR(terms.total, terms.bpr + 0.05 * terms.l2 + 0.3 * terms.ld, 1e-12);
  EXPECT_GT(terms.ld, 0.0);
}

TEST(TotalLoss, GradientsMatchFiniteDifferences) {
  auto toy = make_toy(18, 2, 3, 8, 2);
  toy.config.lambda_theta = 1e-2;
  toy.config.lambda_d = 0.5;
  const std::vector<Triple> batch{{0, 0, 1}, {0, 2, 1}, {1, 1, 0}, {1, 2, 0}};
  const auto result = total_loss(batch, toy.params, toy.features(), toy.config);
  auto grads = result.gradients.named_tensors();
  auto tensors = toy.params.named_tensors();
  ASSERT_EQ(grads.size(), tensors.size());
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    Tensor* target = tensors[t].second;
    const std::vector<double> point(target->values().begin(), target->values().end());
    const auto f = [&](std::span<const double> v) {
      std::copy(v.begin(), v.end(), target->values().begin());
      const double value = loss_terms(batch, toy.params, toy.features(), toy.config).total;
      std::copy(point.begin(), point.end(), target->values().begin());
      return value;
    };
    EXPECT_LT(numerics::finite_difference_check(f, grads[t].second->values(), point), 1e-4) << tensors[t].first;
  }
}

TEST(TotalLoss, NonFiniteInputNamesTheTerm) {
  auto toy = make_toy(19, 2, 3, 8, 2);
  toy.params.user_table(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const std::vector<Triple> batch{{0, 0, 1}, {1, 1, 2}};
  EXPECT_THROW(total_loss(batch, toy.params, toy.features(), toy.config), NonFiniteError);
}

TEST(ModelConfig, Validation) {
  ModelConfig config;
  config.use_text = false;
  config.use_visual = false;
  EXPECT_NO_THROW(config.validate());
  config.num_factors = 3;
  EXPECT_THROW(config.validate(), ConfigError);
  config.num_factors = 4;
  config.lambda_d = -1.0;
  EXPECT_THROW(config.validate(), ConfigError);
  EXPECT_EQ(parse_attention_mode("no_user"), AttentionMode::no_user);
  EXPECT_THROW(parse_attention_mode("bogus"), ConfigError);
  EXPECT_EQ(to_string(AttentionMode::no_attention), "no_attention");
}

TEST(ModelParams, InitializeShapes) {
  ModelConfig config;
  config.text_input_dim = 30;
  config.visual_input_dim = 4096;
  const auto params = ModelParams::initialize(config, 5, 7, 1);
  EXPECT_EQ(params.user_table.rows(), 5u);
  EXPECT_EQ(params.item_table.cols(), 128u);
  EXPECT_EQ(params.text.w1.rows(), config.resolved_text_hidden());
  EXPECT_EQ(config.resolved_visual_hidden(), 724u);
  EXPECT_EQ(params.attention.w.cols(), 4u * 32u);
  EXPECT_EQ(params.attention.proj.rows(), 3u);
  for (double v : params.text.b1.values()) {
    EXPECT_EQ(v, 0.0);
  }
}
