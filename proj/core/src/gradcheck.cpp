#include "dmrl/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <random>

#include "dmrl/model.hpp"
#include "dmrl/numerics.hpp"

namespace dmrl {

namespace num = dmrl::numerics;

namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(rows, cols);
  for (double& v : t.values()) {
    v = normal(rng);
  }
  return t;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) {
    x = normal(rng);
  }
  return v;
}

class Checker {
public:
  explicit Checker(double step) : step_(step) {}

  // Perturbs `values` in place through `f` and compares against `analytic`.
  void check(const std::string& name,
             std::span<double> values,
             std::span<const double> analytic,
             const std::function<double()>& f) {
    const std::vector<double> original(values.begin(), values.end());
    const auto wrapped = [&](std::span<const double> x) {
      std::copy(x.begin(), x.end(), values.begin());
      return f();
    };
    const double err = num::finite_difference_check(wrapped, analytic, original, step_);
    std::copy(original.begin(), original.end(), values.begin());
    report_.entries.push_back({name, values.size(), err});
    report_.max_error = std::max(report_.max_error, err);
  }

  GradcheckReport take() { return std::move(report_); }

private:
  double step_;
  GradcheckReport report_;
};

ModelConfig toy_config(AttentionMode mode) {
  ModelConfig c;
  c.embed_dim = 8;
  c.num_factors = 2;
  c.text_input_dim = 5;
  c.visual_input_dim = 6;
  c.attention_hidden = 6;
  c.lambda_theta = 1e-2;
  c.lambda_d = 0.5;
  c.attention_mode = mode;
  return c;
}

void check_refinement(Checker& checker, std::mt19937_64& rng) {
  RefinementNet net{random_tensor(6, 5, rng, 0.5), random_tensor(1, 6, rng, 0.1), random_tensor(8, 6, rng, 0.5),
                    random_tensor(1, 8, rng, 0.1)};
  auto input = random_vector(5, rng);
  const auto weights = random_vector(8, rng);
  const auto f = [&] {
    const auto out = refine_features(input, net);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      s += weights[i] * out[i];
    }
    return s;
  };
  RefinementNet grad{Tensor(6, 5), Tensor(1, 6), Tensor(8, 6), Tensor(1, 8)};
  std::vector<double> grad_input(5, 0.0);
  refine_backward(refine_forward(input, net), weights, net, grad, grad_input);
  checker.check("refine_features/input", input, grad_input, f);
  checker.check("refine_features/w1", net.w1.values(), grad.w1.values(), f);
  checker.check("refine_features/b1", net.b1.values(), grad.b1.values(), f);
  checker.check("refine_features/w0", net.w0.values(), grad.w0.values(), f);
  checker.check("refine_features/b0", net.b0.values(), grad.b0.values(), f);
}

void check_attention(Checker& checker, std::mt19937_64& rng, AttentionMode mode, const std::string& label) {
  const auto config = toy_config(mode);
  const std::size_t c = config.chunk_size();
  const std::size_t h = config.attention_hidden;
  AttentionNet net{random_tensor(h, 4 * c, rng, 0.5), random_tensor(1, h, rng, 0.1), random_tensor(3, h, rng, 0.5)};
  auto input = random_vector(4 * c, rng);
  const auto coef = random_vector(kNumModalities, rng);
  const auto block = [&](std::size_t b) { return std::span<const double>(input).subspan(b * c, c); };
  const auto f = [&] {
    const auto w = attention_weights(block(0), block(1), block(2), block(3), net, config);
    return coef[0] * w[0] + coef[1] * w[1] + coef[2] * w[2];
  };
  AttentionNet grad{Tensor(h, 4 * c), Tensor(1, h), Tensor(3, h)};
  std::vector<double> grad_input(4 * c, 0.0);
  const auto trace = attention_forward(block(0), block(1), block(2), block(3), net, config);
  attention_backward(trace, {coef[0], coef[1], coef[2]}, net, config, grad, grad_input);
  checker.check("attention/" + label + "/input", input, grad_input, f);
  checker.check("attention/" + label + "/w", net.w.values(), grad.w.values(), f);
  checker.check("attention/" + label + "/b", net.b.values(), grad.b.values(), f);
  checker.check("attention/" + label + "/proj", net.proj.values(), grad.proj.values(), f);
}

void check_factor_score(Checker& checker, std::mt19937_64& rng) {
  auto p = random_vector(4, rng);
  auto q = random_vector(4, rng);
  std::vector<double> a{0.7};
  const auto f = [&] { return modality_factor_score(p, q, a[0]); };
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    d += p[i] * q[i];
  }
  std::vector<double> gp(4);
  std::vector<double> gq(4);
  for (std::size_t i = 0; i < 4; ++i) {
    gp[i] = a[0] * num::sigmoid(d) * q[i];
    gq[i] = a[0] * num::sigmoid(d) * p[i];
  }
  const std::vector<double> ga{num::softplus(d)};
  checker.check("modality_factor_score/user", p, gp, f);
  checker.check("modality_factor_score/item", q, gq, f);
  checker.check("modality_factor_score/weight", a, ga, f);
}

void check_bpr(Checker& checker, std::mt19937_64& rng) {
  auto r = random_vector(2, rng, 2.0);
  const auto f = [&] { return bpr_loss(r[0], r[1]); };
  const double g = bpr_loss_derivative(r[0], r[1]);
  const std::vector<double> analytic{g, -g};
  checker.check("bpr_loss", r, analytic, f);
}

void check_dcor(Checker& checker, std::mt19937_64& rng) {
  auto x = random_tensor(6, 3, rng);
  auto y = random_tensor(6, 2, rng);
  // Make the pair dependent so the gradient is not dominated by noise.
  for (std::size_t i = 0; i < 6; ++i) {
    y(i, 0) += x(i, 0);
  }
  const auto f = [&] { return num::dcor(x, y); };
  const auto g = num::dcor_gradient(x, y);
  checker.check("dcor/x", x.values(), g.grad_x.values(), f);
  checker.check("dcor/y", y.values(), g.grad_y.values(), f);
}

void check_total_loss(Checker& checker, std::uint64_t seed, AttentionMode mode, const std::string& label) {
  const auto config = toy_config(mode);
  auto params = ModelParams::initialize(config, 2, 3, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  // Non-zero biases so every bias gradient is exercised away from 0.
  for (auto& [name, t] : params.named_tensors()) {
    if (name.ends_with(".b") || name.ends_with(".b0") || name.ends_with(".b1")) {
      for (double& v : t->values()) {
        v = std::normal_distribution<double>(0.0, 0.1)(rng);
      }
    }
  }
  const auto text = random_tensor(3, config.text_input_dim, rng);
  const auto visual = random_tensor(3, config.visual_input_dim, rng);
  const ItemFeatures features{&text, &visual};
  const std::vector<Triple> batch{{0, 0, 1}, {0, 2, 1}, {1, 1, 0}, {1, 2, 0}};

  const auto result = total_loss(batch, params, features, config);
  const auto f = [&] { return loss_terms(batch, params, features, config).total; };
  auto slots = params.named_tensors();
  const auto grads = result.gradients.named_tensors();
  for (std::size_t t = 0; t < slots.size(); ++t) {
    checker.check("total_loss/" + label + "/" + slots[t].first, slots[t].second->values(),
                  grads[t].second->values(), f);
  }
}

} // namespace

GradcheckReport run_gradcheck(std::uint64_t seed, double step) {
  const auto started = std::chrono::steady_clock::now();
  Checker checker(step);
  std::mt19937_64 rng(seed);
  check_refinement(checker, rng);
  check_attention(checker, rng, AttentionMode::full, "full");
  check_attention(checker, rng, AttentionMode::no_user, "no_user");
  check_factor_score(checker, rng);
  check_bpr(checker, rng);
  check_dcor(checker, rng);
  check_total_loss(checker, seed, AttentionMode::full, "full");
  check_total_loss(checker, seed, AttentionMode::no_user, "no_user");
  check_total_loss(checker, seed, AttentionMode::no_attention, "no_attention");
  auto report = checker.take();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

} // namespace dmrl
