#include "dmrl/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "dmrl/error.hpp"

namespace dmrl::numerics {

namespace {

void require_square(const Tensor& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw InvalidInput(std::string(what) + ": expected a square matrix");
  }
}

} // namespace

Tensor pairwise_distance_matrix(const Tensor& x) {
  const std::size_t n = x.rows();
  if (n < 2) {
    throw InvalidInput("pairwise_distance_matrix: need at least two samples");
  }
  for (double v : x.values()) {
    if (!std::isfinite(v)) {
      throw InvalidInput("pairwise_distance_matrix: non-finite sample value");
    }
  }
  Tensor d(n, n);
  const double diagonal = std::sqrt(kDistanceEpsilon);
  for (std::size_t j = 0; j < n; ++j) {
    d(j, j) = diagonal;
    const auto xj = x.row(j);
    for (std::size_t k = j + 1; k < n; ++k) {
      const auto xk = x.row(k);
      double sq = 0.0;
      for (std::size_t c = 0; c < xj.size(); ++c) {
        const double diff = xj[c] - xk[c];
        sq += diff * diff;
      }
      const double dist = std::sqrt(sq + kDistanceEpsilon);
      d(j, k) = dist;
      d(k, j) = dist;
    }
  }
  return d;
}

Tensor double_center(const Tensor& d) {
  require_square(d, "double_center");
  const std::size_t n = d.rows();
  std::vector<double> row_mean(n, 0.0);
  std::vector<double> col_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      row_mean[j] += d(j, k);
      col_mean[k] += d(j, k);
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    grand += row_mean[j];
    row_mean[j] /= static_cast<double>(n);
    col_mean[j] /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n * n);

  Tensor a(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      a(j, k) = d(j, k) - row_mean[j] - col_mean[k] + grand;
    }
  }
  return a;
}

double dcov2(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw InvalidInput("dcov2: sample count mismatch");
  }
  require_square(a, "dcov2");
  const auto av = a.values();
  const auto bv = b.values();
  double sum = 0.0;
  for (std::size_t idx = 0; idx < av.size(); ++idx) {
    sum += av[idx] * bv[idx];
  }
  const double n = static_cast<double>(a.rows());
  return std::max(0.0, sum / (n * n));
}

CenteredDistances center_distances(const Tensor& x) {
  CenteredDistances out;
  out.distances = pairwise_distance_matrix(x);
  out.centered = double_center(out.distances);
  out.dvar2 = dcov2(out.centered, out.centered);
  return out;
}

double dcor(const CenteredDistances& x, const CenteredDistances& y) {
  if (x.centered.rows() != y.centered.rows()) {
    throw InvalidInput("dcor: sample count mismatch");
  }
  const double denominator = std::sqrt(std::sqrt(x.dvar2) * std::sqrt(y.dvar2));
  if (denominator < kDenominatorEpsilon) {
    return 0.0;
  }
  const double cov2 = dcov2(x.centered, y.centered);
  return std::sqrt(cov2) / denominator;
}

double dcor(const Tensor& x, const Tensor& y) {
  if (x.rows() != y.rows()) {
    throw InvalidInput("dcor: sample count mismatch");
  }
  return dcor(center_distances(x), center_distances(y));
}

double accumulate_dcor_distance_gradient(const CenteredDistances& x,
                                         const CenteredDistances& y,
                                         double weight,
                                         Tensor& distance_grad_x,
                                         Tensor& distance_grad_y) {
  const double value = dcor(x, y);
  if (value <= 0.0) {
    return value;
  }
  const std::size_t n = x.centered.rows();
  if (!distance_grad_x.same_shape(x.centered) || !distance_grad_y.same_shape(y.centered)) {
    throw InvalidInput("accumulate_dcor_distance_gradient: accumulator shape mismatch");
  }
  // log dcor = 1/2 log V_xy - 1/4 log V_xx - 1/4 log V_yy, and
  // dV_xy/dD_x = B/n^2, dV_xx/dD_x = 2A/n^2 for centered A, B.
  const double cov2 = dcov2(x.centered, y.centered);
  const double n2 = static_cast<double>(n * n);
  const double cross = weight * value * 0.5 / (n2 * cov2);
  const double self_x = weight * value * 0.5 / (n2 * x.dvar2);
  const double self_y = weight * value * 0.5 / (n2 * y.dvar2);

  const auto a = x.centered.values();
  const auto b = y.centered.values();
  auto gx = distance_grad_x.values();
  auto gy = distance_grad_y.values();
  for (std::size_t idx = 0; idx < a.size(); ++idx) {
    gx[idx] += cross * b[idx] - self_x * a[idx];
    gy[idx] += cross * a[idx] - self_y * b[idx];
  }
  return value;
}

void distance_gradient_to_samples(const Tensor& x,
                                  const Tensor& distances,
                                  const Tensor& distance_grad,
                                  Tensor& sample_grad) {
  const std::size_t n = x.rows();
  const std::size_t dim = x.cols();
  if (!sample_grad.same_shape(x)) {
    throw InvalidInput("distance_gradient_to_samples: gradient shape mismatch");
  }
  for (std::size_t j = 0; j < n; ++j) {
    const auto xj = x.row(j);
    auto gj = sample_grad.row(j);
    for (std::size_t k = j + 1; k < n; ++k) {
      // D is symmetric, so entries (j,k) and (k,j) both depend on the pair.
      const double coef = (distance_grad(j, k) + distance_grad(k, j)) / distances(j, k);
      if (coef == 0.0) {
        continue;
      }
      const auto xk = x.row(k);
      auto gk = sample_grad.row(k);
      for (std::size_t c = 0; c < dim; ++c) {
        const double step = coef * (xj[c] - xk[c]);
        gj[c] += step;
        gk[c] -= step;
      }
    }
  }
}

DcorGradient dcor_gradient(const Tensor& x, const Tensor& y) {
  if (x.rows() != y.rows()) {
    throw InvalidInput("dcor_gradient: sample count mismatch");
  }
  const auto cx = center_distances(x);
  const auto cy = center_distances(y);
  const std::size_t n = x.rows();
  Tensor gdx(n, n);
  Tensor gdy(n, n);
  DcorGradient out;
  out.value = accumulate_dcor_distance_gradient(cx, cy, 1.0, gdx, gdy);
  out.grad_x = Tensor(x.rows(), x.cols());
  out.grad_y = Tensor(y.rows(), y.cols());
  distance_gradient_to_samples(x, cx.distances, gdx, out.grad_x);
  distance_gradient_to_samples(y, cy.distances, gdy, out.grad_y);
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 30.0) {
    return x + std::log1p(std::exp(-x));
  }
  return std::log1p(std::exp(x));
}

double log_sigmoid(double x) {
  return -softplus(-x);
}

double tanh(double x) {
  const double t = std::exp(-2.0 * std::abs(x));
  return std::copysign((1.0 - t) / (1.0 + t), x);
}

double tanh_derivative(double x) {
  const double t = tanh(x);
  return 1.0 - t * t;
}

double leaky_relu(double x, double slope) {
  return x > 0.0 ? x : slope * x;
}

double leaky_relu_derivative(double x, double slope) {
  return x > 0.0 ? 1.0 : slope;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) {
    throw InvalidInput("softmax: empty logits");
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - top);
    total += out[i];
  }
  for (double& v : out) {
    v /= total;
  }
  return out;
}

Tensor xavier_init(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (rows == 0 || cols == 0) {
    throw InvalidInput("xavier_init: zero dimension");
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(rows, cols);
  for (double& v : t.values()) {
    v = dist(rng);
  }
  return t;
}

AdamState AdamState::for_shape(std::size_t rows, std::size_t cols, double learning_rate) {
  AdamState s;
  s.first_moment = Tensor(rows, cols);
  s.second_moment = Tensor(rows, cols);
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state) {
  if (param.size() != grad.size() || param.size() != state.first_moment.size() ||
      param.size() != state.second_moment.size()) {
    throw InvalidInput("adam_step: shape mismatch");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) {
      throw InvalidInput("adam_step: non-finite gradient");
    }
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  auto m = state.first_moment.values();
  auto v = state.second_moment.values();
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
    v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / correction1;
    const double v_hat = v[i] / correction2;
    param[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

double relative_error(double finite_difference, double analytic) {
  const double scale = std::max(1e-8, std::abs(finite_difference) + std::abs(analytic));
  return std::abs(finite_difference - analytic) / scale;
}

double finite_difference_check(const ScalarFunction& f,
                               std::span<const double> analytic_grad,
                               std::span<const double> point,
                               double h) {
  if (analytic_grad.size() != point.size()) {
    throw InvalidInput("finite_difference_check: gradient/point size mismatch");
  }
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = x[i];
    x[i] = original + h;
    const double up = f(x);
    x[i] = original - h;
    const double down = f(x);
    x[i] = original;
    const double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, relative_error(fd, analytic_grad[i]));
  }
  return worst;
}

} // namespace dmrl::numerics
