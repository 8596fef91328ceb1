#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dmrl/tensor.hpp"

namespace dmrl::numerics {

/// Added under the square root of every Euclidean distance so that the
/// distance (and hence dCor) stays differentiable at coincident points.
inline constexpr double kDistanceEpsilon = 1e-12;

/// dCor is defined as 0 (with zero gradient) when sqrt(dVar_X * dVar_Y)
/// falls below this value.
inline constexpr double kDenominatorEpsilon = 1e-10;

inline constexpr double kLeakyReluSlope = 0.01;

// ---------------------------------------------------------------------------
// Distance correlation
// ---------------------------------------------------------------------------

/// Smoothed pairwise Euclidean distances between the rows of `x`.
/// Requires at least two rows and finite entries.
Tensor pairwise_distance_matrix(const Tensor& x);

/// A - rowmean - colmean + grandmean. Output rows and columns sum to zero.
Tensor double_center(const Tensor& d);

/// Squared sample distance covariance of two double-centered matrices,
/// clamped at zero.
double dcov2(const Tensor& a, const Tensor& b);

/// Distance matrix of one sample together with its double-centered form.
/// Building this once per sample lets pairwise dCor terms share the O(n^2)
/// work.
struct CenteredDistances {
  Tensor distances;
  Tensor centered;
  double dvar2 = 0.0; ///< dcov2(centered, centered)
};

CenteredDistances center_distances(const Tensor& x);

double dcor(const CenteredDistances& x, const CenteredDistances& y);

/// Sample distance correlation in [0, 1]. Returns 0 for degenerate samples.
double dcor(const Tensor& x, const Tensor& y);

/// Accumulates `weight * d dcor / d D` into the two distance-gradient
/// accumulators (each n×n) and returns dcor(x, y).
double accumulate_dcor_distance_gradient(const CenteredDistances& x,
                                         const CenteredDistances& y,
                                         double weight,
                                         Tensor& distance_grad_x,
                                         Tensor& distance_grad_y);

/// Chain rule from a gradient with respect to a (symmetric) distance matrix
/// down to the sample coordinates. Adds into `sample_grad`.
void distance_gradient_to_samples(const Tensor& x,
                                  const Tensor& distances,
                                  const Tensor& distance_grad,
                                  Tensor& sample_grad);

struct DcorGradient {
  double value = 0.0;
  Tensor grad_x;
  Tensor grad_y;
};

DcorGradient dcor_gradient(const Tensor& x, const Tensor& y);

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

double sigmoid(double x);
double softplus(double x);
inline double softplus_derivative(double x) { return sigmoid(x); }
/// ln sigmoid(x), overflow-safe.
double log_sigmoid(double x);
/// tanh through a single exp; absolute error below 3e-16.
double tanh(double x);
double tanh_derivative(double x);
double leaky_relu(double x, double slope = kLeakyReluSlope);
double leaky_relu_derivative(double x, double slope = kLeakyReluSlope);

std::vector<double> softmax(std::span<const double> logits);

// ---------------------------------------------------------------------------
// Initialization and optimization
// ---------------------------------------------------------------------------

/// Uniform Glorot initialization over ±sqrt(6 / (rows + cols)).
Tensor xavier_init(std::size_t rows, std::size_t cols, std::uint64_t seed);

struct AdamState {
  Tensor first_moment;
  Tensor second_moment;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 1e-4;

  static AdamState for_shape(std::size_t rows, std::size_t cols, double learning_rate = 1e-4);
};

/// One bias-corrected Adam update. Throws InvalidInput on a shape mismatch
/// or a non-finite gradient (the parameter is left untouched in that case).
void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Relative error |fd - an| / max(1e-8, |fd| + |an|).
double relative_error(double finite_difference, double analytic);

/// Central-difference check of `analytic_grad` at `point`. Returns the
/// maximum per-coordinate relative error.
double finite_difference_check(const ScalarFunction& f,
                               std::span<const double> analytic_grad,
                               std::span<const double> point,
                               double h = 1e-5);

} // namespace dmrl::numerics
