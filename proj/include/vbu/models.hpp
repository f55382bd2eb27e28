// Copyright 2026 The vbunlearn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Likelihood models p(D | theta).

#include <Eigen/Cholesky>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "vbu/dataset.hpp"
#include "vbu/distributions.hpp"

namespace vbu {

// y = phi(x0) . theta + eps with phi(x) = [x^degree, ..., x, 1].
struct LinearRegressionModel {
  std::size_t degree = 3;
  double noise_std = 0.05;
};

// y ~ N(theta, noise_std^2); the conjugate case for exact unlearning checks.
struct GaussianMeanModel {
  double noise_std = 1.0;
};

// Binary: p(y=1) = sigmoid(theta . [x, 1]). Multiclass: softmax over
// num_classes blocks of num_inputs + 1 weights each.
struct LogisticRegressionModel {
  std::size_t num_inputs = 1;
  std::size_t num_classes = 2;
};

// Gamma(shape = theta, rate) observations.
struct GammaShapeModel {
  double rate = 1.0;
};

// log p(y | theta) = log(1 + phi(theta; 2, 1) / phi(theta; 0, 1)), the
// same term for every row.
struct BimodalSyntheticModel {};

// Bernoulli(theta) observations under a Beta prior.
struct BetaBernoulliModel {
  double prior_a = 1.0;
  double prior_b = 1.0;
};

enum class GpKind { kClassifier, kRegressor };

// Sparse GP with fixed inducing inputs; theta = f at the inducing inputs.
// Given theta, f_x ~ N(a_x . theta, c_x) with a_x = K_uu^{-1} k_ux and
// c_x = k_xx - k_xu K_uu^{-1} k_ux. Classifier link: p(y=1 | f) = 1/(1+e^f).
struct SparseGPModel {
  Matrix inducing;     // m x p
  Vector lengthscales; // p; multiplies (x - z), i.e. inverse length-scales
  double signal_var = 1.0;
  GpKind kind = GpKind::kClassifier;
  double noise_std = 0.1;  // regressor only
  Matrix kuu;              // with jitter
  Eigen::LLT<Matrix> kuu_chol;

  // Builds K_uu with jitter 1e-6 * signal_var; throws kNumerical if the
  // Cholesky factorization fails.
  static SparseGPModel create(Matrix inducing, Vector lengthscales, double signal_var,
                              GpKind kind, double noise_std = 0.1);
  double kernel(std::span<const double> x, std::span<const double> z) const;
  std::size_t num_inducing() const { return static_cast<std::size_t>(inducing.rows()); }
};

// Finite parameter set: theta is an index into the support, passed as a
// one-element vector. table(k, y) = p(y | theta_k).
struct DiscreteToyModel {
  Vector prior;
  Matrix table;
};

using Model = std::variant<LinearRegressionModel, GaussianMeanModel, LogisticRegressionModel,
                           GammaShapeModel, BimodalSyntheticModel, BetaBernoulliModel,
                           SparseGPModel, DiscreteToyModel>;

std::string_view model_name(const Model& model);
std::size_t param_dim(const Model& model);
// Prior used when a configuration does not specify one. Sparse GP: the GP
// prior N(0, K_uu).
Posterior default_prior(const Model& model);
// True when E_q[log p(y | theta)] has a closed form for Gaussian q.
bool is_linear_gaussian(const Model& model);

nlohmann::json model_to_json(const Model& model);
Model model_from_json(const nlohmann::json& j);

// Checks that every output lies in the model's domain.
void validate_outputs(const Model& model, const Dataset& data);

// Row features of a sparse GP at input x.
struct GpRowFeatures {
  Vector a;
  double c = 0.0;
};
GpRowFeatures gp_features(const SparseGPModel& model, std::span<const double> x);

struct GpMarginal {
  double mean = 0.0;
  double var = 0.0;
};
// Marginal of f_x under q(f_u) for a Gaussian q over the inducing values.
GpMarginal gp_conditional(const SparseGPModel& model, const Posterior& q_u,
                          std::span<const double> x);
// E_{q(f_u)} E_{p(f_x | f_u)} log N(y; f_x, noise_std^2), in closed form.
double gp_regression_expected_loglik(const SparseGPModel& model, const Posterior& q_u,
                                     std::span<const double> x, double y);

// log p(y | f_x) for a latent value f_x; the derivative in f_x goes to `dlog`.
double gp_point_loglik(const SparseGPModel& model, double f, double y, double* dlog);

// Uniform selection of m training inputs without replacement.
Matrix select_inducing_inputs(const Matrix& inputs, std::size_t m, RngStream& rng);

double log_lik_point(const Model& model, std::span<const double> theta, const Dataset& data,
                     std::size_t row);
double log_lik_set(const Model& model, std::span<const double> theta, const Dataset& data,
                   std::span<const RowId> ids);

// Per-theta predictive distribution of y at one input.
struct ThetaPredictive {
  bool gaussian = false;
  std::vector<double> probs;  // class probabilities when !gaussian
  double mean = 0.0;
  double var = 0.0;
};

// Sufficient statistics of a linear-Gaussian likelihood over a row set. Each
// row contributes E_{f ~ N(a_i . theta, c_i)} log N(y_i; f, noise_var).
struct LinearGaussianStats {
  Matrix a_outer;  // sum a a^T
  Vector a_y;      // sum y a
  double yy = 0.0;
  double c_sum = 0.0;
  double count = 0.0;
  double noise_var = 1.0;
};

// Expected log-likelihood under N(mean, L L^T), exact.
template <class T>
T expected_loglik(const LinearGaussianStats& s, const kernels::GaussianParams<T>& q);

// A model bound to a fixed list of dataset rows, with per-row features
// precomputed. Index k below refers to the k-th bound row.
class Likelihood {
 public:
  Likelihood(const Model& model, const Dataset& data, std::span<const std::size_t> rows);

  const Model& model() const { return *model_; }
  std::size_t size() const { return rows_.size(); }
  std::size_t dim() const { return dim_; }
  double output(std::size_t k) const { return y_[k]; }
  bool linear_gaussian() const { return linear_gaussian_; }

  // log p(y_k | theta); the gradient is added to `grad` when non-null. Sparse
  // GP classifiers integrate f_x by Gauss-Hermite quadrature unless `noise`
  // is given, in which case f_x is drawn jointly (reparameterized).
  double point(std::span<const double> theta, std::size_t k, RngStream* noise,
               double* grad) const;
  // scale * sum over `subset` (all bound rows when empty) of point().
  double total(std::span<const double> theta, std::span<const std::size_t> subset,
               RngStream* noise, double scale, double* grad) const;
  // Taped version of total(): one fused node over theta.
  ad::Var total(std::span<const ad::Var> theta, std::span<const std::size_t> subset,
                RngStream* noise, double scale) const;

  ThetaPredictive predictive(std::span<const double> theta, std::size_t k) const;

  // Requires linear_gaussian().
  LinearGaussianStats stats(std::span<const std::size_t> subset) const;
  // Linear-Gaussian row features (a_k, c_k).
  std::span<const double> features(std::size_t k) const;
  double residual_var(std::size_t k) const { return c_[k]; }

 private:
  const Model* model_;
  std::vector<std::size_t> rows_;
  std::size_t dim_ = 0;
  std::size_t width_ = 0;
  std::vector<double> feat_;  // size() x width_
  std::vector<double> c_;
  std::vector<double> y_;
  bool linear_gaussian_ = false;
};

// Probabilists' Gauss-Hermite rule: sum_i w_i g(z_i) ~ E[g(Z)], Z ~ N(0, 1).
struct Quadrature {
  std::vector<double> nodes;
  std::vector<double> weights;
};
const Quadrature& gauss_hermite(std::size_t n = 32);

// Exact posterior over a discrete model's support.
Vector discrete_posterior(const DiscreteToyModel& model, const Dataset& data,
                          std::span<const RowId> ids);

// ---------------------------------------------------------------------------
// Synthetic generators.

// Two interleaved half-circles: class 0 on the upper unit arc
// (cos t, sin t), class 1 on (1 - cos t, 0.5 - sin t), t evenly spaced on
// [0, pi], plus isotropic Gaussian noise.
Dataset generate_moon(std::size_t n_per_class, double noise_std, std::uint64_t seed);
// y = a x^3 + b x^2 + c x + d + noise with x uniform on input_range.
Dataset generate_cubic(std::size_t n, std::span<const double> coefficients, double noise_std,
                       std::pair<double, double> input_range, std::uint64_t seed);
Dataset generate_gamma(std::size_t n, double shape, double rate, std::uint64_t seed);
// Regression data from a random smooth function on [lo, hi] (random Fourier
// features approximating a squared-exponential GP draw).
Dataset generate_gp_regression(std::size_t n, double lo, double hi, double lengthscale,
                               double signal_var, double noise_std, std::uint64_t seed);
// Logistic-regression data from Gaussian class clusters.
Dataset generate_classification(std::size_t n, std::size_t num_inputs, std::size_t num_classes,
                                double separation, std::uint64_t seed);

// ---------------------------------------------------------------------------

template <class T>
T expected_loglik(const LinearGaussianStats& s, const kernels::GaussianParams<T>& q) {
  const std::size_t d = q.dim();
  // mu^T A mu - 2 b^T mu
  std::vector<T> a_mu;
  a_mu.reserve(d);
  std::vector<double> row(d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = s.a_outer(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    a_mu.push_back(ad::dot(std::span<const T>(q.mean), std::span<const double>(row)));
  }
  std::vector<double> b(s.a_y.begin(), s.a_y.end());
  T quad = ad::dot(std::span<const T>(q.mean), std::span<const T>(a_mu)) -
           2.0 * ad::dot(std::span<const T>(q.mean), std::span<const double>(b));
  // tr(A L L^T) = sum over columns j of l_j^T A l_j.
  std::vector<T> trace_terms;
  if (q.diagonal) {
    for (std::size_t i = 0; i < d; ++i) {
      trace_terms.push_back(s.a_outer(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) *
                            ad::square(q.factor[i]));
    }
  } else {
    std::vector<T> col;
    std::vector<T> a_col;
    for (std::size_t j = 0; j < d; ++j) {
      col.clear();
      for (std::size_t i = j; i < d; ++i) col.push_back(q.factor[kernels::tri_index(i, j)]);
      a_col.clear();
      std::vector<double> sub(d - j);
      for (std::size_t i = j; i < d; ++i) {
        for (std::size_t k = j; k < d; ++k) {
          sub[k - j] = s.a_outer(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        }
        a_col.push_back(ad::dot(std::span<const T>(col), std::span<const double>(sub)));
      }
      trace_terms.push_back(ad::dot(std::span<const T>(col), std::span<const T>(a_col)));
    }
  }
  const T trace = ad::sum(std::span<const T>(trace_terms));
  const double log_norm = -0.5 * s.count * (kernels::kLogTwoPi + std::log(s.noise_var));
  return log_norm - (quad + trace + (s.yy + s.c_sum)) / (2.0 * s.noise_var);
}

}  // namespace vbu
