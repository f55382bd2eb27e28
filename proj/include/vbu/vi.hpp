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

// Variational training by reparameterized stochastic gradient ascent.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vbu/distributions.hpp"
#include "vbu/models.hpp"

namespace vbu {

struct TrainConfig {
  double learning_rate = 1e-4;
  // When positive, the step size decays geometrically from learning_rate to
  // learning_rate_final over max_iters.
  double learning_rate_final = 0.0;
  double rmsprop_decay = 0.9;
  double rmsprop_eps = 1e-8;
  std::size_t mc_samples = 32;
  std::size_t max_iters = 10000;
  std::size_t minibatch = 0;  // 0: full batch
  // Stop when the mean objective of consecutive windows changes by less
  // than plateau_tol per iteration.
  bool plateau_stop = false;
  double plateau_tol = 1e-6;
  std::size_t plateau_window = 200;
  // Use closed-form expected log-likelihoods for linear-Gaussian models.
  bool analytic_expectations = true;
  // Optimize full Gaussians in coordinates whitened by the reference
  // (the prior when training, q_full when unlearning).
  bool whiten = true;
  // Wall time in traces; off keeps trace files byte-reproducible.
  bool record_time = false;
  std::uint64_t seed = 0;

  void validate() const;
  double step_size(std::size_t iter) const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
// Missing keys keep the values of `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// Maps the optimizer's raw vector to a distribution. Full Gaussians may be
// optimized in whitened coordinates theta = shift + chol * v, where the raw
// vector parameterizes q(v); the implied q(theta) is again a full Gaussian
// and the change of variables is a fixed bijection. This only improves the
// conditioning seen by RMSProp.
struct Parameterization {
  FamilySpec spec;
  bool whitened = false;
  Vector shift;
  Matrix chol;  // lower triangular

  static Parameterization plain(const FamilySpec& spec) { return {spec, false, {}, {}}; }
  // Whitening by the mean and Cholesky factor of a Gaussian reference.
  static Parameterization whitened_by(const FamilySpec& spec, const Posterior& reference);

  std::vector<double> to_raw(const Posterior& q) const;
  Posterior from_raw(std::span<const double> raw, PosteriorMeta meta = {}) const;

  bool gaussian() const {
    return spec.family == Family::kDiagGaussian || spec.family == Family::kFullGaussian;
  }
  template <class T>
  kernels::GaussianParams<T> gaussian_params(std::span<const T> raw) const;
  // Reparameterized draw; optionally also log q(theta).
  template <class T>
  std::vector<T> draw(std::span<const T> raw, std::span<const double> noise, T* log_q) const;
};

// RNG stream ids. Optimizer iteration i uses substream i of its stream.
inline constexpr std::uint64_t kElboStream = 1;
inline constexpr std::uint64_t kEuboStream = 2;
inline constexpr std::uint64_t kRklStream = 3;
inline constexpr std::uint64_t kMinibatchStream = 0x62617463;

// Epoch-wise reshuffled minibatches of row indices [0, n). A batch size of 0
// or >= n means full batch: next() returns an empty span and scale() is 1.
// Rows left over at the end of an epoch are skipped for that epoch.
class MinibatchSchedule {
 public:
  MinibatchSchedule(std::size_t n, std::size_t batch, RngStream rng);
  bool full() const { return batch_ == 0 || batch_ >= n_; }
  double scale() const {
    return full() ? 1.0 : static_cast<double>(n_) / static_cast<double>(batch_);
  }
  std::span<const std::size_t> next();

 private:
  std::size_t n_;
  std::size_t batch_;
  RngStream rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct OptimizerState {
  std::vector<double> v;
  std::size_t iter = 0;
};

enum class Direction { kAscent, kDescent };

// v' = rho v + (1 - rho) g^2; params' = params +/- lr g / (sqrt(v') + eps).
void rmsprop_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                  const TrainConfig& config, Direction direction);

struct TraceRecord {
  std::size_t iter = 0;
  double objective = 0.0;
  double grad_norm = 0.0;
  double seconds = 0.0;
};
using Trace = std::vector<TraceRecord>;
std::string trace_csv(const Trace& trace);

// Builds one stochastic objective on `tape` from the taped raw parameters.
// `rng` is the iteration's private stream.
using StochasticObjective =
    std::function<ad::Var(ad::Tape& tape, std::span<const ad::Var> raw, std::size_t iter,
                          RngStream& rng)>;

struct OptimizeResult {
  std::vector<double> raw;
  Trace trace;
  std::size_t iters = 0;
  double final_objective = 0.0;
};

// Raised when the objective or its gradient stops being finite; carries the
// last finite parameters.
class DivergenceError : public Error {
 public:
  DivergenceError(std::string what, std::vector<double> last_raw, std::size_t iter)
      : Error(ErrorCode::kDiverged, std::move(what)), last_raw_(std::move(last_raw)), iter_(iter) {}
  const std::vector<double>& last_raw() const { return last_raw_; }
  std::size_t iter() const { return iter_; }

 private:
  std::vector<double> last_raw_;
  std::size_t iter_;
};

// RMSProp driver shared by training and unlearning. Iteration i draws its
// noise from RngStream(config.seed, stream).substream(i).
OptimizeResult optimize(std::vector<double> raw, const StochasticObjective& objective,
                        Direction direction, const TrainConfig& config, std::uint64_t stream);

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte Carlo ELBO; the KL term is closed form when q and prior are Gaussian.
Estimate elbo_estimate(const Posterior& q, const Model& model, const Dataset& data,
                       std::span<const RowId> ids, const Posterior& prior, std::size_t n_mc,
                       RngStream& rng);

struct FitResult {
  Posterior posterior;
  Trace trace;
  std::size_t iters = 0;
  double final_objective = 0.0;
};

// Initialization used when fit_elbo is given none: prior mean, marginal
// scale min(prior std, 1), and the prior's correlations for full Gaussians;
// flows start at the diagonal Gaussian with small random hidden weights.
Posterior default_init(const FamilySpec& family, const Posterior& prior, std::uint64_t seed);

// The per-step ELBO estimate maximized by fit_elbo. `model` and `data` must
// outlive the returned objective. Minibatch order advances once per call.
StochasticObjective elbo_objective(const Model& model, const Dataset& data,
                                   std::span<const RowId> ids, const Parameterization& param,
                                   const Posterior& prior, const TrainConfig& config);

// Whitened by `reference` for full Gaussians when config.whiten is set.
Parameterization training_parameterization(const FamilySpec& family, const Posterior& reference,
                                           const TrainConfig& config);

FitResult fit_elbo(const Model& model, const Dataset& data, std::span<const RowId> ids,
                   const FamilySpec& family, const Posterior& prior, const TrainConfig& config,
                   const Posterior* init = nullptr);

// Exact quantities over a discrete model with q a probability vector.
double discrete_log_evidence(const DiscreteToyModel& model, const Dataset& data,
                             std::span<const RowId> ids);
double discrete_elbo(const DiscreteToyModel& model, std::span<const double> q, const Dataset& data,
                     std::span<const RowId> ids);
Estimate discrete_elbo_estimate(const DiscreteToyModel& model, std::span<const double> q,
                                const Dataset& data, std::span<const RowId> ids, std::size_t n_mc,
                                RngStream& rng);
// Categorical draw from a probability vector.
std::size_t sample_categorical(std::span<const double> p, RngStream& rng);

// ---------------------------------------------------------------------------

template <class T>
kernels::GaussianParams<T> Parameterization::gaussian_params(std::span<const T> raw) const {
  kernels::GaussianParams<T> v = gaussian_from_raw<T>(spec, raw);
  if (!whitened) return v;
  const std::size_t d = spec.dim;
  kernels::GaussianParams<T> g;
  g.diagonal = false;
  std::vector<double> row;
  std::vector<T> col;
  for (std::size_t i = 0; i < d; ++i) {
    row.clear();
    for (std::size_t k = 0; k <= i; ++k) {
      row.push_back(chol(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
    }
    g.mean.push_back(shift[static_cast<Eigen::Index>(i)] +
                     ad::dot(std::span<const T>(v.mean.data(), i + 1), std::span<const double>(row)));
  }
  // (L S)_ij = sum_{k=j..i} L_ik S_kj.
  g.factor.reserve(d * (d + 1) / 2);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      if (v.diagonal) {
        g.factor.push_back(chol(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
                           v.factor[j]);
        continue;
      }
      row.clear();
      col.clear();
      for (std::size_t k = j; k <= i; ++k) {
        row.push_back(chol(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
        col.push_back(v.factor[kernels::tri_index(k, j)]);
      }
      g.factor.push_back(ad::dot(std::span<const T>(col), std::span<const double>(row)));
    }
  }
  return g;
}

template <class T>
std::vector<T> Parameterization::draw(std::span<const T> raw, std::span<const double> noise,
                                      T* log_q) const {
  if (!gaussian()) return reparam_draw<T>(spec, raw, noise, log_q);
  const kernels::GaussianParams<T> g = gaussian_params<T>(raw);
  std::vector<T> theta = kernels::gaussian_transform<T>(g, noise);
  if (log_q) {
    double base = 0.0;
    for (std::size_t i = 0; i < spec.dim; ++i) base += noise[i] * noise[i];
    base = -0.5 * base - 0.5 * static_cast<double>(spec.dim) * kernels::kLogTwoPi;
    *log_q = base - kernels::sum_log_diag(g);
  }
  return theta;
}

}  // namespace vbu
