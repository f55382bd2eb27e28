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

// Removing erased rows from a trained posterior. Every routine here takes
// q(theta | D) and the erased rows only; the remaining data is never needed.

#include <limits>
#include <span>
#include <string_view>

#include "json.hpp"
#include "vbu/vi.hpp"

namespace vbu {

enum class UnlearnMethod { kEubo, kRkl };

std::string_view method_name(UnlearnMethod m);
UnlearnMethod parse_method(std::string_view name);

struct UnlearnConfig {
  UnlearnMethod method = UnlearnMethod::kEubo;
  double lambda = 0.0;
  TrainConfig optimizer;
  // Start from q(theta | D); otherwise from the model's default prior.
  bool init_from_full = true;
  // rKL: divide importance weights by their batch mean.
  bool weight_normalization = true;
  // rKL: upper bound on log-weights; infinity disables the cap.
  double log_weight_cap = std::numeric_limits<double>::infinity();
  // Path-derivative KL gradients (EUBO, flows) and the score-function
  // control variate (rKL). Off gives the plain reparameterized gradient.
  bool variance_reduction = true;

  void validate() const;
};

nlohmann::json unlearn_config_to_json(const UnlearnConfig& c);
UnlearnConfig unlearn_config_from_json(const nlohmann::json& j, UnlearnConfig base = {});

// ---------------------------------------------------------------------------
// Exact unlearning by dividing out p(D_e | theta).

struct BetaPosterior {
  double a = 1.0;
  double b = 1.0;
};

BetaPosterior beta_bernoulli_posterior(const BetaBernoulliModel& model, const Dataset& data,
                                       std::span<const RowId> ids);
BetaPosterior exact_unlearn(const BetaBernoulliModel& model, const BetaPosterior& full,
                            const Dataset& data, std::span<const RowId> erased);

// Conjugate posterior of a Gaussian mean under a 1-D Gaussian prior.
Posterior gaussian_mean_posterior(const GaussianMeanModel& model, const Posterior& prior,
                                  const Dataset& data, std::span<const RowId> ids);
Posterior exact_unlearn(const GaussianMeanModel& model, const Posterior& full,
                        const Dataset& data, std::span<const RowId> erased);

// Probability vector over the support.
Vector exact_unlearn(const DiscreteToyModel& model, const Vector& full, const Dataset& data,
                     std::span<const RowId> erased);

// ---------------------------------------------------------------------------
// Adjusted likelihood: p(D_e | theta) where q(theta | D) > lambda * max q,
// and 1 elsewhere. The indicator depends only on the fixed q(theta | D), so
// objectives treat it as locally constant in the variational parameters.

class AdjustedThreshold {
 public:
  AdjustedThreshold(const Posterior& q_full, double lambda);
  bool active(std::span<const double> theta) const;
  double lambda() const { return lambda_; }
  // Whether the indicator can be false anywhere.
  bool never() const { return lambda_ >= 1.0; }
  bool always() const { return lambda_ <= 0.0; }

 private:
  const Posterior* q_full_;
  double lambda_;
  double log_bound_;
};

bool adjusted_indicator(std::span<const double> theta, const Posterior& q_full, double lambda);

// Per-point variant for sparse GPs. With the joint Gaussian
// q(f_x, f_u | D) = q(f_u | D) p(f_x | f_u), the condition
// q(f_x, f_u) > lambda * max_{f_u} q(f_x, f_u) is m^2 < -2 ln lambda for the
// Mahalanobis distance m of f_u under q(f_u | f_x, D).
double gp_conditional_mahalanobis(const SparseGPModel& model, const Posterior& q_full,
                                  std::span<const double> x, std::span<const double> f_u,
                                  double f_x);
bool gp_pointwise_indicator(const SparseGPModel& model, const Posterior& q_full,
                            std::span<const double> x, std::span<const double> f_u, double f_x,
                            double lambda);

// ---------------------------------------------------------------------------
// Objectives.

// E_q~[log p_adj(D_e | theta)] + KL[q~ || q_full]; closed-form KL when both
// are Gaussian.
Estimate eubo_estimate(const Posterior& q_candidate, const Model& model, const Dataset& data,
                       std::span<const RowId> erased, const Posterior& q_full, double lambda,
                       std::size_t n_mc, RngStream& rng);

// E_{q_full}[w(theta) log q~(theta)] with w = 1 / p_adj(D_e | theta),
// unnormalized so that it is unbiased for the exact objective.
Estimate rkl_objective_estimate(const Posterior& q_candidate, const Model& model,
                                const Dataset& data, std::span<const RowId> erased,
                                const Posterior& q_full, double lambda, std::size_t n_mc,
                                RngStream& rng);

// Per-step objectives driven by the optimizer. `pointwise` selects the
// per-point sparse-GP indicator; minibatching over D_e follows
// config.optimizer.minibatch for EUBO only. Referenced arguments must
// outlive the returned objective.
StochasticObjective eubo_objective(const Model& model, const Dataset& data,
                                   std::span<const RowId> erased, const Parameterization& param,
                                   const Posterior& q_full, const UnlearnConfig& config,
                                   bool pointwise = false);
StochasticObjective rkl_objective(const Model& model, const Dataset& data,
                                  std::span<const RowId> erased, const Parameterization& param,
                                  const Posterior& q_full, const UnlearnConfig& config,
                                  bool pointwise = false);

// Whitened by q_full for full Gaussians when config.whiten is set.
Parameterization unlearn_parameterization(const FamilySpec& family, const Posterior& q_full,
                                          const TrainConfig& config);

struct UnlearnResult {
  Posterior posterior;
  Trace trace;
  UnlearnConfig config;
  std::size_t iters = 0;
  double final_objective = 0.0;
};

// {"method", "lambda", "seed", "iters", "final_objective"}.
nlohmann::json unlearn_sidecar(const UnlearnResult& r);

UnlearnResult unlearn_eubo(const Posterior& q_full, const Model& model, const Dataset& data,
                           std::span<const RowId> erased, const FamilySpec& family,
                           const UnlearnConfig& config);
UnlearnResult unlearn_rkl(const Posterior& q_full, const Model& model, const Dataset& data,
                          std::span<const RowId> erased, const FamilySpec& family,
                          const UnlearnConfig& config);
// Dispatches on config.method.
UnlearnResult unlearn(const Posterior& q_full, const Model& model, const Dataset& data,
                      std::span<const RowId> erased, const FamilySpec& family,
                      const UnlearnConfig& config);
// Sparse GP unlearning with the per-point indicator, in q_full's family.
// EUBO draws minibatches of D_e; rKL uses all of D_e every step.
UnlearnResult unlearn_gp_minibatch(const Posterior& q_full, const SparseGPModel& model,
                                   const Dataset& data, std::span<const RowId> erased,
                                   const UnlearnConfig& config);

// ---------------------------------------------------------------------------
// Exact objectives over a discrete model; q vectors are distributions over
// the support.

double discrete_kl(std::span<const double> p, std::span<const double> q);
double discrete_eubo(const DiscreteToyModel& model, std::span<const double> q_candidate,
                     std::span<const double> q_full, const Dataset& data,
                     std::span<const RowId> erased, double lambda);
double discrete_rkl_objective(const DiscreteToyModel& model, std::span<const double> q_candidate,
                              std::span<const double> q_full, const Dataset& data,
                              std::span<const RowId> erased, double lambda);
Estimate discrete_eubo_estimate(const DiscreteToyModel& model, std::span<const double> q_candidate,
                                std::span<const double> q_full, const Dataset& data,
                                std::span<const RowId> erased, double lambda, std::size_t n_mc,
                                RngStream& rng);
Estimate discrete_rkl_estimate(const DiscreteToyModel& model, std::span<const double> q_candidate,
                               std::span<const double> q_full, const Dataset& data,
                               std::span<const RowId> erased, double lambda, std::size_t n_mc,
                               RngStream& rng);

}  // namespace vbu
