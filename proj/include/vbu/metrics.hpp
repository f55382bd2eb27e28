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

// Predictive-KL evaluation of unlearned posteriors against a retrained
// reference, and the entropy-reduction measure of how informative the
// erased rows are.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vbu/unlearn.hpp"

namespace vbu {

enum class PredictiveKind { kBernoulli, kCategorical, kGaussianMoments };

struct PredictiveDistribution {
  PredictiveKind kind = PredictiveKind::kBernoulli;
  // Bernoulli: {p(y=0), p(y=1)}; Categorical: one entry per class.
  std::vector<double> probs;
  double mean = 0.0;
  double var = 1.0;
  std::size_t n_theta_samples = 0;

  void validate() const;
};

constexpr std::size_t kDefaultPredictiveSamples = 100;
constexpr std::uint64_t kEvalStream = 0x6576616c;

// Theta-mixture predictive at every row in `ids`. All rows share one set of
// n_samples draws taken from a copy of `rng`, so two posteriors with the same
// noise layout evaluated with the same stream see common noise.
std::vector<PredictiveDistribution> predictive_rows(const Posterior& post, const Model& model,
                                                    const Dataset& data, std::span<const RowId> ids,
                                                    std::size_t n_samples, const RngStream& rng);
// Single input x; `rng` is advanced.
PredictiveDistribution predictive(const Posterior& post, const Model& model,
                                  std::span<const double> x, std::size_t n_samples, RngStream& rng);

// Discrete toy model: exact enumeration and Monte Carlo over states.
PredictiveDistribution discrete_predictive(const DiscreteToyModel& model, std::span<const double> q);
PredictiveDistribution discrete_predictive_mc(const DiscreteToyModel& model, std::span<const double> q,
                                              std::size_t n_samples, RngStream& rng);

// KL[a || b]; exact for discrete kinds, closed-form Gaussian otherwise.
double predictive_kl_point(const PredictiveDistribution& a, const PredictiveDistribution& b);

struct KlSummary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over points
  std::vector<double> per_point;
};

// Mean and spread of KL[pred_candidate || pred_reference] over `ids`, with
// both predictives drawn from the same stream.
KlSummary averaged_kl(const Posterior& candidate, const Posterior& reference, const Model& model,
                      const Dataset& data, std::span<const RowId> ids, std::size_t n_samples,
                      const RngStream& rng);

// H(q_remaining) - H(q_full); exact for Gaussians, Monte Carlo otherwise.
double information_measure(const Posterior& q_remaining, const Posterior& q_full, std::size_t n_mc,
                           RngStream& rng);

// Parameter-space KL[a || b]: closed form for Gaussian pairs, otherwise a
// Monte Carlo estimate under a.
Estimate posterior_kl(const Posterior& a, const Posterior& b, std::size_t n_mc, RngStream& rng);

struct EvalRow {
  std::optional<double> lambda;  // empty for the no-unlearning baseline
  std::string method;            // "eubo", "rkl" or "full"
  bool diverged = false;
  KlSummary erased;
  KlSummary remaining;
  Estimate param_kl;             // KL[candidate || reference]
  std::optional<Posterior> posterior;
  Trace trace;                   // optimizer trace of an unlearning cell
};

struct EvalReport {
  std::uint64_t seed = 0;
  std::size_t n_samples = kDefaultPredictiveSamples;
  std::vector<double> lambdas;
  std::vector<std::string> methods;
  std::optional<double> information;  // H(reference) - H(q_full)
  std::vector<EvalRow> rows;

  const EvalRow& find(std::string_view method, std::optional<double> lambda) const;
};

nlohmann::json eval_report_to_json(const EvalReport& report);
// Header `lambda,method,set,kl_mean,kl_std`. Sets are erased, remaining and,
// for parameter-space KL, posterior. The baseline row has an empty lambda.
std::string eval_report_csv(const EvalReport& report);

// Scores one candidate against the reference on both sides of the partition.
EvalRow evaluate_posterior(const Posterior& candidate, const Posterior& reference, const Model& model,
                           const Dataset& data, const ErasePartition& partition,
                           std::size_t n_samples, std::uint64_t seed);

struct SweepConfig {
  std::vector<double> lambdas{1.0, 1e-5, 1e-9, 1e-20, 0.0};
  std::vector<UnlearnMethod> methods{UnlearnMethod::kEubo, UnlearnMethod::kRkl};
  // Method and lambda are overwritten per cell; the seed is shared by all.
  UnlearnConfig unlearn;
  // Result family; q_full's family when empty.
  std::optional<FamilySpec> family;
  // Sparse GP models use the per-point indicator.
  bool gp_pointwise = true;
  std::size_t n_samples = kDefaultPredictiveSamples;
  std::uint64_t seed = 0;
  std::size_t entropy_mc = 2000;
  // Used only when no reference posterior is supplied.
  TrainConfig retrain;
  std::optional<Posterior> prior;
};

// Runs every (lambda, method) cell plus the baseline and scores each against
// the reference. A diverged cell is reported with infinite KL. Cells run on
// up to worker_count() threads.
EvalReport lambda_sweep(const Posterior& q_full, const Model& model, const Dataset& data,
                        const ErasePartition& partition, const std::optional<Posterior>& reference,
                        const SweepConfig& config);

}  // namespace vbu
