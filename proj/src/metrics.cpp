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
#include "vbu/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "vbu/json_io.hpp"
#include "vbu/parallel.hpp"

namespace vbu {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::size_t kParamKlSamples = 4000;

PredictiveDistribution mixture(const Likelihood& lik, std::size_t k, const Matrix& theta) {
  PredictiveDistribution out;
  const auto n = static_cast<std::size_t>(theta.rows());
  out.n_theta_samples = n;
  std::vector<double> th(static_cast<std::size_t>(theta.cols()));
  double sum_mean = 0.0;
  double sum_mean2 = 0.0;
  double sum_var = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < th.size(); ++j) {
      th[j] = theta(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j));
    }
    const ThetaPredictive p = lik.predictive(th, k);
    if (p.gaussian) {
      out.kind = PredictiveKind::kGaussianMoments;
      sum_mean += p.mean;
      sum_mean2 += p.mean * p.mean;
      sum_var += p.var;
      continue;
    }
    if (out.probs.empty()) out.probs.assign(p.probs.size(), 0.0);
    for (std::size_t c = 0; c < p.probs.size(); ++c) out.probs[c] += p.probs[c];
  }
  const double inv = 1.0 / static_cast<double>(n);
  if (out.kind == PredictiveKind::kGaussianMoments) {
    out.mean = sum_mean * inv;
    out.var = sum_var * inv + std::max(0.0, sum_mean2 * inv - out.mean * out.mean);
    return out;
  }
  for (auto& p : out.probs) p *= inv;
  out.kind = out.probs.size() == 2 ? PredictiveKind::kBernoulli : PredictiveKind::kCategorical;
  return out;
}

double placeholder_output(const Model& model) {
  return std::holds_alternative<GammaShapeModel>(model) ? 1.0 : 0.0;
}

Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

std::string number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

Json summary_json(const KlSummary& s) {
  return Json{{"mean", finite_or_null(s.mean)},
              {"std", finite_or_null(s.std)},
              {"count", s.per_point.size()}};
}

KlSummary infinite_summary(std::size_t n) {
  return n == 0 ? KlSummary{kNaN, kNaN, {}} : KlSummary{kInf, kNaN, std::vector<double>(n, kInf)};
}

}  // namespace

void PredictiveDistribution::validate() const {
  if (kind == PredictiveKind::kGaussianMoments) {
    require(std::isfinite(mean) && var > 0.0 && std::isfinite(var), ErrorCode::kInvalidArgument,
            "predictive: Gaussian moments need a finite mean and positive variance");
    return;
  }
  require(kind == PredictiveKind::kCategorical || probs.size() == 2, ErrorCode::kInvalidArgument,
          "predictive: a Bernoulli needs two probabilities");
  require(!probs.empty(), ErrorCode::kInvalidArgument, "predictive: no probabilities");
  double total = 0.0;
  for (double p : probs) {
    require(p >= 0.0 && p <= 1.0, ErrorCode::kInvalidArgument, "predictive: probability outside [0, 1]");
    total += p;
  }
  require(std::abs(total - 1.0) < 1e-9, ErrorCode::kInvalidArgument,
          "predictive: probabilities do not sum to one");
}

std::vector<PredictiveDistribution> predictive_rows(const Posterior& post, const Model& model,
                                                    const Dataset& data, std::span<const RowId> ids,
                                                    std::size_t n_samples, const RngStream& rng) {
  require(n_samples >= 1, ErrorCode::kInvalidArgument, "predictive: n_samples must be at least 1");
  require(post.dim() == param_dim(model), ErrorCode::kDimensionMismatch,
          "predictive: posterior dimension differs from the model");
  const auto rows = data.rows_of(ids);
  const Likelihood lik(model, data, rows);
  RngStream r = rng;
  const Draws draws = sample(post, n_samples, r);
  std::vector<PredictiveDistribution> out;
  out.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) out.push_back(mixture(lik, k, draws.theta));
  return out;
}

PredictiveDistribution predictive(const Posterior& post, const Model& model,
                                  std::span<const double> x, std::size_t n_samples, RngStream& rng) {
  Matrix input(1, static_cast<Eigen::Index>(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) input(0, static_cast<Eigen::Index>(j)) = x[j];
  const Dataset one(std::move(input), Vector::Constant(1, placeholder_output(model)));
  auto out = predictive_rows(post, model, one, one.ids(), n_samples, rng);
  // Consume the draws from the caller's stream as well.
  (void)sample(post, n_samples, rng);
  return std::move(out.front());
}

PredictiveDistribution discrete_predictive(const DiscreteToyModel& model, std::span<const double> q) {
  require(q.size() == static_cast<std::size_t>(model.prior.size()), ErrorCode::kDimensionMismatch,
          "discrete_predictive: q has the wrong support size");
  PredictiveDistribution out;
  out.probs.assign(static_cast<std::size_t>(model.table.cols()), 0.0);
  for (std::size_t s = 0; s < q.size(); ++s) {
    for (std::size_t y = 0; y < out.probs.size(); ++y) {
      out.probs[y] += q[s] * model.table(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(y));
    }
  }
  out.kind = out.probs.size() == 2 ? PredictiveKind::kBernoulli : PredictiveKind::kCategorical;
  out.n_theta_samples = 0;
  return out;
}

PredictiveDistribution discrete_predictive_mc(const DiscreteToyModel& model, std::span<const double> q,
                                              std::size_t n_samples, RngStream& rng) {
  require(q.size() == static_cast<std::size_t>(model.prior.size()), ErrorCode::kDimensionMismatch,
          "discrete_predictive: q has the wrong support size");
  require(n_samples >= 1, ErrorCode::kInvalidArgument, "predictive: n_samples must be at least 1");
  PredictiveDistribution out;
  out.probs.assign(static_cast<std::size_t>(model.table.cols()), 0.0);
  for (std::size_t i = 0; i < n_samples; ++i) {
    double u = rng.uniform();
    std::size_t s = 0;
    while (s + 1 < q.size() && u >= q[s]) u -= q[s++];
    for (std::size_t y = 0; y < out.probs.size(); ++y) {
      out.probs[y] += model.table(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(y));
    }
  }
  for (auto& p : out.probs) p /= static_cast<double>(n_samples);
  out.kind = out.probs.size() == 2 ? PredictiveKind::kBernoulli : PredictiveKind::kCategorical;
  out.n_theta_samples = n_samples;
  return out;
}

double predictive_kl_point(const PredictiveDistribution& a, const PredictiveDistribution& b) {
  require(a.kind == b.kind, ErrorCode::kInvalidArgument, "predictive_kl: distributions of different kinds");
  if (a.kind == PredictiveKind::kGaussianMoments) {
    require(a.var > 0.0 && b.var > 0.0, ErrorCode::kInvalidArgument, "predictive_kl: non-positive variance");
    const double d = a.mean - b.mean;
    return 0.5 * (std::log(b.var / a.var) + (a.var + d * d) / b.var - 1.0);
  }
  require(a.probs.size() == b.probs.size(), ErrorCode::kInvalidArgument,
          "predictive_kl: supports differ in size");
  double kl = 0.0;
  for (std::size_t i = 0; i < a.probs.size(); ++i) {
    if (a.probs[i] <= 0.0) continue;
    if (b.probs[i] <= 0.0) return kInf;
    kl += a.probs[i] * (std::log(a.probs[i]) - std::log(b.probs[i]));
  }
  return std::max(kl, 0.0);
}

KlSummary averaged_kl(const Posterior& candidate, const Posterior& reference, const Model& model,
                      const Dataset& data, std::span<const RowId> ids, std::size_t n_samples,
                      const RngStream& rng) {
  require(!ids.empty(), ErrorCode::kInvalidArgument, "averaged_kl: empty id set");
  const auto a = predictive_rows(candidate, model, data, ids, n_samples, rng);
  const auto b = predictive_rows(reference, model, data, ids, n_samples, rng);
  KlSummary out;
  out.per_point.resize(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out.per_point[k] = predictive_kl_point(a[k], b[k]);
  double sum = 0.0;
  for (double v : out.per_point) sum += v;
  out.mean = sum / static_cast<double>(a.size());
  double ss = 0.0;
  for (double v : out.per_point) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(a.size()));
  return out;
}

double information_measure(const Posterior& q_remaining, const Posterior& q_full, std::size_t n_mc,
                           RngStream& rng) {
  require(q_remaining.dim() == q_full.dim(), ErrorCode::kDimensionMismatch,
          "information_measure: dimension mismatch");
  const double h_r = entropy(q_remaining, n_mc, rng).value;
  const double h_f = entropy(q_full, n_mc, rng).value;
  return h_r - h_f;
}

Estimate posterior_kl(const Posterior& a, const Posterior& b, std::size_t n_mc, RngStream& rng) {
  require(a.dim() == b.dim(), ErrorCode::kDimensionMismatch, "posterior_kl: dimension mismatch");
  if (a.is_gaussian() && b.is_gaussian()) return {kl_gaussian(a, b), 0.0};
  const Draws d = sample(a, n_mc, rng);
  std::vector<double> th(a.dim());
  double sum = 0.0;
  double sum2 = 0.0;
  for (Eigen::Index s = 0; s < d.theta.rows(); ++s) {
    for (std::size_t j = 0; j < th.size(); ++j) th[j] = d.theta(s, static_cast<Eigen::Index>(j));
    const double v = log_density(a, th) - log_density(b, th);
    sum += v;
    sum2 += v * v;
  }
  const double n = static_cast<double>(n_mc);
  const double mean = sum / n;
  return {mean, std::sqrt(std::max(0.0, sum2 / n - mean * mean) / n)};
}

const EvalRow& EvalReport::find(std::string_view method, std::optional<double> lambda) const {
  for (const auto& r : rows) {
    if (r.method == method && r.lambda == lambda) return r;
  }
  fail(ErrorCode::kInvalidArgument, "eval report: no row for method '" + std::string(method) + "'");
}

Json eval_report_to_json(const EvalReport& report) {
  Json rows = Json::array();
  for (const auto& r : report.rows) {
    rows.push_back(Json{{"lambda", r.lambda ? Json(*r.lambda) : Json(nullptr)},
                        {"method", r.method},
                        {"diverged", r.diverged},
                        {"erased", summary_json(r.erased)},
                        {"remaining", summary_json(r.remaining)},
                        {"param_kl", finite_or_null(r.param_kl.value)},
                        {"param_kl_std_error", finite_or_null(r.param_kl.std_error)}});
  }
  return Json{{"seed", report.seed},
              {"n_samples", report.n_samples},
              {"lambdas", report.lambdas},
              {"methods", report.methods},
              {"information", report.information ? finite_or_null(*report.information) : Json(nullptr)},
              {"rows", std::move(rows)}};
}

std::string eval_report_csv(const EvalReport& report) {
  std::string out = "lambda,method,set,kl_mean,kl_std\n";
  const auto line = [&](const EvalRow& r, std::string_view set, double mean, double sd) {
    out += r.lambda ? number(*r.lambda) : std::string();
    out += ',';
    out += r.method;
    out += ',';
    out += set;
    out += ',';
    out += number(mean);
    out += ',';
    out += number(sd);
    out += '\n';
  };
  for (const auto& r : report.rows) {
    if (!r.erased.per_point.empty()) line(r, "erased", r.erased.mean, r.erased.std);
    if (!r.remaining.per_point.empty()) line(r, "remaining", r.remaining.mean, r.remaining.std);
    line(r, "posterior", r.param_kl.value, r.param_kl.std_error);
  }
  return out;
}

EvalRow evaluate_posterior(const Posterior& candidate, const Posterior& reference, const Model& model,
                           const Dataset& data, const ErasePartition& partition,
                           std::size_t n_samples, std::uint64_t seed) {
  const RngStream rng(seed, kEvalStream);
  EvalRow row;
  row.erased = partition.erased_ids.empty()
                   ? KlSummary{kNaN, kNaN, {}}
                   : averaged_kl(candidate, reference, model, data, partition.erased_ids, n_samples,
                                 rng.substream(0));
  row.remaining = partition.remaining_ids.empty()
                      ? KlSummary{kNaN, kNaN, {}}
                      : averaged_kl(candidate, reference, model, data, partition.remaining_ids,
                                    n_samples, rng.substream(1));
  RngStream kl_rng = rng.substream(2);
  row.param_kl = posterior_kl(candidate, reference, kParamKlSamples, kl_rng);
  return row;
}

EvalReport lambda_sweep(const Posterior& q_full, const Model& model, const Dataset& data,
                        const ErasePartition& partition, const std::optional<Posterior>& reference,
                        const SweepConfig& config) {
  require(!partition.erased_ids.empty(), ErrorCode::kInvalidArgument, "sweep: empty erased set");
  require(!config.methods.empty(), ErrorCode::kConfig, "sweep: no methods");
  {
    std::unordered_set<RowId> seen;
    for (RowId id : partition.erased_ids) seen.insert(id);
    for (RowId id : partition.remaining_ids) {
      require(seen.count(id) == 0, ErrorCode::kInvalidArgument, "sweep: erased and remaining sets overlap");
    }
    (void)data.rows_of(partition.erased_ids);
    (void)data.rows_of(partition.remaining_ids);
  }
  for (double l : config.lambdas) {
    require(l >= 0.0 && l <= 1.0, ErrorCode::kConfig, "sweep: lambda outside [0, 1]");
  }
  const FamilySpec family = config.family ? *config.family : family_spec(q_full);
  const Posterior ref =
      reference ? *reference
                : fit_elbo(model, data, partition.remaining_ids, family_spec(q_full),
                           config.prior ? *config.prior : default_prior(model), config.retrain)
                      .posterior;

  EvalReport report;
  report.seed = config.seed;
  report.n_samples = config.n_samples;
  report.lambdas = config.lambdas;
  for (auto m : config.methods) report.methods.emplace_back(method_name(m));
  {
    RngStream rng = RngStream(config.seed, kEvalStream).substream(3);
    report.information = information_measure(ref, q_full, config.entropy_mc, rng);
  }

  EvalRow base = evaluate_posterior(q_full, ref, model, data, partition, config.n_samples, config.seed);
  base.method = "full";
  base.posterior = q_full;
  report.rows.push_back(std::move(base));

  const auto* gp = std::get_if<SparseGPModel>(&model);
  const bool pointwise = gp != nullptr && config.gp_pointwise && q_full.is_gaussian();
  const std::size_t n_methods = config.methods.size();
  std::vector<EvalRow> cells(config.lambdas.size() * n_methods);
  // Cells only share read-only inputs and draw from their own seeded
  // streams, so the worker count never changes a result.
  for_each_chunk(cells.size(), 1, [&](std::size_t c, std::size_t, std::size_t) {
    const double lambda = config.lambdas[c / n_methods];
    const UnlearnMethod method = config.methods[c % n_methods];
    UnlearnConfig uc = config.unlearn;
    uc.method = method;
    uc.lambda = lambda;
    EvalRow row;
    try {
      UnlearnResult r = pointwise ? unlearn_gp_minibatch(q_full, *gp, data, partition.erased_ids, uc)
                                  : unlearn(q_full, model, data, partition.erased_ids, family, uc);
      row = evaluate_posterior(r.posterior, ref, model, data, partition, config.n_samples, config.seed);
      row.posterior = std::move(r.posterior);
      row.trace = std::move(r.trace);
    } catch (const DivergenceError&) {
      row.diverged = true;
      row.erased = infinite_summary(partition.erased_ids.size());
      row.remaining = infinite_summary(partition.remaining_ids.size());
      row.param_kl = {kInf, kNaN};
    }
    row.lambda = lambda;
    row.method = std::string(method_name(method));
    cells[c] = std::move(row);
  });
  for (auto& row : cells) report.rows.push_back(std::move(row));
  return report;
}

}  // namespace vbu
