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
#include "vbu/unlearn.hpp"

#include <cmath>
#include <memory>
#include <optional>

#include "vbu/json_io.hpp"

namespace vbu {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> standard_normals(std::size_t n, RngStream& rng) {
  std::vector<double> z(n);
  for (auto& v : z) v = rng.normal();
  return z;
}

std::vector<double> values_of(std::span<const ad::Var> v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i].value();
  return out;
}

bool needs_joint_noise(const Model& model) {
  const auto* gp = std::get_if<SparseGPModel>(&model);
  return gp != nullptr && gp->kind == GpKind::kClassifier;
}

double output_of(const Dataset& data, RowId id) {
  return data.outputs()[static_cast<Eigen::Index>(data.row_of(id))];
}

// log q(theta) on the tape for a fixed distribution.
class FixedDensity {
 public:
  explicit FixedDensity(const Posterior& q) : gaussian_(q.is_gaussian()) {
    if (gaussian_) {
      g_ = q.gaussian();
    } else {
      require(q.family() == Family::kAutoregressiveFlow, ErrorCode::kUnsupported,
              "unlearn: reference posterior must be Gaussian or a flow");
      spec_ = family_spec(q);
      raw_ = pack(q);
    }
  }
  ad::Var operator()(ad::Tape& tape, std::span<const ad::Var> theta) const {
    if (gaussian_) return kernels::gaussian_log_density<ad::Var>(lift(tape, g_), theta);
    const std::vector<ad::Var> raw = tape.variables(raw_);
    return kernels::flow_log_density<ad::Var>(spec_.flow, std::span<const ad::Var>(raw), theta);
  }

 private:
  bool gaussian_;
  kernels::GaussianParams<double> g_;
  FamilySpec spec_;
  std::vector<double> raw_;
};

// log q~(theta) with the variational parameters held constant; gradients
// flow through theta only.
ad::Var frozen_log_q(ad::Tape& tape, const Parameterization& param, std::span<const double> raw,
                     std::span<const ad::Var> theta) {
  if (param.gaussian()) {
    return kernels::gaussian_log_density<ad::Var>(
        lift(tape, param.gaussian_params<double>(raw)), theta);
  }
  const std::vector<ad::Var> fixed = tape.variables(raw);
  return log_density_raw<ad::Var>(param.spec, std::span<const ad::Var>(fixed), theta);
}

// log q~(theta) at a fixed point, differentiable in the parameters.
ad::Var live_log_q(ad::Tape& tape, const Parameterization& param, std::span<const ad::Var> raw,
                   const std::optional<kernels::GaussianParams<ad::Var>>& g,
                   std::span<const double> theta) {
  const std::vector<ad::Var> th = tape.variables(theta);
  if (g) return kernels::gaussian_log_density<ad::Var>(*g, std::span<const ad::Var>(th));
  return log_density_raw<ad::Var>(param.spec, raw, std::span<const ad::Var>(th));
}

// Per-point sparse GP threshold over the rows bound to a Likelihood.
class GpPointThreshold {
 public:
  GpPointThreshold(const Likelihood& lik, const Posterior& q_full, double lambda)
      : lambda_(lambda),
        bound_(lambda <= 0.0 ? kInf : -2.0 * std::log(lambda)),
        mean_(gaussian_mean(q_full)),
        chol_(gaussian_factor(q_full)) {
    const std::size_t n = lik.size();
    a_mean_.resize(n);
    marginal_var_.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto a = lik.features(k);
      const Eigen::Map<const Vector> av(a.data(), static_cast<Eigen::Index>(a.size()));
      a_mean_[k] = av.dot(mean_);
      const Vector lt_a = chol_.transpose() * av;
      marginal_var_[k] = lik.residual_var(k) + lt_a.squaredNorm();
    }
  }
  bool never() const { return lambda_ >= 1.0; }
  bool always() const { return lambda_ <= 0.0; }
  double mahalanobis(std::span<const double> f_u) const {
    const Eigen::Map<const Vector> u(f_u.data(), mean_.size());
    return chol_.triangularView<Eigen::Lower>().solve(u - mean_).squaredNorm();
  }
  // xi is the standardized draw of f_x given f_u.
  bool active(double maha, std::size_t k, double xi, double f_x) const {
    const double r = f_x - a_mean_[k];
    return maha + xi * xi - r * r / marginal_var_[k] < bound_;
  }

 private:
  double lambda_;
  double bound_;
  Vector mean_;
  Matrix chol_;
  std::vector<double> a_mean_;
  std::vector<double> marginal_var_;
};

// sum over `subset` of indicator * log p(y_k | f_k), with f_k drawn jointly
// with theta; value and gradient in theta.
double gp_adjusted_total(const SparseGPModel& gp, const Likelihood& lik,
                         const GpPointThreshold& thr, std::span<const double> theta,
                         std::span<const std::size_t> subset, RngStream& rng, double* grad) {
  const double maha = thr.mahalanobis(theta);
  const std::size_t n = subset.empty() ? lik.size() : subset.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = subset.empty() ? i : subset[i];
    const auto a = lik.features(k);
    const double xi = rng.normal();
    const double f = ad::dot(theta, a) + std::sqrt(lik.residual_var(k)) * xi;
    if (!thr.active(maha, k, xi, f)) continue;
    double dlog = 0.0;
    total += gp_point_loglik(gp, f, lik.output(k), grad ? &dlog : nullptr);
    if (grad) {
      for (std::size_t j = 0; j < a.size(); ++j) grad[j] += dlog * a[j];
    }
  }
  return total;
}

Posterior initial_posterior(const Posterior& q_full, const Model& model, const FamilySpec& family,
                            const UnlearnConfig& config) {
  if (config.init_from_full) return q_full;
  return default_init(family, default_prior(model), config.optimizer.seed);
}

bool same_family(const Posterior& p, const FamilySpec& family) {
  if (p.family() != family.family || p.dim() != family.dim) return false;
  if (family.family != Family::kAutoregressiveFlow) return true;
  const kernels::FlowShape a = family_spec(p).flow;
  return a.hidden == family.flow.hidden && a.layers == family.flow.layers;
}

void check_inputs(const Posterior& q_full, const Model& model, const Dataset& data,
                  std::span<const RowId> erased) {
  require(q_full.dim() == param_dim(model), ErrorCode::kDimensionMismatch,
          "unlearn: posterior dimension differs from the model");
  require(!erased.empty(), ErrorCode::kInvalidArgument, "unlearn: no erased rows");
  for (RowId id : erased) {
    require(data.contains(id), ErrorCode::kUnknownId,
            "unlearn: erased id " + std::to_string(id) + " is not in the dataset");
  }
}

}  // namespace

std::string_view method_name(UnlearnMethod m) {
  return m == UnlearnMethod::kEubo ? "eubo" : "rkl";
}

UnlearnMethod parse_method(std::string_view name) {
  if (name == "eubo") return UnlearnMethod::kEubo;
  if (name == "rkl") return UnlearnMethod::kRkl;
  fail(ErrorCode::kConfig, "unknown unlearning method '" + std::string(name) + "'");
}

void UnlearnConfig::validate() const {
  require(std::isfinite(lambda) && lambda >= 0.0 && lambda <= 1.0, ErrorCode::kConfig,
          "unlearn: lambda must lie in [0, 1]");
  require(!std::isnan(log_weight_cap), ErrorCode::kConfig, "unlearn: log_weight_cap is NaN");
  optimizer.validate();
}

Json unlearn_config_to_json(const UnlearnConfig& c) {
  Json j{{"method", std::string(method_name(c.method))},
         {"lambda", c.lambda},
         {"optimizer", train_config_to_json(c.optimizer)},
         {"init_from_full", c.init_from_full},
         {"weight_normalization", c.weight_normalization},
         {"variance_reduction", c.variance_reduction}};
  j["log_weight_cap"] = std::isfinite(c.log_weight_cap) ? Json(c.log_weight_cap) : Json(nullptr);
  return j;
}

UnlearnConfig unlearn_config_from_json(const Json& j, UnlearnConfig c) {
  require(j.is_object(), ErrorCode::kConfig, "unlearn: expected an object");
  static const char* known[] = {"method", "lambda", "optimizer", "init_from_full",
                                "weight_normalization", "log_weight_cap",
                                "variance_reduction"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    require(std::find(std::begin(known), std::end(known), it.key()) != std::end(known),
            ErrorCode::kConfig, "unlearn: unknown key '" + it.key() + "'");
  }
  c.method = parse_method(json_string(j, "method", method_name(c.method)));
  c.lambda = json_number(j, "lambda", c.lambda);
  if (j.contains("optimizer")) c.optimizer = train_config_from_json(j.at("optimizer"), c.optimizer);
  c.init_from_full = json_bool(j, "init_from_full", c.init_from_full);
  c.weight_normalization = json_bool(j, "weight_normalization", c.weight_normalization);
  c.variance_reduction = json_bool(j, "variance_reduction", c.variance_reduction);
  if (j.contains("log_weight_cap")) {
    c.log_weight_cap = j.at("log_weight_cap").is_null() ? kInf : json_number(j, "log_weight_cap");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

BetaPosterior beta_bernoulli_posterior(const BetaBernoulliModel& model, const Dataset& data,
                                       std::span<const RowId> ids) {
  BetaPosterior p{model.prior_a, model.prior_b};
  for (RowId id : ids) (output_of(data, id) > 0.5 ? p.a : p.b) += 1.0;
  return p;
}

BetaPosterior exact_unlearn(const BetaBernoulliModel&, const BetaPosterior& full,
                            const Dataset& data, std::span<const RowId> erased) {
  BetaPosterior p = full;
  for (RowId id : erased) (output_of(data, id) > 0.5 ? p.a : p.b) -= 1.0;
  require(p.a > 0.0 && p.b > 0.0, ErrorCode::kInvalidArgument,
          "exact_unlearn: erased rows were not part of the posterior");
  return p;
}

Posterior gaussian_mean_posterior(const GaussianMeanModel& model, const Posterior& prior,
                                  const Dataset& data, std::span<const RowId> ids) {
  require(prior.is_gaussian() && prior.dim() == 1, ErrorCode::kUnsupported,
          "gaussian_mean: prior must be a 1-D Gaussian");
  const auto g = prior.gaussian();
  const double noise_prec = 1.0 / (model.noise_std * model.noise_std);
  double prec = 1.0 / (g.factor[0] * g.factor[0]);
  double num = g.mean[0] * prec;
  for (RowId id : ids) {
    prec += noise_prec;
    num += output_of(data, id) * noise_prec;
  }
  return make_diag_gaussian(Vector::Constant(1, num / prec), Vector::Constant(1, 1.0 / std::sqrt(prec)));
}

Posterior exact_unlearn(const GaussianMeanModel& model, const Posterior& full, const Dataset& data,
                        std::span<const RowId> erased) {
  require(full.is_gaussian() && full.dim() == 1, ErrorCode::kUnsupported,
          "exact_unlearn: posterior must be a 1-D Gaussian");
  const auto g = full.gaussian();
  const double noise_prec = 1.0 / (model.noise_std * model.noise_std);
  double prec = 1.0 / (g.factor[0] * g.factor[0]);
  double num = g.mean[0] * prec;
  for (RowId id : erased) {
    prec -= noise_prec;
    num -= output_of(data, id) * noise_prec;
  }
  require(prec > 0.0, ErrorCode::kInvalidArgument,
          "exact_unlearn: erased rows carry more precision than the posterior");
  return make_diag_gaussian(Vector::Constant(1, num / prec), Vector::Constant(1, 1.0 / std::sqrt(prec)));
}

Vector exact_unlearn(const DiscreteToyModel& model, const Vector& full, const Dataset& data,
                     std::span<const RowId> erased) {
  require(full.size() == model.prior.size(), ErrorCode::kDimensionMismatch,
          "exact_unlearn: posterior has the wrong support size");
  std::vector<double> log_p(static_cast<std::size_t>(full.size()));
  for (Eigen::Index s = 0; s < full.size(); ++s) {
    double v = std::log(full[s]);
    for (RowId id : erased) v -= std::log(model.table(s, static_cast<Eigen::Index>(output_of(data, id))));
    log_p[static_cast<std::size_t>(s)] = v;
  }
  const double lse = ad::log_sum_exp(log_p);
  Vector out(full.size());
  for (Eigen::Index s = 0; s < full.size(); ++s) out[s] = std::exp(log_p[static_cast<std::size_t>(s)] - lse);
  return out;
}

// ---------------------------------------------------------------------------

AdjustedThreshold::AdjustedThreshold(const Posterior& q_full, double lambda)
    : q_full_(&q_full), lambda_(lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::kInvalidArgument,
          "adjusted likelihood: lambda must lie in [0, 1]");
  log_bound_ = lambda > 0.0 ? std::log(lambda) + mode_density(q_full).log_value : -kInf;
}

bool AdjustedThreshold::active(std::span<const double> theta) const {
  // At lambda = 1 the strict inequality cannot hold; decided here so that an
  // estimated (lower-bound) flow mode cannot reopen it.
  if (never()) return false;
  return log_density(*q_full_, theta) > log_bound_;
}

bool adjusted_indicator(std::span<const double> theta, const Posterior& q_full, double lambda) {
  return AdjustedThreshold(q_full, lambda).active(theta);
}

double gp_conditional_mahalanobis(const SparseGPModel& model, const Posterior& q_full,
                                  std::span<const double> x, std::span<const double> f_u,
                                  double f_x) {
  require(q_full.is_gaussian() && q_full.dim() == model.num_inducing() &&
              f_u.size() == model.num_inducing(),
          ErrorCode::kDimensionMismatch, "gp indicator: dimension mismatch");
  const GpRowFeatures feat = gp_features(model, x);
  const Vector mean = gaussian_mean(q_full);
  const Matrix chol = gaussian_factor(q_full);
  const Eigen::Map<const Vector> u(f_u.data(), mean.size());
  const double maha = chol.triangularView<Eigen::Lower>().solve(u - mean).squaredNorm();
  const double resid = f_x - feat.a.dot(u);
  const double cond = feat.c > 0.0 ? resid * resid / feat.c : 0.0;
  const double v = feat.c + (chol.transpose() * feat.a).squaredNorm();
  const double r = f_x - feat.a.dot(mean);
  return maha + cond - r * r / v;
}

bool gp_pointwise_indicator(const SparseGPModel& model, const Posterior& q_full,
                            std::span<const double> x, std::span<const double> f_u, double f_x,
                            double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::kInvalidArgument,
          "gp indicator: lambda must lie in [0, 1]");
  if (lambda >= 1.0) return false;
  if (lambda <= 0.0) return true;
  return gp_conditional_mahalanobis(model, q_full, x, f_u, f_x) < -2.0 * std::log(lambda);
}

// ---------------------------------------------------------------------------

Estimate eubo_estimate(const Posterior& q_candidate, const Model& model, const Dataset& data,
                       std::span<const RowId> erased, const Posterior& q_full, double lambda,
                       std::size_t n_mc, RngStream& rng) {
  require(n_mc >= 2, ErrorCode::kInvalidArgument, "eubo_estimate: n_mc must be >= 2");
  require(q_candidate.dim() == q_full.dim() && q_full.dim() == param_dim(model),
          ErrorCode::kDimensionMismatch, "eubo_estimate: dimension mismatch");
  const AdjustedThreshold thr(q_full, lambda);
  const auto rows = data.rows_of(erased);
  const Likelihood lik(model, data, rows);
  const bool closed_kl = q_candidate.is_gaussian() && q_full.is_gaussian();
  double sum = 0.0;
  double sum2 = 0.0;
  for (std::size_t s = 0; s < n_mc; ++s) {
    const Draws d = sample(q_candidate, 1, rng);
    const Vector th = d.theta.row(0).transpose();
    double v = thr.active(as_span(th)) ? lik.total(as_span(th), {}, nullptr, 1.0, nullptr) : 0.0;
    if (!closed_kl) v += log_density(q_candidate, as_span(th)) - log_density(q_full, as_span(th));
    sum += v;
    sum2 += v * v;
  }
  const double n = static_cast<double>(n_mc);
  const double mean = sum / n;
  const double se = std::sqrt(std::max(0.0, sum2 / n - mean * mean) / (n - 1.0));
  return {closed_kl ? mean + kl_gaussian(q_candidate, q_full) : mean, se};
}

Estimate rkl_objective_estimate(const Posterior& q_candidate, const Model& model,
                                const Dataset& data, std::span<const RowId> erased,
                                const Posterior& q_full, double lambda, std::size_t n_mc,
                                RngStream& rng) {
  require(n_mc >= 2, ErrorCode::kInvalidArgument, "rkl_objective_estimate: n_mc must be >= 2");
  require(q_candidate.dim() == q_full.dim() && q_full.dim() == param_dim(model),
          ErrorCode::kDimensionMismatch, "rkl_objective_estimate: dimension mismatch");
  const AdjustedThreshold thr(q_full, lambda);
  const auto rows = data.rows_of(erased);
  const Likelihood lik(model, data, rows);
  double sum = 0.0;
  double sum2 = 0.0;
  for (std::size_t s = 0; s < n_mc; ++s) {
    const Draws d = sample(q_full, 1, rng);
    const Vector th = d.theta.row(0).transpose();
    const double ll = thr.active(as_span(th)) ? lik.total(as_span(th), {}, nullptr, 1.0, nullptr) : 0.0;
    const double v = std::exp(-ll) * log_density(q_candidate, as_span(th));
    sum += v;
    sum2 += v * v;
  }
  const double n = static_cast<double>(n_mc);
  const double mean = sum / n;
  return {mean, std::sqrt(std::max(0.0, sum2 / n - mean * mean) / (n - 1.0))};
}

// ---------------------------------------------------------------------------

StochasticObjective eubo_objective(const Model& model, const Dataset& data,
                                   std::span<const RowId> erased, const Parameterization& param,
                                   const Posterior& q_full, const UnlearnConfig& config,
                                   bool pointwise) {
  config.validate();
  require(param.spec.dim == q_full.dim() && q_full.dim() == param_dim(model),
          ErrorCode::kDimensionMismatch, "eubo: dimension mismatch");
  const SparseGPModel* gp = std::get_if<SparseGPModel>(&model);
  require(!pointwise || (gp != nullptr && q_full.is_gaussian()), ErrorCode::kUnsupported,
          "eubo: the per-point indicator needs a sparse GP with a Gaussian q_full");
  struct State {
    std::vector<std::size_t> rows;
    Likelihood lik;
    MinibatchSchedule batcher;
    Parameterization param;
    AdjustedThreshold thr;
    std::optional<GpPointThreshold> gp_thr;
    std::optional<LinearGaussianStats> full_stats;
    kernels::GaussianParams<double> full_g;
    FixedDensity full_density;
  };
  auto rows = data.rows_of(erased);
  const Likelihood lik(model, data, rows);
  const double lambda = config.lambda;
  const bool gaussian = param.gaussian();
  const bool closed_kl = gaussian && q_full.is_gaussian();
  // With lambda = 0 the indicator is 1 wherever q_full has density.
  const bool analytic = lambda <= 0.0 && gaussian && config.optimizer.analytic_expectations &&
                        lik.linear_gaussian();
  MinibatchSchedule batcher(rows.size(), config.optimizer.minibatch,
                            RngStream(config.optimizer.seed, kMinibatchStream));
  std::optional<LinearGaussianStats> full_stats;
  if (analytic && batcher.full()) full_stats = lik.stats({});
  std::optional<GpPointThreshold> gp_thr;
  if (pointwise) gp_thr.emplace(lik, q_full, lambda);
  auto st = std::make_shared<State>(State{std::move(rows), lik, std::move(batcher), param,
                                          AdjustedThreshold(q_full, lambda), std::move(gp_thr),
                                          std::move(full_stats),
                                          closed_kl ? q_full.gaussian() : kernels::GaussianParams<double>{},
                                          FixedDensity(q_full)});
  const bool joint = needs_joint_noise(model);
  const std::size_t n_mc = config.optimizer.mc_samples;
  const bool never = lambda >= 1.0;
  const bool per_point = pointwise && lambda > 0.0 && !never;

  const bool stl = config.variance_reduction;
  return [st, gp, gaussian, closed_kl, analytic, joint, n_mc, never, per_point, stl](
             ad::Tape& tape, std::span<const ad::Var> raw, std::size_t, RngStream& rng) {
    const Parameterization& par = st->param;
    const auto subset = st->batcher.next();
    const double scale = st->batcher.scale();
    std::optional<kernels::GaussianParams<ad::Var>> g;
    if (gaussian) g = par.gaussian_params<ad::Var>(raw);
    ad::Var total = tape.variable(0.0);
    const bool mc_lik = !never && !analytic;
    if (!never && analytic) {
      const LinearGaussianStats stats = st->full_stats ? *st->full_stats : st->lik.stats(subset);
      total = expected_loglik<ad::Var>(stats, *g) * scale;
    }
    if (mc_lik || !closed_kl) {
      const std::vector<double> raw_values = values_of(raw);
      std::vector<ad::Var> terms;
      terms.reserve(n_mc);
      for (std::size_t s = 0; s < n_mc; ++s) {
        const std::vector<double> eps = standard_normals(par.spec.noise_dim(), rng);
        const std::vector<ad::Var> theta =
            gaussian ? kernels::gaussian_transform<ad::Var>(*g, eps) : par.draw<ad::Var>(raw, eps, nullptr);
        const std::span<const ad::Var> th(theta);
        ad::Var term = tape.variable(0.0);
        if (mc_lik) {
          const std::vector<double> tv = values_of(th);
          if (per_point) {
            std::vector<double> grad(tv.size(), 0.0);
            const double v = gp_adjusted_total(*gp, st->lik, *st->gp_thr, tv, subset, rng, grad.data());
            for (auto& x : grad) x *= scale;
            term = tape.nary(scale * v, th, grad);
          } else if (st->thr.active(tv)) {
            term = st->lik.total(th, subset, joint ? &rng : nullptr, scale);
          }
        }
        if (!closed_kl) {
          // Path-derivative KL estimate: zero variance when q~ = q_full.
          const ad::Var log_q = stl ? frozen_log_q(tape, par, raw_values, th)
                                    : gaussian ? kernels::gaussian_log_density<ad::Var>(*g, th)
                                               : log_density_raw<ad::Var>(par.spec, raw, th);
          term = term + log_q - st->full_density(tape, th);
        }
        terms.push_back(term);
      }
      total = total + ad::sum(std::span<const ad::Var>(terms)) / static_cast<double>(n_mc);
    }
    if (closed_kl) total = total + kernels::gaussian_kl<ad::Var>(*g, lift(tape, st->full_g));
    return total;
  };
}

StochasticObjective rkl_objective(const Model& model, const Dataset& data,
                                  std::span<const RowId> erased, const Parameterization& param,
                                  const Posterior& q_full, const UnlearnConfig& config,
                                  bool pointwise) {
  config.validate();
  require(param.spec.dim == q_full.dim() && q_full.dim() == param_dim(model),
          ErrorCode::kDimensionMismatch, "rkl: dimension mismatch");
  const SparseGPModel* gp = std::get_if<SparseGPModel>(&model);
  require(!pointwise || (gp != nullptr && q_full.is_gaussian()), ErrorCode::kUnsupported,
          "rkl: the per-point indicator needs a sparse GP with a Gaussian q_full");
  struct State {
    std::vector<std::size_t> rows;
    Likelihood lik;
    Parameterization param;
    AdjustedThreshold thr;
    std::optional<GpPointThreshold> gp_thr;
    const Posterior* q_full;
  };
  auto rows = data.rows_of(erased);
  const Likelihood lik(model, data, rows);
  const double lambda = config.lambda;
  std::optional<GpPointThreshold> gp_thr;
  if (pointwise) gp_thr.emplace(lik, q_full, lambda);
  auto st = std::make_shared<State>(State{std::move(rows), lik, param,
                                          AdjustedThreshold(q_full, lambda), std::move(gp_thr), &q_full});
  const std::size_t n_mc = config.optimizer.mc_samples;
  const bool never = lambda >= 1.0;
  const bool per_point = pointwise && lambda > 0.0 && !never;
  const bool normalize = config.weight_normalization;
  const double cap = config.log_weight_cap;
  // Common noise for the control variate requires matching noise layouts.
  const bool common_noise = noise_dim(q_full) == param.spec.noise_dim();
  const bool use_cv = config.variance_reduction;

  return [st, gp, n_mc, never, per_point, normalize, cap, common_noise, use_cv](
             ad::Tape& tape, std::span<const ad::Var> raw, std::size_t, RngStream& rng) {
    const Parameterization& par = st->param;
    std::optional<kernels::GaussianParams<ad::Var>> g;
    if (par.gaussian()) g = par.gaussian_params<ad::Var>(raw);
    const std::vector<double> raw_values = values_of(raw);
    std::vector<double> log_w(n_mc, 0.0);
    std::vector<ad::Var> log_q;
    std::vector<ad::Var> control;
    log_q.reserve(n_mc);
    control.reserve(n_mc);
    for (std::size_t s = 0; s < n_mc; ++s) {
      const std::vector<double> eps = standard_normals(noise_dim(*st->q_full), rng);
      const Vector th = transform_noise(*st->q_full, eps);
      if (!never) {
        double ll = 0.0;
        if (per_point) {
          ll = gp_adjusted_total(*gp, st->lik, *st->gp_thr, as_span(th), {}, rng, nullptr);
        } else if (st->thr.active(as_span(th))) {
          ll = st->lik.total(as_span(th), {}, nullptr, 1.0, nullptr);
        }
        log_w[s] = std::min(-ll, cap);
      }
      log_q.push_back(live_log_q(tape, par, raw, g, as_span(th)));
      if (!use_cv) continue;
      // Score-function control variate: E_{q~}[grad log q~] = 0.
      const std::vector<double> eps_cv =
          common_noise ? eps : standard_normals(par.spec.noise_dim(), rng);
      const std::vector<double> own = par.draw<double>(raw_values, eps_cv, nullptr);
      control.push_back(live_log_q(tape, par, raw, g, own));
    }
    double max_w = -kInf;
    for (double v : log_w) {
      require(!std::isnan(v), ErrorCode::kDegenerate, "rkl: importance weight is NaN");
      max_w = std::max(max_w, v);
    }
    require(max_w > -kInf, ErrorCode::kDegenerate, "rkl: all importance weights are zero");
    const double shift = normalize ? ad::log_sum_exp(log_w) - std::log(static_cast<double>(n_mc)) : 0.0;
    std::vector<double> w(n_mc);
    for (std::size_t s = 0; s < n_mc; ++s) w[s] = std::exp(log_w[s] - shift) / static_cast<double>(n_mc);
    const ad::Var main = ad::dot(std::span<const ad::Var>(log_q), std::span<const double>(w));
    if (!use_cv) return main;
    // Scaled by the mean weight so that rescaling all weights rescales the
    // whole gradient; the coefficient is 1 under batch-mean normalization.
    double mean_w = 0.0;
    for (double v : w) mean_w += v;
    const ad::Var cv = ad::sum(std::span<const ad::Var>(control)) * (mean_w / static_cast<double>(n_mc));
    return main - (cv - cv.value());
  };
}

Parameterization unlearn_parameterization(const FamilySpec& family, const Posterior& q_full,
                                          const TrainConfig& config) {
  if (config.whiten && family.family == Family::kFullGaussian && q_full.is_gaussian()) {
    return Parameterization::whitened_by(family, q_full);
  }
  return Parameterization::plain(family);
}

Json unlearn_sidecar(const UnlearnResult& r) {
  return Json{{"method", std::string(method_name(r.config.method))},
              {"lambda", r.config.lambda},
              {"seed", r.config.optimizer.seed},
              {"iters", r.iters},
              {"final_objective", r.final_objective}};
}

namespace {

UnlearnResult run(const Posterior& q_full, const Model& model, const Dataset& data,
                  std::span<const RowId> erased, const FamilySpec& family,
                  UnlearnConfig config, UnlearnMethod method, bool pointwise) {
  config.method = method;
  config.validate();
  check_inputs(q_full, model, data, erased);
  const bool eubo = method == UnlearnMethod::kEubo;
  require(family.dim == q_full.dim(), ErrorCode::kDimensionMismatch,
          "unlearn: family dimension differs from the posterior");
  const Posterior start = initial_posterior(q_full, model, family, config);
  if (config.lambda >= 1.0 && config.init_from_full && same_family(start, family)) {
    // Nothing is unlearned: q_full is the exact optimum within its own family.
    RngStream rng = RngStream(config.optimizer.seed, eubo ? kEuboStream : kRklStream).substream(0);
    const double value =
        eubo ? 0.0
             : rkl_objective_estimate(q_full, model, data, erased, q_full, 1.0,
                                      config.optimizer.mc_samples, rng)
                   .value;
    PosteriorMeta meta{config.optimizer.seed, std::string(method_name(method))};
    Posterior out = q_full;
    out.meta = meta;
    return UnlearnResult{std::move(out), {}, config, 0, value};
  }
  const FamilySpec spec = family.family == start.family() && start.family() == Family::kAutoregressiveFlow
                              ? family_spec(start)
                              : family;
  const Parameterization param = unlearn_parameterization(spec, q_full, config.optimizer);
  const StochasticObjective objective =
      eubo ? eubo_objective(model, data, erased, param, q_full, config, pointwise)
           : rkl_objective(model, data, erased, param, q_full, config, pointwise);
  OptimizeResult opt = optimize(param.to_raw(start), objective,
                                eubo ? Direction::kDescent : Direction::kAscent, config.optimizer,
                                eubo ? kEuboStream : kRklStream);
  PosteriorMeta meta{config.optimizer.seed, std::string(method_name(method))};
  return UnlearnResult{param.from_raw(opt.raw, meta), std::move(opt.trace), config, opt.iters,
                       opt.final_objective};
}

}  // namespace

UnlearnResult unlearn_eubo(const Posterior& q_full, const Model& model, const Dataset& data,
                           std::span<const RowId> erased, const FamilySpec& family,
                           const UnlearnConfig& config) {
  return run(q_full, model, data, erased, family, config, UnlearnMethod::kEubo, false);
}

UnlearnResult unlearn_rkl(const Posterior& q_full, const Model& model, const Dataset& data,
                          std::span<const RowId> erased, const FamilySpec& family,
                          const UnlearnConfig& config) {
  return run(q_full, model, data, erased, family, config, UnlearnMethod::kRkl, false);
}

UnlearnResult unlearn(const Posterior& q_full, const Model& model, const Dataset& data,
                      std::span<const RowId> erased, const FamilySpec& family,
                      const UnlearnConfig& config) {
  return run(q_full, model, data, erased, family, config, config.method, false);
}

UnlearnResult unlearn_gp_minibatch(const Posterior& q_full, const SparseGPModel& model,
                                   const Dataset& data, std::span<const RowId> erased,
                                   const UnlearnConfig& config) {
  const Model m = model;
  UnlearnConfig c = config;
  if (c.method == UnlearnMethod::kRkl) c.optimizer.minibatch = 0;
  // `m` is a local copy; objectives keep pointers to it only during run().
  return run(q_full, m, data, erased, family_spec(q_full), c, c.method, true);
}

// ---------------------------------------------------------------------------

double discrete_kl(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), ErrorCode::kDimensionMismatch, "discrete_kl: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return kl;
}

namespace {

struct DiscreteErased {
  std::vector<double> log_lik;  // log p(D_e | theta_s)
  std::vector<bool> active;
};

DiscreteErased discrete_erased(const DiscreteToyModel& model, std::span<const double> q_full,
                               const Dataset& data, std::span<const RowId> erased, double lambda) {
  require(q_full.size() == static_cast<std::size_t>(model.prior.size()),
          ErrorCode::kDimensionMismatch, "discrete: q has the wrong support size");
  require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::kInvalidArgument,
          "discrete: lambda must lie in [0, 1]");
  const double mode = *std::max_element(q_full.begin(), q_full.end());
  DiscreteErased e;
  e.log_lik.assign(q_full.size(), 0.0);
  e.active.assign(q_full.size(), false);
  for (std::size_t s = 0; s < q_full.size(); ++s) {
    for (RowId id : erased) {
      e.log_lik[s] += std::log(model.table(static_cast<Eigen::Index>(s),
                                           static_cast<Eigen::Index>(output_of(data, id))));
    }
    e.active[s] = q_full[s] > lambda * mode;
  }
  return e;
}

template <class F>
Estimate mc_mean(std::size_t n_mc, F draw) {
  require(n_mc >= 2, ErrorCode::kInvalidArgument, "estimate: n_mc must be >= 2");
  double sum = 0.0;
  double sum2 = 0.0;
  for (std::size_t i = 0; i < n_mc; ++i) {
    const double v = draw();
    sum += v;
    sum2 += v * v;
  }
  const double n = static_cast<double>(n_mc);
  const double mean = sum / n;
  return {mean, std::sqrt(std::max(0.0, sum2 / n - mean * mean) / (n - 1.0))};
}

}  // namespace

double discrete_eubo(const DiscreteToyModel& model, std::span<const double> q_candidate,
                     std::span<const double> q_full, const Dataset& data,
                     std::span<const RowId> erased, double lambda) {
  const DiscreteErased e = discrete_erased(model, q_full, data, erased, lambda);
  double u = 0.0;
  for (std::size_t s = 0; s < q_candidate.size(); ++s) {
    if (q_candidate[s] <= 0.0) continue;
    u += q_candidate[s] * ((e.active[s] ? e.log_lik[s] : 0.0) + std::log(q_candidate[s]) -
                           std::log(q_full[s]));
  }
  return u;
}

double discrete_rkl_objective(const DiscreteToyModel& model, std::span<const double> q_candidate,
                              std::span<const double> q_full, const Dataset& data,
                              std::span<const RowId> erased, double lambda) {
  const DiscreteErased e = discrete_erased(model, q_full, data, erased, lambda);
  double v = 0.0;
  for (std::size_t s = 0; s < q_full.size(); ++s) {
    if (q_full[s] <= 0.0) continue;
    v += q_full[s] * std::exp(e.active[s] ? -e.log_lik[s] : 0.0) * std::log(q_candidate[s]);
  }
  return v;
}

Estimate discrete_eubo_estimate(const DiscreteToyModel& model, std::span<const double> q_candidate,
                                std::span<const double> q_full, const Dataset& data,
                                std::span<const RowId> erased, double lambda, std::size_t n_mc,
                                RngStream& rng) {
  const DiscreteErased e = discrete_erased(model, q_full, data, erased, lambda);
  return mc_mean(n_mc, [&] {
    const std::size_t s = sample_categorical(q_candidate, rng);
    return (e.active[s] ? e.log_lik[s] : 0.0) + std::log(q_candidate[s]) - std::log(q_full[s]);
  });
}

Estimate discrete_rkl_estimate(const DiscreteToyModel& model, std::span<const double> q_candidate,
                               std::span<const double> q_full, const Dataset& data,
                               std::span<const RowId> erased, double lambda, std::size_t n_mc,
                               RngStream& rng) {
  const DiscreteErased e = discrete_erased(model, q_full, data, erased, lambda);
  return mc_mean(n_mc, [&] {
    const std::size_t s = sample_categorical(q_full, rng);
    return std::exp(e.active[s] ? -e.log_lik[s] : 0.0) * std::log(q_candidate[s]);
  });
}

}  // namespace vbu
