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

#include "vbu/vi.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>

#include "vbu/json_io.hpp"

namespace vbu {
namespace {

bool needs_joint_noise(const Model& model) {
  const auto* gp = std::get_if<SparseGPModel>(&model);
  return gp != nullptr && gp->kind == GpKind::kClassifier;
}

std::vector<double> standard_normals(std::size_t n, RngStream& rng) {
  std::vector<double> z(n);
  for (auto& v : z) v = rng.normal();
  return z;
}

}  // namespace

MinibatchSchedule::MinibatchSchedule(std::size_t n, std::size_t batch, RngStream rng)
    : n_(n), batch_(batch), rng_(std::move(rng)), order_(n) {
  std::iota(order_.begin(), order_.end(), 0);
}

std::span<const std::size_t> MinibatchSchedule::next() {
  if (full()) return {};
  if (pos_ == 0) {
    for (std::size_t i = n_; i-- > 1;) {
      std::swap(order_[i], order_[static_cast<std::size_t>(rng_.below(i + 1))]);
    }
  }
  std::span<const std::size_t> out(order_.data() + pos_, batch_);
  pos_ += batch_;
  if (pos_ + batch_ > n_) pos_ = 0;
  return out;
}

void TrainConfig::validate() const {
  require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorCode::kConfig,
          "train: learning_rate must be positive");
  require(learning_rate_final >= 0.0, ErrorCode::kConfig, "train: learning_rate_final must be >= 0");
  require(rmsprop_decay > 0.0 && rmsprop_decay < 1.0, ErrorCode::kConfig,
          "train: rmsprop_decay must lie in (0, 1)");
  require(rmsprop_eps > 0.0, ErrorCode::kConfig, "train: rmsprop_eps must be positive");
  require(mc_samples >= 1, ErrorCode::kConfig, "train: mc_samples must be >= 1");
  require(max_iters >= 1, ErrorCode::kConfig, "train: max_iters must be >= 1");
  require(plateau_window >= 1, ErrorCode::kConfig, "train: plateau_window must be >= 1");
}

double TrainConfig::step_size(std::size_t iter) const {
  if (learning_rate_final <= 0.0 || max_iters <= 1) return learning_rate;
  const double t = std::min(1.0, static_cast<double>(iter) / static_cast<double>(max_iters - 1));
  return learning_rate * std::pow(learning_rate_final / learning_rate, t);
}

Json train_config_to_json(const TrainConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"learning_rate_final", c.learning_rate_final},
              {"rmsprop_decay", c.rmsprop_decay},
              {"rmsprop_eps", c.rmsprop_eps},
              {"mc_samples", c.mc_samples},
              {"max_iters", c.max_iters},
              {"minibatch", c.minibatch},
              {"plateau_stop", c.plateau_stop},
              {"plateau_tol", c.plateau_tol},
              {"plateau_window", c.plateau_window},
              {"analytic_expectations", c.analytic_expectations},
              {"whiten", c.whiten},
              {"record_time", c.record_time},
              {"seed", c.seed}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
  require(j.is_object(), ErrorCode::kConfig, "train: expected an object");
  static const char* known[] = {"learning_rate", "learning_rate_final", "rmsprop_decay",
                                "rmsprop_eps", "mc_samples", "max_iters", "minibatch",
                                "plateau_stop", "plateau_tol", "plateau_window",
                                "analytic_expectations", "whiten", "record_time", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    require(std::find(std::begin(known), std::end(known), it.key()) != std::end(known),
            ErrorCode::kConfig, "train: unknown key '" + it.key() + "'");
  }
  const auto count = [&](const char* key, std::size_t fallback) {
    const auto v = json_int(j, key, static_cast<std::int64_t>(fallback));
    require(v >= 0, ErrorCode::kConfig, std::string("train: '") + key + "' must be >= 0");
    return static_cast<std::size_t>(v);
  };
  c.learning_rate = json_number(j, "learning_rate", c.learning_rate);
  c.learning_rate_final = json_number(j, "learning_rate_final", c.learning_rate_final);
  c.rmsprop_decay = json_number(j, "rmsprop_decay", c.rmsprop_decay);
  c.rmsprop_eps = json_number(j, "rmsprop_eps", c.rmsprop_eps);
  c.mc_samples = count("mc_samples", c.mc_samples);
  c.max_iters = count("max_iters", c.max_iters);
  c.minibatch = count("minibatch", c.minibatch);
  c.plateau_stop = json_bool(j, "plateau_stop", c.plateau_stop);
  c.plateau_tol = json_number(j, "plateau_tol", c.plateau_tol);
  c.plateau_window = count("plateau_window", c.plateau_window);
  c.analytic_expectations = json_bool(j, "analytic_expectations", c.analytic_expectations);
  c.whiten = json_bool(j, "whiten", c.whiten);
  c.record_time = json_bool(j, "record_time", c.record_time);
  c.seed = static_cast<std::uint64_t>(count("seed", c.seed));
  c.validate();
  return c;
}

void rmsprop_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                  const TrainConfig& config, Direction direction) {
  require(params.size() == grads.size(), ErrorCode::kDimensionMismatch,
          "rmsprop: parameter and gradient sizes differ");
  if (state.v.empty()) state.v.assign(params.size(), 0.0);
  require(state.v.size() == params.size(), ErrorCode::kDimensionMismatch,
          "rmsprop: state size differs from parameters");
  const double lr = config.step_size(state.iter);
  const double sign = direction == Direction::kAscent ? 1.0 : -1.0;
  const double rho = config.rmsprop_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.v[i] = rho * state.v[i] + (1.0 - rho) * grads[i] * grads[i];
    params[i] += sign * lr * grads[i] / (std::sqrt(state.v[i]) + config.rmsprop_eps);
  }
  ++state.iter;
}

std::string trace_csv(const Trace& trace) {
  std::string out = "iter,objective,grad_norm,seconds\n";
  char buf[128];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.iter, r.objective, r.grad_norm,
                  r.seconds);
    out += buf;
  }
  return out;
}

OptimizeResult optimize(std::vector<double> raw, const StochasticObjective& objective,
                        Direction direction, const TrainConfig& config, std::uint64_t stream) {
  config.validate();
  OptimizeResult result;
  OptimizerState state;
  const RngStream root(config.seed, stream);
  ad::Tape tape;
  const auto start = std::chrono::steady_clock::now();
  double window_sum = 0.0;
  double prev_window_mean = 0.0;
  bool have_prev_window = false;
  std::vector<double> last_good = raw;
  for (std::size_t it = 0; it < config.max_iters; ++it) {
    tape.clear();
    const std::vector<ad::Var> vars = tape.variables(raw);
    RngStream rng = root.substream(it);
    const ad::Var out = objective(tape, vars, it, rng);
    const double value = out.value();
    const std::vector<double> grad = tape.gradient(out, vars);
    double norm2 = 0.0;
    for (double g : grad) norm2 += g * g;
    if (!std::isfinite(value) || !std::isfinite(norm2)) {
      throw DivergenceError("objective diverged at iteration " + std::to_string(it) +
                                (std::isfinite(value) ? " (non-finite gradient)" : " (non-finite value)"),
                            last_good, it);
    }
    TraceRecord rec;
    rec.iter = it;
    rec.objective = value;
    rec.grad_norm = std::sqrt(norm2);
    if (config.record_time) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    result.trace.push_back(rec);
    result.final_objective = value;
    result.iters = it + 1;
    last_good = raw;
    rmsprop_step(raw, grad, state, config, direction);
    for (double v : raw) {
      if (!std::isfinite(v)) {
        throw DivergenceError("parameters became non-finite at iteration " + std::to_string(it),
                              last_good, it);
      }
    }
    if (config.plateau_stop) {
      window_sum += value;
      if ((it + 1) % config.plateau_window == 0) {
        const double mean = window_sum / static_cast<double>(config.plateau_window);
        window_sum = 0.0;
        if (have_prev_window &&
            std::abs(mean - prev_window_mean) / static_cast<double>(config.plateau_window) <
                config.plateau_tol) {
          break;
        }
        prev_window_mean = mean;
        have_prev_window = true;
      }
    }
  }
  result.raw = std::move(raw);
  return result;
}

Estimate elbo_estimate(const Posterior& q, const Model& model, const Dataset& data,
                       std::span<const RowId> ids, const Posterior& prior, std::size_t n_mc,
                       RngStream& rng) {
  require(n_mc >= 1, ErrorCode::kInvalidArgument, "elbo_estimate: n_mc must be >= 1");
  require(q.dim() == param_dim(model) && prior.dim() == q.dim(), ErrorCode::kDimensionMismatch,
          "elbo_estimate: dimension mismatch between q, prior and model");
  const auto rows = data.rows_of(ids);
  const Likelihood lik(model, data, rows);
  const bool closed_kl = q.is_gaussian() && prior.is_gaussian();
  RngStream* joint = needs_joint_noise(model) ? &rng : nullptr;
  double sum = 0.0;
  double sum2 = 0.0;
  for (std::size_t s = 0; s < n_mc; ++s) {
    const Draws d = sample(q, 1, rng);
    const Vector th = d.theta.row(0).transpose();
    double v = rows.empty() ? 0.0 : lik.total(as_span(th), {}, joint, 1.0, nullptr);
    if (!closed_kl) v += log_density(prior, as_span(th)) - log_density(q, as_span(th));
    sum += v;
    sum2 += v * v;
  }
  const double n = static_cast<double>(n_mc);
  const double mean = sum / n;
  Estimate e;
  e.value = closed_kl ? mean - kl_gaussian(q, prior) : mean;
  e.std_error = n_mc > 1 ? std::sqrt(std::max(0.0, sum2 / n - mean * mean) / (n - 1.0)) : 0.0;
  return e;
}

Posterior default_init(const FamilySpec& family, const Posterior& prior, std::uint64_t seed) {
  require(prior.is_gaussian(), ErrorCode::kUnsupported, "default_init: prior must be Gaussian");
  require(prior.dim() == family.dim, ErrorCode::kDimensionMismatch,
          "default_init: prior dimension differs from family");
  const auto g = prior.gaussian();
  const auto d = static_cast<Eigen::Index>(family.dim);
  Vector mean = Eigen::Map<const Vector>(g.mean.data(), d);
  Vector sd(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    double var = 0.0;
    if (g.diagonal) {
      var = g.factor[i] * g.factor[i];
    } else {
      for (Eigen::Index j = 0; j <= i; ++j) var += g.factor[kernels::tri_index(i, j)] * g.factor[kernels::tri_index(i, j)];
    }
    sd[i] = std::min(std::sqrt(var), 1.0);
  }
  switch (family.family) {
    case Family::kDiagGaussian:
      return make_diag_gaussian(mean, sd);
    case Family::kFullGaussian: {
      // Keep the prior's correlations; rescale the rows to the capped scale.
      Matrix l = gaussian_factor(prior);
      for (Eigen::Index i = 0; i < d; ++i) l.row(i) *= sd[i] / l.row(i).norm();
      return make_full_gaussian(mean, l);
    }
    case Family::kAutoregressiveFlow: {
      RngStream rng(seed, 0x696e6974);
      auto f = AutoregressiveFlow::initialized(family.dim, family.flow.layers, family.flow.hidden, rng);
      f.set_affine(as_span(mean), as_span(sd));
      return Posterior(std::move(f));
    }
    case Family::kGaussianMixture1D:
      break;
  }
  fail(ErrorCode::kUnsupported, "default_init: family cannot be trained");
}


Parameterization Parameterization::whitened_by(const FamilySpec& spec, const Posterior& reference) {
  require(spec.family == Family::kFullGaussian, ErrorCode::kUnsupported,
          "whitening applies to the full Gaussian family");
  require(reference.is_gaussian() && reference.dim() == spec.dim, ErrorCode::kDimensionMismatch,
          "whitening reference must be a Gaussian of the family dimension");
  return {spec, true, gaussian_mean(reference), gaussian_factor(reference)};
}

std::vector<double> Parameterization::to_raw(const Posterior& q) const {
  require(q.dim() == spec.dim, ErrorCode::kDimensionMismatch,
          "parameterization: dimension mismatch");
  if (!whitened) {
    require(q.family() == spec.family, ErrorCode::kDimensionMismatch,
            "parameterization: family mismatch");
    return pack(q);
  }
  require(q.is_gaussian(), ErrorCode::kUnsupported, "parameterization: expected a Gaussian");
  const auto lower = chol.triangularView<Eigen::Lower>();
  Vector m = lower.solve(gaussian_mean(q) - shift);
  Matrix s = lower.solve(gaussian_factor(q));
  s = s.triangularView<Eigen::Lower>();
  return pack(make_full_gaussian(std::move(m), std::move(s)));
}

Posterior Parameterization::from_raw(std::span<const double> raw, PosteriorMeta meta) const {
  require(raw.size() == spec.num_params(), ErrorCode::kDimensionMismatch,
          "parameterization: raw vector has the wrong length");
  if (!whitened) return unpack(spec, raw, std::move(meta));
  Posterior q = gaussian_from_params(gaussian_params<double>(raw));
  q.meta = std::move(meta);
  return q;
}

StochasticObjective elbo_objective(const Model& model, const Dataset& data,
                                   std::span<const RowId> ids, const Parameterization& param,
                                   const Posterior& prior, const TrainConfig& config) {
  const FamilySpec& spec = param.spec;
  require(spec.dim == param_dim(model), ErrorCode::kDimensionMismatch,
          "elbo: family dimension differs from the model");
  require(spec.family != Family::kAutoregressiveFlow || spec.flow.dim == spec.dim,
          ErrorCode::kDimensionMismatch, "elbo: flow shape dimension differs from the family");
  require(prior.is_gaussian() && prior.dim() == spec.dim, ErrorCode::kUnsupported,
          "elbo: prior must be a Gaussian of the model dimension");
  struct State {
    std::vector<std::size_t> rows;
    Likelihood lik;
    MinibatchSchedule batcher;
    std::optional<LinearGaussianStats> full_stats;
    kernels::GaussianParams<double> prior_g;
    Parameterization param;
    bool analytic;
  };
  auto rows = data.rows_of(ids);
  const Likelihood lik(model, data, rows);
  const bool gaussian = param.gaussian();
  const bool analytic = config.analytic_expectations && gaussian && lik.linear_gaussian();
  MinibatchSchedule batcher(rows.size(), config.minibatch, RngStream(config.seed, kMinibatchStream));
  std::optional<LinearGaussianStats> full_stats;
  if (analytic && batcher.full() && !rows.empty()) full_stats = lik.stats({});
  auto st = std::make_shared<State>(State{std::move(rows), lik, std::move(batcher),
                                          std::move(full_stats), prior.gaussian(), param, analytic});
  const bool joint = needs_joint_noise(model);
  const std::size_t n_mc = config.mc_samples;

  return [st, gaussian, joint, n_mc](ad::Tape& tape, std::span<const ad::Var> raw, std::size_t,
                                     RngStream& rng) {
    const Parameterization& par = st->param;
    const auto lifted = lift(tape, st->prior_g);
    const auto subset = st->batcher.next();
    const double scale = st->batcher.scale();
    std::optional<kernels::GaussianParams<ad::Var>> g;
    if (gaussian) g = par.gaussian_params<ad::Var>(raw);
    const bool has_data = !st->rows.empty();
    ad::Var total = tape.variable(0.0);
    if (has_data && st->analytic) {
      const LinearGaussianStats stats = st->full_stats ? *st->full_stats : st->lik.stats(subset);
      total = expected_loglik<ad::Var>(stats, *g) * scale;
    } else if (has_data || !gaussian) {
      // MC over the likelihood; flows also carry log p(theta) - log q(theta).
      std::vector<ad::Var> terms;
      terms.reserve(n_mc);
      for (std::size_t s = 0; s < n_mc; ++s) {
        const std::vector<double> eps = standard_normals(par.spec.noise_dim(), rng);
        std::vector<ad::Var> theta;
        ad::Var log_q;
        if (gaussian) {
          theta = kernels::gaussian_transform<ad::Var>(*g, eps);
        } else {
          theta = par.draw<ad::Var>(raw, eps, &log_q);
        }
        const std::span<const ad::Var> th(theta);
        ad::Var term = has_data ? st->lik.total(th, subset, joint ? &rng : nullptr, scale)
                                : tape.variable(0.0);
        if (!gaussian) term = term + kernels::gaussian_log_density<ad::Var>(lifted, th) - log_q;
        terms.push_back(term);
      }
      total = ad::sum(std::span<const ad::Var>(terms)) / static_cast<double>(n_mc);
    }
    if (gaussian) total = total - kernels::gaussian_kl<ad::Var>(*g, lifted);
    return total;
  };
}

Parameterization training_parameterization(const FamilySpec& family, const Posterior& reference,
                                           const TrainConfig& config) {
  if (config.whiten && family.family == Family::kFullGaussian) {
    return Parameterization::whitened_by(family, reference);
  }
  return Parameterization::plain(family);
}

FitResult fit_elbo(const Model& model, const Dataset& data, std::span<const RowId> ids,
                   const FamilySpec& family, const Posterior& prior, const TrainConfig& config,
                   const Posterior* init) {
  config.validate();
  require(family.dim == param_dim(model), ErrorCode::kDimensionMismatch,
          "fit_elbo: family dimension differs from the model");
  require(prior.is_gaussian() && prior.dim() == family.dim, ErrorCode::kUnsupported,
          "fit_elbo: prior must be a Gaussian of the model dimension");
  const Posterior start = init ? *init : default_init(family, prior, config.seed);
  require(family_spec(start).family == family.family && start.dim() == family.dim,
          ErrorCode::kDimensionMismatch, "fit_elbo: initialization does not match the family");
  const Parameterization param = training_parameterization(family_spec(start), prior, config);
  const StochasticObjective objective = elbo_objective(model, data, ids, param, prior, config);
  OptimizeResult opt = optimize(param.to_raw(start), objective, Direction::kAscent, config, kElboStream);
  PosteriorMeta meta{config.seed, "elbo"};
  return FitResult{param.from_raw(opt.raw, meta), std::move(opt.trace), opt.iters,
                   opt.final_objective};
}

namespace {

double discrete_log_joint(const DiscreteToyModel& model, Eigen::Index s, const Dataset& data,
                          std::span<const RowId> ids) {
  double v = std::log(model.prior[s]);
  for (RowId id : ids) {
    const auto y = data.outputs()[static_cast<Eigen::Index>(data.row_of(id))];
    v += std::log(model.table(s, static_cast<Eigen::Index>(y)));
  }
  return v;
}

}  // namespace

double discrete_log_evidence(const DiscreteToyModel& model, const Dataset& data,
                             std::span<const RowId> ids) {
  std::vector<double> terms(static_cast<std::size_t>(model.prior.size()));
  for (std::size_t s = 0; s < terms.size(); ++s) {
    terms[s] = discrete_log_joint(model, static_cast<Eigen::Index>(s), data, ids);
  }
  return ad::log_sum_exp(terms);
}

double discrete_elbo(const DiscreteToyModel& model, std::span<const double> q, const Dataset& data,
                     std::span<const RowId> ids) {
  require(q.size() == static_cast<std::size_t>(model.prior.size()), ErrorCode::kDimensionMismatch,
          "discrete_elbo: q has the wrong support size");
  double total = 0.0;
  for (std::size_t s = 0; s < q.size(); ++s) {
    if (q[s] <= 0.0) continue;
    total += q[s] * (discrete_log_joint(model, static_cast<Eigen::Index>(s), data, ids) - std::log(q[s]));
  }
  return total;
}

std::size_t sample_categorical(std::span<const double> p, RngStream& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t s = 0; s + 1 < p.size(); ++s) {
    acc += p[s];
    if (u < acc) return s;
  }
  return p.size() - 1;
}

Estimate discrete_elbo_estimate(const DiscreteToyModel& model, std::span<const double> q,
                                const Dataset& data, std::span<const RowId> ids, std::size_t n_mc,
                                RngStream& rng) {
  require(n_mc >= 2, ErrorCode::kInvalidArgument, "discrete_elbo_estimate: n_mc must be >= 2");
  double sum = 0.0;
  double sum2 = 0.0;
  for (std::size_t i = 0; i < n_mc; ++i) {
    const std::size_t s = sample_categorical(q, rng);
    const double v = discrete_log_joint(model, static_cast<Eigen::Index>(s), data, ids) - std::log(q[s]);
    sum += v;
    sum2 += v * v;
  }
  const double n = static_cast<double>(n_mc);
  const double mean = sum / n;
  return {mean, std::sqrt(std::max(0.0, sum2 / n - mean * mean) / (n - 1.0))};
}

}  // namespace vbu
