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

#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "test_util.hpp"
#include "vbu/kernels.hpp"
#include "vbu/vi.hpp"

using vbu::Dataset;
using vbu::Family;
using vbu::FamilySpec;
using vbu::Matrix;
using vbu::RowId;
using vbu::Vector;
namespace t = vbu::testing;

namespace {

FamilySpec diag(std::size_t d) { return FamilySpec{Family::kDiagGaussian, d, {}}; }
FamilySpec full(std::size_t d) { return FamilySpec{Family::kFullGaussian, d, {}}; }

double objective_value(const vbu::StochasticObjective& f, std::span<const double> raw,
                       const vbu::RngStream& rng) {
  vbu::ad::Tape tape;
  const auto vars = tape.variables(raw);
  vbu::RngStream r = rng;
  return f(tape, vars, 0, r).value();
}

std::vector<double> objective_grad(const vbu::StochasticObjective& f, std::span<const double> raw,
                                   const vbu::RngStream& rng) {
  vbu::ad::Tape tape;
  const auto vars = tape.variables(raw);
  vbu::RngStream r = rng;
  const auto out = f(tape, vars, 0, r);
  return tape.gradient(out, vars);
}

vbu::TrainConfig quick_config(std::size_t iters = 3000) {
  vbu::TrainConfig c;
  c.learning_rate = 0.01;
  c.learning_rate_final = 5e-4;
  c.max_iters = iters;
  return c;
}

}  // namespace

TEST_CASE("rmsprop update rule") {
  vbu::TrainConfig c;
  std::vector<double> p{0.0, 1.0, -2.0};
  std::vector<double> g{1.0, -3.0, 0.0};
  vbu::OptimizerState st;
  vbu::rmsprop_step(p, g, st, c, vbu::Direction::kAscent);
  CHECK(p[0] == doctest::Approx(1e-4 / (std::sqrt(0.1) + 1e-8)).epsilon(1e-12));
  CHECK(p[0] == doctest::Approx(3.1623e-4).epsilon(1e-4));
  CHECK(p[1] < 1.0);
  CHECK(p[2] == -2.0);
  CHECK(st.v[2] == 0.0);
  CHECK(st.iter == 1);

  // Zero gradient leaves the parameters alone and decays the accumulator.
  std::vector<double> v_before = st.v;
  std::vector<double> p_before = p;
  vbu::rmsprop_step(p, std::vector<double>(3, 0.0), st, c, vbu::Direction::kAscent);
  CHECK(p == p_before);
  for (std::size_t i = 0; i < 3; ++i) CHECK(st.v[i] == doctest::Approx(0.9 * v_before[i]));

  vbu::RngStream rng(4);
  std::vector<double> q(50, 0.0);
  std::vector<double> h(50);
  for (auto& x : h) x = rng.normal();
  vbu::OptimizerState s2;
  vbu::rmsprop_step(q, h, s2, c, vbu::Direction::kDescent);
  for (std::size_t i = 0; i < q.size(); ++i) CHECK(q[i] * h[i] < 0.0);
}

TEST_CASE("train config validation and json") {
  vbu::TrainConfig c;
  c.rmsprop_decay = 1.0;
  CHECK_THROWS_AS(c.validate(), vbu::Error);
  c = {};
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), vbu::Error);
  vbu::TrainConfig d = quick_config();
  d.seed = 77;
  d.minibatch = 10;
  const auto back = vbu::train_config_from_json(vbu::train_config_to_json(d));
  CHECK(vbu::train_config_to_json(back) == vbu::train_config_to_json(d));
  CHECK_THROWS_AS(vbu::train_config_from_json(nlohmann::json{{"learnig_rate", 1.0}}), vbu::Error);
  CHECK(d.step_size(0) == doctest::Approx(0.01));
  CHECK(d.step_size(d.max_iters - 1) == doctest::Approx(5e-4));
}

TEST_CASE("elbo gradient matches finite differences") {
  vbu::RngStream rng(21);
  const auto ys = t::gaussian_rows(12, 1.5, 0.8, rng);
  const Dataset data = t::column_dataset(ys);
  const vbu::Model model = vbu::GaussianMeanModel{0.8};
  const auto prior = vbu::default_prior(model);
  for (bool analytic : {true, false}) {
    vbu::TrainConfig c;
    c.analytic_expectations = analytic;
    c.mc_samples = 4;
    const auto f = vbu::elbo_objective(model, data, data.ids(), vbu::Parameterization::plain(diag(1)), prior, c);
    for (int rep = 0; rep < 20; ++rep) {
      const std::vector<double> raw{2.0 * rng.normal(), 0.5 * rng.normal()};
      const vbu::RngStream noise(rep, 5);
      const auto g = objective_grad(f, raw, noise);
      const auto fd = t::central_diff([&](std::span<const double> x) { return objective_value(f, x, noise); }, raw);
      CHECK(t::rel_error(g, fd) < 1e-4);
    }
  }
  // Multivariate, flow family and a non-conjugate likelihood.
  const auto cls = vbu::generate_classification(40, 2, 2, 2.0, 3);
  const vbu::Model logit = vbu::LogisticRegressionModel{2, 2};
  const auto lprior = vbu::default_prior(logit);
  vbu::TrainConfig c;
  c.mc_samples = 3;
  for (const FamilySpec& spec : {diag(3), full(3)}) {
    const auto f = vbu::elbo_objective(logit, cls, cls.ids(), vbu::training_parameterization(spec, lprior, c), lprior, c);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> raw(spec.num_params());
      for (auto& v : raw) v = 0.5 * rng.normal();
      const vbu::RngStream noise(rep, 6);
      const auto g = objective_grad(f, raw, noise);
      const auto fd = t::central_diff([&](std::span<const double> x) { return objective_value(f, x, noise); }, raw);
      CHECK(t::rel_error(g, fd) < 1e-4);
    }
  }
  FamilySpec flow{Family::kAutoregressiveFlow, 3, {}};
  flow.flow.dim = 3;
  flow.flow.layers = 2;
  flow.flow.hidden = 4;
  const auto ff = vbu::elbo_objective(logit, cls, cls.ids(), vbu::Parameterization::plain(flow), lprior, c);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> raw(flow.num_params());
    for (auto& v : raw) v = 0.2 * rng.normal();
    const vbu::RngStream noise(rep, 7);
    const auto g = objective_grad(ff, raw, noise);
    const auto fd = t::central_diff([&](std::span<const double> x) { return objective_value(ff, x, noise); }, raw);
    CHECK(t::rel_error(g, fd) < 1e-4);
  }
}

TEST_CASE("gaussian kl gradient in both arguments") {
  vbu::RngStream rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t d = 1 + rng.below(3);
    const FamilySpec spec = full(d);
    std::vector<double> x(2 * spec.num_params());
    for (auto& v : x) v = 0.5 * rng.normal();
    const auto kl = [&](auto args) {
      using T = typename decltype(args)::value_type;
      const std::span<const T> a(args.data(), spec.num_params());
      const std::span<const T> b(args.data() + spec.num_params(), spec.num_params());
      return vbu::kernels::gaussian_kl<T>(vbu::gaussian_from_raw<T>(spec, a),
                                          vbu::gaussian_from_raw<T>(spec, b));
    };
    const auto g = t::tape_grad(
        [&](std::span<const vbu::ad::Var> v) { return kl(std::vector<vbu::ad::Var>(v.begin(), v.end())); }, x);
    const auto fd = t::central_diff(
        [&](std::span<const double> v) { return kl(std::vector<double>(v.begin(), v.end())); }, x);
    CHECK(t::rel_error(g, fd) < 1e-4);
  }
}

TEST_CASE("discrete elbo: estimate, bound and objective equivalence") {
  vbu::RngStream rng(99);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto inst = t::random_discrete(rng);
    const Vector q = t::random_simplex(static_cast<std::size_t>(inst.model.prior.size()), rng, 0.0);
    const double exact = vbu::discrete_elbo(inst.model, vbu::as_span(q), inst.data, inst.all);
    const double evidence = vbu::discrete_log_evidence(inst.model, inst.data, inst.all);
    CHECK(exact <= evidence + 1e-10);
    if (rep < 20) {
      const auto est = vbu::discrete_elbo_estimate(inst.model, vbu::as_span(q), inst.data, inst.all, 20000, rng);
      CHECK(std::abs(est.value - exact) < 3.0 * est.std_error + 1e-12);
    }
  }

  // Softmax-parameterized q: ascending the ELBO and descending
  // KL[q || p(theta | D)] visit the same iterates.
  const auto inst = t::random_discrete(rng);
  const Vector post = vbu::discrete_posterior(inst.model, inst.data, inst.all);
  const auto k = static_cast<std::size_t>(post.size());
  std::vector<double> log_joint(k);
  for (std::size_t s = 0; s < k; ++s) {
    const Vector one = Vector::Unit(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(s));
    log_joint[s] = vbu::discrete_elbo(inst.model, vbu::as_span(one), inst.data, inst.all);
  }
  const auto objective = [&](std::span<const vbu::ad::Var> eta, bool elbo) {
    const vbu::ad::Var lse = vbu::ad::log_sum_exp(eta);
    std::vector<vbu::ad::Var> terms;
    for (std::size_t s = 0; s < k; ++s) {
      const vbu::ad::Var log_q = eta[s] - lse;
      const double target = elbo ? log_joint[s] : std::log(post[static_cast<Eigen::Index>(s)]);
      terms.push_back(vbu::ad::exp(log_q) * (elbo ? target - log_q : log_q - target));
    }
    return vbu::ad::sum(std::span<const vbu::ad::Var>(terms));
  };
  const auto softmax = [](std::vector<double> e) {
    const double lse = vbu::ad::log_sum_exp(e);
    for (auto& v : e) v = std::exp(v - lse);
    return e;
  };
  vbu::TrainConfig c;
  c.learning_rate = 0.02;
  c.learning_rate_final = 1e-4;
  c.max_iters = 3000;
  std::vector<double> a(k, 0.0);
  std::vector<double> b(k, 0.0);
  vbu::OptimizerState sa;
  vbu::OptimizerState sb;
  for (std::size_t it = 0; it < c.max_iters; ++it) {
    const auto ga = t::tape_grad([&](std::span<const vbu::ad::Var> e) { return objective(e, true); }, a);
    const auto gb = t::tape_grad([&](std::span<const vbu::ad::Var> e) { return objective(e, false); }, a);
    for (std::size_t s = 0; s < k; ++s) CHECK(std::abs(ga[s] + gb[s]) < 1e-9);
    const auto gb_own = t::tape_grad([&](std::span<const vbu::ad::Var> e) { return objective(e, false); }, b);
    vbu::rmsprop_step(a, ga, sa, c, vbu::Direction::kAscent);
    vbu::rmsprop_step(b, gb_own, sb, c, vbu::Direction::kDescent);
  }
  const auto qa = softmax(a);
  const auto qb = softmax(b);
  for (std::size_t s = 0; s < k; ++s) {
    CHECK(std::abs(qa[s] - post[static_cast<Eigen::Index>(s)]) < 1e-3);
    CHECK(std::abs(qb[s] - post[static_cast<Eigen::Index>(s)]) < 1e-3);
  }
}

TEST_CASE("elbo estimate examples") {
  vbu::RngStream rng(5);
  const auto ys = t::gaussian_rows(15, -0.5, 1.2, rng);
  const Dataset data = t::column_dataset(ys);
  const vbu::Model model = vbu::GaussianMeanModel{1.2};
  const auto prior = vbu::make_diag_gaussian(Vector::Constant(1, 0.3), Vector::Constant(1, 2.0));

  const auto empty = vbu::elbo_estimate(prior, model, data, {}, prior, 10, rng);
  CHECK(empty.value == 0.0);

  const auto exact = t::conjugate_mean_posterior(0.3, 2.0, 1.2, ys);
  const auto q = vbu::make_diag_gaussian(Vector::Constant(1, exact.mean), Vector::Constant(1, exact.sd));
  const auto est = vbu::elbo_estimate(q, model, data, data.ids(), prior, 20000, rng);
  const double evidence = t::conjugate_mean_log_evidence(0.3, 2.0, 1.2, ys);
  CHECK(std::abs(est.value - evidence) < 3.0 * est.std_error + 1e-9);
}

TEST_CASE("fit_elbo reaches known posteriors") {
  SUBCASE("bimodal target") {
    const vbu::Model model = vbu::BimodalSyntheticModel{};
    const Dataset data(Matrix::Zero(1, 1), Vector::Zero(1));
    const auto fit = vbu::fit_elbo(model, data, data.ids(), diag(1), vbu::standard_normal(1), quick_config());
    const auto g = fit.posterior.gaussian();
    CHECK(std::abs(g.mean[0] - 1.004) < 0.05);
    CHECK(std::abs(g.factor[0] - 1.390) < 0.05);
    CHECK(fit.posterior.meta.trainer == "elbo");
  }
  SUBCASE("conjugate gaussian mean") {
    vbu::RngStream rng(17);
    const auto ys = t::gaussian_rows(25, 2.0, 0.5, rng);
    const Dataset data = t::column_dataset(ys);
    const vbu::Model model = vbu::GaussianMeanModel{0.5};
    const auto prior = vbu::make_diag_gaussian(Vector::Constant(1, 0.0), Vector::Constant(1, 3.0));
    const auto exact = t::conjugate_mean_posterior(0.0, 3.0, 0.5, ys);
    for (bool analytic : {true, false}) {
      auto c = quick_config();
      c.analytic_expectations = analytic;
      const auto g = vbu::fit_elbo(model, data, data.ids(), diag(1), prior, c).posterior.gaussian();
      CHECK(g.mean[0] == doctest::Approx(exact.mean).epsilon(0.02));
      CHECK(g.factor[0] * g.factor[0] == doctest::Approx(exact.sd * exact.sd).epsilon(0.02));
    }
  }
  SUBCASE("no observations returns the prior") {
    const vbu::Model model = vbu::LogisticRegressionModel{2, 2};
    const auto data = vbu::generate_classification(10, 2, 2, 1.0, 1);
    const auto prior = vbu::default_prior(model);
    for (const FamilySpec& spec : {diag(3), full(3)}) {
      const auto fit = vbu::fit_elbo(model, data, {}, spec, prior, quick_config(4000));
      CHECK(vbu::kl_gaussian(fit.posterior, prior) < 1e-3);
    }
  }
}

TEST_CASE("fit_elbo is deterministic per seed") {
  const auto data = vbu::generate_classification(60, 2, 2, 1.5, 2);
  const vbu::Model model = vbu::LogisticRegressionModel{2, 2};
  auto c = quick_config(200);
  c.seed = 12;
  c.minibatch = 16;
  const auto a = vbu::fit_elbo(model, data, data.ids(), full(3), vbu::default_prior(model), c);
  const auto b = vbu::fit_elbo(model, data, data.ids(), full(3), vbu::default_prior(model), c);
  CHECK(vbu::trace_csv(a.trace) == vbu::trace_csv(b.trace));
  CHECK(vbu::pack(a.posterior) == vbu::pack(b.posterior));
  c.seed = 13;
  const auto other = vbu::fit_elbo(model, data, data.ids(), full(3), vbu::default_prior(model), c);
  CHECK(vbu::pack(other.posterior) != vbu::pack(a.posterior));
}

TEST_CASE("divergence is reported with the last finite state") {
  const vbu::Model model = vbu::GaussianMeanModel{1.0};
  const Dataset data = t::column_dataset({1.0, 2.0});
  auto c = quick_config(50);
  c.learning_rate = 1e300;
  c.learning_rate_final = 0.0;
  try {
    vbu::fit_elbo(model, data, data.ids(), diag(1), vbu::default_prior(model), c);
    FAIL("expected divergence");
  } catch (const vbu::DivergenceError& e) {
    CHECK(e.code() == vbu::ErrorCode::kDiverged);
    for (double v : e.last_raw()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("minibatch and full batch fits agree on sparse GP regression") {
  const auto data = vbu::generate_gp_regression(2000, -3.0, 3.0, 0.8, 1.0, 0.3, 4);
  vbu::RngStream rng(6);
  Vector ls = Vector::Constant(1, 1.0 / 0.8);
  const auto gp = vbu::SparseGPModel::create(vbu::select_inducing_inputs(data.inputs(), 10, rng), ls,
                                              1.0, vbu::GpKind::kRegressor, 0.3);
  const vbu::Model model = gp;
  const auto prior = vbu::default_prior(model);
  auto c = quick_config(3000);
  const auto whole = vbu::fit_elbo(model, data, data.ids(), full(10), prior, c);
  c.minibatch = 200;
  const auto batched = vbu::fit_elbo(model, data, data.ids(), full(10), prior, c);
  CHECK(vbu::kl_gaussian(batched.posterior, whole.posterior) < 0.05);

  // Degenerate batching replays the full-batch run exactly.
  c.minibatch = data.size();
  const auto same = vbu::fit_elbo(model, data, data.ids(), full(10), prior, c);
  CHECK(vbu::pack(same.posterior) == vbu::pack(whole.posterior));
}
