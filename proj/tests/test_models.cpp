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
#include <filesystem>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "vbu/json_io.hpp"
#include "vbu/models.hpp"

using vbu::Dataset;
using vbu::Matrix;
using vbu::Model;
using vbu::Vector;

namespace {

Dataset one_row(double x, double y) {
  Matrix in(1, 1);
  in << x;
  Vector out(1);
  out << y;
  return Dataset(in, out);
}

vbu::SparseGPModel small_gp(vbu::GpKind kind, vbu::RngStream& rng, std::size_t m = 5) {
  Matrix z(static_cast<Eigen::Index>(m), 2);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    z(i, 0) = 2.0 * rng.normal();
    z(i, 1) = 2.0 * rng.normal();
  }
  Vector ls(2);
  ls << 1.56, 1.35;
  return vbu::SparseGPModel::create(z, ls, 4.74, kind, 0.3);
}

vbu::Posterior random_qu(std::size_t m, vbu::RngStream& rng) {
  Vector mean(static_cast<Eigen::Index>(m));
  Matrix l = Matrix::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    mean[i] = rng.normal();
    for (Eigen::Index j = 0; j < i; ++j) l(i, j) = 0.3 * rng.normal();
    l(i, i) = 0.3 + rng.uniform();
  }
  return vbu::make_full_gaussian(mean, l);
}

}  // namespace

TEST_CASE("point log-likelihood examples") {
  const Model logistic = vbu::LogisticRegressionModel{1, 2};
  const std::vector<double> zero{0.0, 0.0};
  CHECK(vbu::log_lik_point(logistic, zero, one_row(0.7, 1.0), 0) == doctest::Approx(std::log(0.5)));
  CHECK(vbu::log_lik_point(logistic, zero, one_row(0.7, 0.0), 0) == doctest::Approx(std::log(0.5)));
  const Model linreg = vbu::LinearRegressionModel{3, 0.05};
  const std::vector<double> coef{2.0, -3.0, 1.0, 0.0};
  CHECK(vbu::log_lik_point(linreg, coef, one_row(1.0, 0.0), 0) ==
        doctest::Approx(-0.5 * std::log(2.0 * M_PI * 0.0025)).epsilon(1e-14));
  CHECK(vbu::log_lik_point(linreg, coef, one_row(1.0, 0.0), 0) == doctest::Approx(2.07679).epsilon(1e-5));
  const Model bimodal = vbu::BimodalSyntheticModel{};
  const std::vector<double> t0{0.0};
  CHECK(vbu::log_lik_point(bimodal, t0, one_row(0.0, 0.0), 0) ==
        doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-14));
  // Against the defining ratio of Gaussian densities.
  for (double t : {-1.5, 0.3, 2.7}) {
    const double ratio = std::exp(-0.5 * (t - 2.0) * (t - 2.0)) / std::exp(-0.5 * t * t);
    const std::vector<double> th{t};
    CHECK(vbu::log_lik_point(bimodal, th, one_row(0.0, 0.0), 0) ==
          doctest::Approx(std::log(1.0 + ratio)).epsilon(1e-12));
  }
  const Model gamma = vbu::GammaShapeModel{2.0};
  const std::vector<double> a{3.0};
  const double x = 1.7;
  const double expected = 3.0 * std::log(2.0) - std::lgamma(3.0) + 2.0 * std::log(x) - 2.0 * x;
  CHECK(vbu::log_lik_point(gamma, a, one_row(0.0, x), 0) == doctest::Approx(expected).epsilon(1e-14));
  CHECK_THROWS_AS(vbu::log_lik_point(gamma, a, one_row(0.0, -1.0), 0), vbu::Error);
}

TEST_CASE("set log-likelihood sums point terms") {
  const Model linreg = vbu::LinearRegressionModel{3, 0.05};
  const std::vector<double> coef{1.9, -3.1, 1.2, 0.05};
  const double cf[] = {2.0, -3.0, 1.0, 0.0};
  const Dataset data = vbu::generate_cubic(40, cf, 0.05, {-1.0, 2.0}, 3);
  CHECK(vbu::log_lik_set(linreg, coef, data, std::vector<vbu::RowId>{}) == 0.0);
  const std::vector<vbu::RowId> single{7};
  CHECK(vbu::log_lik_set(linreg, coef, data, single) == vbu::log_lik_point(linreg, coef, data, 7));
  const std::vector<vbu::RowId> five{1, 5, 9, 22, 30};
  double acc = 0.0;
  for (auto id : five) {
    const double xv = data.inputs()(id, 0);
    const double pred = ((coef[0] * xv + coef[1]) * xv + coef[2]) * xv + coef[3];
    const double r = data.outputs()[id] - pred;
    acc += -0.5 * std::log(2.0 * M_PI * 0.0025) - r * r / (2.0 * 0.0025);
  }
  CHECK(std::abs(vbu::log_lik_set(linreg, coef, data, five) - acc) < 1e-12 * std::abs(acc));
  const std::vector<vbu::RowId> unknown{1000};
  CHECK_THROWS_AS(vbu::log_lik_set(linreg, coef, data, unknown), vbu::Error);
  // Partition additivity.
  vbu::RngStream rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<vbu::RowId> erased;
    for (auto id : data.ids()) {
      if (rng.uniform() < 0.3) erased.push_back(id);
    }
    const auto part = vbu::ErasePartition::from_erased(data, erased);
    const double whole = vbu::log_lik_set(linreg, coef, data, data.ids());
    const double split = vbu::log_lik_set(linreg, coef, data, part.remaining_ids) +
                         vbu::log_lik_set(linreg, coef, data, part.erased_ids);
    CHECK(std::abs(whole - split) <= 1e-9 * std::abs(whole));
  }
}

TEST_CASE("model gradients match finite differences") {
  vbu::RngStream rng(5);
  const double cf[] = {2.0, -3.0, 1.0, 0.0};
  std::vector<std::pair<Model, Dataset>> cases;
  cases.emplace_back(vbu::LinearRegressionModel{3, 0.3}, vbu::generate_cubic(10, cf, 0.3, {-1.0, 2.0}, 1));
  cases.emplace_back(vbu::GaussianMeanModel{0.7}, vbu::generate_cubic(10, cf, 1.0, {-1.0, 1.0}, 2));
  cases.emplace_back(vbu::LogisticRegressionModel{3, 2}, vbu::generate_classification(12, 3, 2, 1.0, 3));
  cases.emplace_back(vbu::LogisticRegressionModel{3, 4}, vbu::generate_classification(12, 3, 4, 1.0, 4));
  cases.emplace_back(vbu::GammaShapeModel{1.5}, vbu::generate_gamma(10, 3.0, 1.5, 5));
  cases.emplace_back(vbu::BimodalSyntheticModel{}, one_row(0.0, 0.0));
  {
    vbu::RngStream grng(6);
    const auto moon = vbu::generate_moon(6, 0.1, 7);
    cases.emplace_back(small_gp(vbu::GpKind::kClassifier, grng), moon);
    Matrix in = moon.inputs();
    Vector out = moon.inputs().col(0).array().sin();
    cases.emplace_back(small_gp(vbu::GpKind::kRegressor, grng), Dataset(in, out));
  }
  for (const auto& [model, data] : cases) {
    std::vector<std::size_t> rows(data.size());
    std::iota(rows.begin(), rows.end(), 0);
    const vbu::Likelihood lik(model, data, rows);
    const bool joint = std::holds_alternative<vbu::SparseGPModel>(model);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> theta(lik.dim());
      for (auto& v : theta) v = 0.5 * rng.normal();
      if (std::holds_alternative<vbu::GammaShapeModel>(model)) theta[0] = 1.0 + 3.0 * rng.uniform();
      std::vector<double> g(lik.dim(), 0.0);
      lik.total(theta, {}, nullptr, 1.0, g.data());
      const auto fd = vbu::testing::central_diff(
          [&](std::span<const double> t) { return lik.total(t, {}, nullptr, 1.0, nullptr); }, theta);
      CHECK(vbu::testing::rel_error(g, fd) < 1e-4);
      if (joint) {
        // Joint sampling with the noise held fixed.
        const vbu::RngStream base(100 + rep);
        auto r0 = base;
        std::vector<double> gj(lik.dim(), 0.0);
        lik.total(theta, {}, &r0, 1.0, gj.data());
        const auto fdj = vbu::testing::central_diff(
            [&](std::span<const double> t) {
              auto r = base;
              return lik.total(t, {}, &r, 1.0, nullptr);
            },
            theta);
        CHECK(vbu::testing::rel_error(gj, fdj) < 1e-4);
      }
    }
  }
}

TEST_CASE("sparse GP conditional") {
  vbu::RngStream rng(21);
  const auto gp = small_gp(vbu::GpKind::kRegressor, rng);
  const auto q = random_qu(5, rng);
  const auto& fg = q.as<vbu::FullGaussian>();
  const Matrix sigma = fg.covariance();
  for (Eigen::Index i = 0; i < 5; ++i) {
    const std::vector<double> x{gp.inducing(i, 0), gp.inducing(i, 1)};
    const auto m = vbu::gp_conditional(gp, q, x);
    CHECK(std::abs(m.mean - fg.mean[i]) <= 1e-4 * std::max(1.0, std::abs(fg.mean[i])));
    CHECK(std::abs(m.var - sigma(i, i)) <= 1e-4 * sigma(i, i) + 1e-6 * gp.signal_var);
  }
  const std::vector<double> far{100.0, -100.0};
  const auto mf = vbu::gp_conditional(gp, q, far);
  CHECK(std::abs(mf.mean) < 1e-12);
  CHECK(mf.var == doctest::Approx(gp.signal_var).epsilon(1e-12));
  // Dense joint-Gaussian oracle: prior covariance over (f_x, f_u), explicit
  // inverse, then push q(f_u) through the exact conditional.
  for (int rep = 0; rep < 20; ++rep) {
    const std::vector<double> x{1.5 * rng.normal(), 1.5 * rng.normal()};
    Matrix joint(6, 6);
    std::vector<std::vector<double>> pts{x};
    for (Eigen::Index i = 0; i < 5; ++i) pts.push_back({gp.inducing(i, 0), gp.inducing(i, 1)});
    for (int a = 0; a < 6; ++a) {
      for (int b = 0; b < 6; ++b) {
        double r2 = 0.0;
        for (int k = 0; k < 2; ++k) {
          const double dd = gp.lengthscales[k] * (pts[a][k] - pts[b][k]);
          r2 += dd * dd;
        }
        joint(a, b) = gp.signal_var * std::exp(-0.5 * r2);
      }
    }
    joint.bottomRightCorner(5, 5).diagonal().array() += 1e-6 * gp.signal_var;
    const Matrix kinv = joint.bottomRightCorner(5, 5).inverse();
    const Vector k = joint.block(1, 0, 5, 1);
    const double cond_var = joint(0, 0) - k.dot(kinv * k);
    const Vector w = kinv * k;
    const double mean = w.dot(fg.mean);
    const double var = cond_var + w.dot(sigma * w);
    const auto m = vbu::gp_conditional(gp, q, x);
    CHECK(std::abs(m.mean - mean) < 1e-8 * std::max(1.0, std::abs(mean)));
    CHECK(std::abs(m.var - var) < 1e-8 * std::max(1.0, var));
    CHECK(m.var > 0.0);
  }
}

TEST_CASE("sparse GP regression expected log-likelihood") {
  vbu::RngStream rng(22);
  const auto gp = small_gp(vbu::GpKind::kRegressor, rng);
  const double s2 = gp.noise_std * gp.noise_std;
  // Zero-variance limit at an inducing input with a point-mass q.
  Vector mean(5);
  for (auto& v : mean) v = rng.normal();
  const auto point = vbu::make_diag_gaussian(mean, Vector::Constant(5, 1e-12));
  const std::vector<double> x0{gp.inducing(2, 0), gp.inducing(2, 1)};
  const auto m0 = vbu::gp_conditional(gp, point, x0);
  const double base = -0.5 * std::log(2.0 * M_PI * s2);
  CHECK(vbu::gp_regression_expected_loglik(gp, point, x0, m0.mean) ==
        doctest::Approx(base - m0.var / (2.0 * s2)).epsilon(1e-12));
  CHECK(std::abs(vbu::gp_regression_expected_loglik(gp, point, x0, m0.mean) - base) < 1e-4);
  // Linear in the marginal variance.
  const auto q1 = vbu::make_diag_gaussian(mean, Vector::Constant(5, 0.5));
  const auto q2 = vbu::make_diag_gaussian(mean, Vector::Constant(5, 0.5 * std::sqrt(2.0)));
  const std::vector<double> x{0.3, -0.4};
  const auto a1 = vbu::gp_conditional(gp, q1, x);
  const auto a2 = vbu::gp_conditional(gp, q2, x);
  const double l1 = vbu::gp_regression_expected_loglik(gp, q1, x, 0.2);
  const double l2 = vbu::gp_regression_expected_loglik(gp, q2, x, 0.2);
  CHECK(l1 - l2 == doctest::Approx((a2.var - a1.var) / (2.0 * s2)).epsilon(1e-10));
  // Monte Carlo over f_u then f_x.
  const auto q = random_qu(5, rng);
  const auto feats = vbu::gp_features(gp, x);
  const double y = 0.7;
  const std::size_t n = 200000;
  const auto draws = vbu::sample(q, n, rng);
  double acc = 0.0;
  double acc2 = 0.0;
  for (Eigen::Index r = 0; r < draws.theta.rows(); ++r) {
    const double f = draws.theta.row(r).dot(feats.a) + std::sqrt(feats.c) * rng.normal();
    const double v = base - (y - f) * (y - f) / (2.0 * s2);
    acc += v;
    acc2 += v * v;
  }
  const double mc = acc / n;
  const double se = std::sqrt((acc2 / n - mc * mc) / n);
  CHECK(std::abs(mc - vbu::gp_regression_expected_loglik(gp, q, x, y)) < 3.0 * se);
  // The bound likelihood's closed-form path agrees with the pointwise formula.
  const Dataset data(Matrix(Eigen::Map<const Matrix>(x.data(), 1, 2)), Vector::Constant(1, y));
  const Model model = gp;
  const std::size_t rows[] = {0};
  const vbu::Likelihood lik(model, data, rows);
  const double closed = vbu::expected_loglik<double>(lik.stats({}), q.gaussian());
  CHECK(closed == doctest::Approx(vbu::gp_regression_expected_loglik(gp, q, x, y)).epsilon(1e-12));
  const vbu::Model clf = small_gp(vbu::GpKind::kClassifier, rng);
  CHECK_THROWS_AS(vbu::gp_regression_expected_loglik(std::get<vbu::SparseGPModel>(clf), q, x, y), vbu::Error);
}

TEST_CASE("duplicate inducing inputs fail loudly") {
  Matrix z(3, 1);
  z << 0.0, 0.0, 1.0;
  Vector ls(1);
  ls << 1.0;
  // Jitter keeps duplicates factorizable; what matters is no silent NaN.
  const auto gp = vbu::SparseGPModel::create(z, ls, 1.0, vbu::GpKind::kRegressor, 0.1);
  const std::vector<double> x{0.5};
  const auto f = vbu::gp_features(gp, x);
  CHECK(f.a.allFinite());
  CHECK(f.c >= 0.0);
}

TEST_CASE("moon generator") {
  const auto a = vbu::generate_moon(50, 0.1, 4);
  const auto b = vbu::generate_moon(50, 0.1, 4);
  CHECK(a.inputs() == b.inputs());
  CHECK(a.outputs() == b.outputs());
  CHECK(a.size() == 100);
  CHECK((a.outputs().array() == 0.0).count() == 50);
  CHECK((a.outputs().array() == 1.0).count() == 50);
  const auto clean = vbu::generate_moon(50, 0.0, 4);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean.outputs()[static_cast<Eigen::Index>(i)] == 0.0) {
      CHECK(clean.inputs()(static_cast<Eigen::Index>(i), 1) >= -0.05);
      const double r = clean.inputs().row(static_cast<Eigen::Index>(i)).norm();
      CHECK(r == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("cubic generator") {
  const double cf[] = {2.0, -3.0, 1.0, 0.0};
  const auto clean = vbu::generate_cubic(100, cf, 0.0, {-1.0, 2.0}, 1);
  const Model m = vbu::LinearRegressionModel{3, 0.05};
  const std::vector<double> coef(cf, cf + 4);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double xv = clean.inputs()(static_cast<Eigen::Index>(i), 0);
    CHECK(xv >= -1.0);
    CHECK(xv <= 2.0);
    CHECK(clean.outputs()[static_cast<Eigen::Index>(i)] ==
          doctest::Approx(((2.0 * xv - 3.0) * xv + 1.0) * xv).epsilon(1e-12));
  }
  CHECK(((2.0 * 1.0 - 3.0) * 1.0 + 1.0) * 1.0 + 0.0 == 0.0);
  const auto noisy = vbu::generate_cubic(10000, cf, 0.05, {-1.0, 2.0}, 2);
  double s = 0.0;
  double s2 = 0.0;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    const double xv = noisy.inputs()(static_cast<Eigen::Index>(i), 0);
    const double r = noisy.outputs()[static_cast<Eigen::Index>(i)] - ((2.0 * xv - 3.0) * xv + 1.0) * xv;
    s += r;
    s2 += r * r;
  }
  const double sd = std::sqrt(s2 / 10000.0 - (s / 10000.0) * (s / 10000.0));
  CHECK(sd >= 0.04);
  CHECK(sd <= 0.06);
  const auto again = vbu::generate_cubic(10000, cf, 0.05, {-1.0, 2.0}, 2);
  CHECK(again.outputs() == noisy.outputs());
}

TEST_CASE("gamma generator moments") {
  const auto d = vbu::generate_gamma(100000, 3.0, 2.0, 9);
  const double mean = d.outputs().mean();
  const double var = (d.outputs().array() - mean).square().mean();
  CHECK(mean == doctest::Approx(1.5).epsilon(0.01));
  CHECK(var == doctest::Approx(0.75).epsilon(0.03));
}

TEST_CASE("discrete posterior equals division by the erased likelihood") {
  vbu::RngStream rng(13);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t k = 2 + rng.below(7);
    const std::size_t ny = 2 + rng.below(4);
    vbu::DiscreteToyModel m{Vector(k), Matrix(k, ny)};
    for (std::size_t s = 0; s < k; ++s) {
      m.prior[s] = 0.05 + rng.uniform();
      for (std::size_t y = 0; y < ny; ++y) m.table(s, y) = 0.05 + rng.uniform();
      m.table.row(s) /= m.table.row(s).sum();
    }
    m.prior /= m.prior.sum();
    const std::size_t n = 2 + rng.below(8);
    Vector ys(static_cast<Eigen::Index>(n));
    for (auto& v : ys) v = static_cast<double>(rng.below(ny));
    const Dataset data(Matrix::Zero(static_cast<Eigen::Index>(n), 1), ys);
    std::vector<vbu::RowId> erased;
    std::vector<vbu::RowId> remaining;
    for (auto id : data.ids()) (rng.uniform() < 0.4 ? erased : remaining).push_back(id);
    const Vector full = vbu::discrete_posterior(m, data, data.ids());
    const Vector retrain = vbu::discrete_posterior(m, data, remaining);
    CHECK(std::abs(full.sum() - 1.0) < 1e-12);
    // Naive oracle: full posterior divided by p(D_e | theta), renormalized.
    Vector divided(static_cast<Eigen::Index>(k));
    for (std::size_t s = 0; s < k; ++s) {
      double lik = 1.0;
      for (auto id : erased) lik *= m.table(s, static_cast<Eigen::Index>(ys[id]));
      divided[s] = full[s] / lik;
    }
    divided /= divided.sum();
    CHECK((divided - retrain).lpNorm<Eigen::Infinity>() < 1e-12);
  }
}

TEST_CASE("dataset csv round trip and validation") {
  const auto moon = vbu::generate_moon(5, 0.1, 1);
  const auto dir = std::filesystem::temp_directory_path() / "vbu_test_models";
  std::filesystem::create_directories(dir);
  vbu::save_dataset_csv(dir / "moon.csv", moon);
  const auto back = vbu::load_dataset_csv(dir / "moon.csv");
  CHECK(back.inputs() == moon.inputs());
  CHECK(back.outputs() == moon.outputs());
  CHECK(back.ids() == moon.ids());
  vbu::write_text_file(dir / "dup.csv", "id,x0,y\n1,0.5,1\n1,0.7,0\n");
  CHECK_THROWS_AS(vbu::load_dataset_csv(dir / "dup.csv"), vbu::Error);
  vbu::write_text_file(dir / "bad.csv", "id,x0,y\n1,abc,1\n");
  CHECK_THROWS_AS(vbu::load_dataset_csv(dir / "bad.csv"), vbu::Error);
  CHECK_THROWS_AS(moon.row_of(999), vbu::Error);
  const std::vector<vbu::RowId> erased{2, 4};
  const auto part = vbu::ErasePartition::from_erased(moon, erased);
  CHECK(part.erased_ids.size() + part.remaining_ids.size() == moon.size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("model json round trip") {
  vbu::RngStream rng(3);
  std::vector<Model> models{vbu::LinearRegressionModel{3, 0.05}, vbu::LogisticRegressionModel{4, 2},
                            vbu::GammaShapeModel{1.5}, vbu::BimodalSyntheticModel{},
                            small_gp(vbu::GpKind::kClassifier, rng)};
  for (const auto& m : models) {
    const auto j = vbu::model_to_json(m);
    const Model back = vbu::model_from_json(vbu::parse_json(vbu::dump_json(j)));
    CHECK(vbu::model_name(back) == vbu::model_name(m));
    CHECK(vbu::param_dim(back) == vbu::param_dim(m));
    CHECK(vbu::model_to_json(back) == j);
  }
  CHECK_THROWS_AS(vbu::model_from_json(vbu::parse_json(R"({"kind":"nope"})")), vbu::Error);
}
