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
#include <limits>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "vbu/distributions.hpp"

using vbu::Matrix;
using vbu::Posterior;
using vbu::Vector;

namespace {

constexpr double kHalfLogTwoPi = 0.91893853320467274178;

// Flow with every mask-permitted weight drawn at random.
vbu::AutoregressiveFlow random_flow(std::size_t d, vbu::RngStream& rng, double scale,
                                    std::size_t layers = 3, std::size_t hidden = 8) {
  auto f = vbu::AutoregressiveFlow::identity(d, layers, hidden);
  const auto& s = f.shape;
  for (std::size_t l = 0; l < layers; ++l) {
    double* p = f.params.data() + l * s.params_per_layer();
    for (std::size_t k = 0; k < hidden; ++k) {
      for (std::size_t i = 0; i < s.degree(k); ++i) p[s.w1_offset() + k * d + i] = scale * rng.normal();
      p[s.b1_offset() + k] = scale * rng.normal();
    }
    for (std::size_t row = 0; row < 2 * d; ++row) {
      for (std::size_t k = 0; k < s.hidden_prefix(row % d); ++k) {
        p[s.w2_offset() + row * hidden + k] = scale * rng.normal();
      }
      p[s.b2_offset() + row] = scale * rng.normal();
    }
  }
  return f;
}

Posterior random_full(std::size_t d, vbu::RngStream& rng) {
  Vector mean(d);
  Matrix l = Matrix::Zero(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    mean[i] = rng.normal();
    for (std::size_t j = 0; j < i; ++j) l(i, j) = 0.5 * rng.normal();
    l(i, i) = 0.5 + rng.uniform();
  }
  return vbu::make_full_gaussian(mean, l);
}

Posterior random_diag(std::size_t d, vbu::RngStream& rng) {
  Vector mean(d);
  Vector sd(d);
  for (std::size_t i = 0; i < d; ++i) {
    mean[i] = rng.normal();
    sd[i] = 0.3 + rng.uniform();
  }
  return vbu::make_diag_gaussian(mean, sd);
}

}  // namespace

TEST_CASE("sampling is replayable and reparameterized") {
  const auto q = vbu::standard_normal(1);
  vbu::RngStream a(9);
  vbu::RngStream b(9);
  const auto d1 = vbu::sample(q, 2, a);
  const auto d2 = vbu::sample(q, 2, b);
  CHECK(d1.theta == d2.theta);
  for (int r = 0; r < 2; ++r) {
    const Vector noise = d1.noise.row(r).transpose();
    CHECK(vbu::transform_noise(q, vbu::as_span(noise))[0] == d1.theta(r, 0));
  }
  CHECK_THROWS_AS(vbu::sample(q, 0, a), vbu::Error);
}

TEST_CASE("degenerate scale collapses onto the mean") {
  Vector mean(2);
  mean << 0.7, -1.3;
  const Posterior q(vbu::DiagGaussian{mean, Vector::Constant(2, -20.0)});
  vbu::RngStream rng(1);
  const auto draws = vbu::sample(q, 50, rng);
  for (Eigen::Index r = 0; r < 50; ++r) {
    CHECK(std::abs(draws.theta(r, 0) - 0.7) < 1e-6);
    CHECK(std::abs(draws.theta(r, 1) + 1.3) < 1e-6);
  }
}

TEST_CASE("full Gaussian sample moments") {
  Vector mean(2);
  mean << 1.0, -2.0;
  Matrix l(2, 2);
  l << 1.5, 0.0, 0.8, 0.6;
  const auto q = vbu::make_full_gaussian(mean, l);
  vbu::RngStream rng(2024);
  const std::size_t n = 100000;
  const auto draws = vbu::sample(q, n, rng);
  const Vector m = draws.theta.colwise().mean().transpose();
  const Matrix centered = draws.theta.rowwise() - m.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(n - 1);
  const Matrix truth = l * l.transpose();
  for (int i = 0; i < 2; ++i) {
    CHECK(std::abs(m[i] - mean[i]) < 3.0 * std::sqrt(truth(i, i) / n));
    for (int j = 0; j < 2; ++j) {
      CHECK(std::abs(cov(i, j) - truth(i, j)) < 0.05 * std::abs(truth(i, j)));
    }
  }
}

TEST_CASE("non-finite parameters are rejected") {
  Vector mean(1);
  mean << std::numeric_limits<double>::quiet_NaN();
  try {
    vbu::make_diag_gaussian(mean, Vector::Ones(1));
    FAIL("expected an error");
  } catch (const vbu::Error& e) {
    CHECK(e.code() == vbu::ErrorCode::kParameterCorruption);
  }
  auto f = vbu::AutoregressiveFlow::identity(2, 1, 4);
  f.params[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(Posterior{f}, vbu::Error);
  auto masked = vbu::AutoregressiveFlow::identity(2, 1, 4);
  masked.params[1] = 0.3;  // hidden unit 0 may only read input 0
  CHECK_THROWS_AS(Posterior{masked}, vbu::Error);
  Vector w(2);
  w << 0.5, 0.6;
  CHECK_THROWS_AS(Posterior(vbu::GaussianMixture1D{w, Vector::Zero(2), Vector::Ones(2)}),
                  vbu::Error);
  Matrix upper = Matrix::Identity(2, 2);
  upper(0, 1) = 0.1;
  CHECK_THROWS_AS(vbu::make_full_gaussian(Vector::Zero(2), upper), vbu::Error);
}

TEST_CASE("log density examples") {
  const auto q = vbu::standard_normal(1);
  const double zero = 0.0;
  CHECK(vbu::log_density(q, {&zero, 1}) == doctest::Approx(-kHalfLogTwoPi).epsilon(1e-14));
  const Posterior flow(vbu::AutoregressiveFlow::identity(3));
  const auto base = vbu::standard_normal(3);
  vbu::RngStream rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> th{rng.normal(), rng.normal(), rng.normal()};
    CHECK(vbu::log_density(flow, th) == doctest::Approx(vbu::log_density(base, th)));
  }
  std::vector<double> wrong{0.0, 0.0};
  CHECK_THROWS_AS(vbu::log_density(q, wrong), vbu::Error);
}

TEST_CASE("densities integrate to one") {
  vbu::RngStream rng(17);
  std::vector<Posterior> cases;
  cases.push_back(random_full(2, rng));
  cases.push_back(random_diag(1, rng));
  cases.push_back(Posterior(random_flow(2, rng, 0.4)));
  cases.push_back(Posterior(random_flow(1, rng, 0.4)));
  Vector w(2);
  w << 0.3, 0.7;
  Vector mu(2);
  mu << -1.0, 2.0;
  Vector sd(2);
  sd << 0.5, 1.2;
  cases.push_back(Posterior(vbu::GaussianMixture1D{w, mu, sd}));
  for (const auto& q : cases) {
    // Importance sampling from a wide Gaussian proposal.
    const std::size_t d = q.dim();
    const auto proposal = vbu::make_diag_gaussian(Vector::Zero(d), Vector::Constant(d, 4.0));
    const auto draws = vbu::sample(proposal, 200000, rng);
    double total = 0.0;
    for (Eigen::Index r = 0; r < draws.theta.rows(); ++r) {
      const Vector th = draws.theta.row(r).transpose();
      total += std::exp(vbu::log_density(q, vbu::as_span(th)) -
                        vbu::log_density(proposal, vbu::as_span(th)));
    }
    CHECK(std::abs(total / draws.theta.rows() - 1.0) < 0.01);
  }
}

TEST_CASE("closed-form Gaussian KL examples") {
  const auto n01 = vbu::standard_normal(1);
  CHECK(vbu::kl_gaussian(n01, n01) == 0.0);
  const auto n11 = vbu::make_diag_gaussian(Vector::Ones(1), Vector::Ones(1));
  CHECK(vbu::kl_gaussian(n11, n01) == doctest::Approx(0.5).epsilon(1e-14));
  const auto wide = vbu::make_diag_gaussian(Vector::Zero(2), Vector::Constant(2, std::sqrt(2.0)));
  const double expected = 1.0 - std::log(2.0);
  CHECK(vbu::kl_gaussian(wide, vbu::standard_normal(2)) == doctest::Approx(expected).epsilon(1e-12));
  const auto wide_full = vbu::make_full_gaussian(Vector::Zero(2), std::sqrt(2.0) * Matrix::Identity(2, 2));
  CHECK(vbu::kl_gaussian(wide_full, vbu::standard_normal(2)) == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(vbu::kl_gaussian(n01, wide), vbu::Error);
}

TEST_CASE("KL agrees with one-dimensional quadrature") {
  const auto q = vbu::make_diag_gaussian(Vector::Constant(1, 0.4), Vector::Constant(1, 0.7));
  const auto p = vbu::make_diag_gaussian(Vector::Constant(1, -0.3), Vector::Constant(1, 1.6));
  double quad = 0.0;
  const double h = 1e-3;
  for (double t = -12.0; t <= 12.0; t += h) {
    const double lq = vbu::log_density(q, {&t, 1});
    const double lp = vbu::log_density(p, {&t, 1});
    quad += std::exp(lq) * (lq - lp) * h;
  }
  CHECK(vbu::kl_gaussian(q, p) == doctest::Approx(quad).epsilon(1e-8));
}

TEST_CASE("KL is non-negative and vanishes only at equality") {
  vbu::RngStream rng(99);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t d = 1 + rep % 3;
    const auto a = (rep % 2) ? random_full(d, rng) : random_diag(d, rng);
    const auto b = (rep % 4 < 2) ? random_full(d, rng) : random_diag(d, rng);
    CHECK(vbu::kl_gaussian(a, b) > 0.0);
    CHECK(std::abs(vbu::kl_gaussian(a, a)) < 1e-12);
  }
}

TEST_CASE("entropy") {
  vbu::RngStream rng(4);
  const auto e1 = vbu::entropy(vbu::standard_normal(1), 0, rng);
  CHECK(e1.exact);
  CHECK(e1.value == doctest::Approx(0.5 * std::log(2.0 * M_PI * M_E)).epsilon(1e-14));
  const auto e4 = vbu::entropy(vbu::make_diag_gaussian(Vector::Zero(1), Vector::Constant(1, 2.0)), 0, rng);
  CHECK(e4.value - e1.value == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  const Posterior flow(vbu::AutoregressiveFlow::identity(2));
  const auto ef = vbu::entropy(flow, 20000, rng);
  const double base = vbu::entropy(vbu::standard_normal(2), 0, rng).value;
  CHECK(!ef.exact);
  CHECK(std::abs(ef.value - base) < 3.0 * ef.std_error);
  // Closed form vs Monte Carlo for a correlated Gaussian.
  const auto q = random_full(3, rng);
  const auto draws = vbu::sample(q, 50000, rng);
  double mean = 0.0;
  double sq = 0.0;
  for (Eigen::Index r = 0; r < draws.theta.rows(); ++r) {
    const Vector th = draws.theta.row(r).transpose();
    const double v = -vbu::log_density(q, vbu::as_span(th));
    mean += v;
    sq += v * v;
  }
  const double n = static_cast<double>(draws.theta.rows());
  mean /= n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  CHECK(std::abs(mean - vbu::entropy(q, 0, rng).value) < 3.0 * se);
}

TEST_CASE("mode density") {
  const auto m = vbu::mode_density(vbu::standard_normal(1));
  CHECK(m.exact);
  CHECK(std::exp(m.log_value) == doctest::Approx(1.0 / std::sqrt(2.0 * M_PI)).epsilon(1e-14));
  vbu::RngStream rng(8);
  const auto q = random_full(2, rng);
  const auto& l = q.as<vbu::FullGaussian>().chol_lower;
  const double expected = 1.0 / (2.0 * M_PI * l.determinant());
  CHECK(std::exp(vbu::mode_density(q).log_value) == doctest::Approx(expected).epsilon(1e-12));
  // Dense grid search never beats the reported value.
  const Vector c = q.as<vbu::FullGaussian>().mean;
  double best = -1e300;
  for (double a = -3.0; a <= 3.0; a += 0.01) {
    for (double b = -3.0; b <= 3.0; b += 0.01) {
      std::vector<double> th{c[0] + a, c[1] + b};
      best = std::max(best, vbu::log_density(q, th));
    }
  }
  CHECK(best <= vbu::mode_density(q).log_value + 1e-12);
  CHECK(best == doctest::Approx(vbu::mode_density(q).log_value).epsilon(1e-3));
  const Posterior flow(vbu::AutoregressiveFlow::identity(2));
  const auto mf = vbu::mode_density(flow);
  CHECK(!mf.exact);
  CHECK(std::abs(std::exp(mf.log_value) / (1.0 / (2.0 * M_PI)) - 1.0) < 0.02);
}

TEST_CASE("flow inverse and log-determinant") {
  vbu::RngStream rng(31);
  for (std::size_t d = 1; d <= 3; ++d) {
    const auto f = random_flow(d, rng, 0.6);
    const std::span<const double> p(f.params);
    double worst = 0.0;
    for (int rep = 0; rep < 1000; ++rep) {
      std::vector<double> z(d);
      for (auto& v : z) v = 2.0 * rng.normal();
      double log_det = 0.0;
      const auto theta = vbu::kernels::flow_generate<double>(f.shape, p, z, &log_det);
      double inv_log_det = 0.0;
      const auto back = vbu::kernels::flow_inverse<double>(f.shape, p, theta, &inv_log_det);
      for (std::size_t i = 0; i < d; ++i) worst = std::max(worst, std::abs(back[i] - z[i]));
      CHECK(std::abs(log_det - inv_log_det) < 1e-10);
      if (rep < 20) {
        Matrix jac(d, d);
        const double h = 1e-6;
        for (std::size_t j = 0; j < d; ++j) {
          auto up = z;
          auto down = z;
          up[j] += h;
          down[j] -= h;
          const auto tu = vbu::kernels::flow_generate<double>(f.shape, p, up, nullptr);
          const auto td = vbu::kernels::flow_generate<double>(f.shape, p, down, nullptr);
          for (std::size_t i = 0; i < d; ++i) jac(i, j) = (tu[i] - td[i]) / (2.0 * h);
        }
        const double numeric = std::log(std::abs(jac.determinant()));
        CHECK(std::abs(numeric - log_det) <= 1e-4 * std::max(1.0, std::abs(log_det)));
      }
    }
    CHECK(worst < 1e-8);
  }
}

TEST_CASE("reparameterized draws have exact parameter gradients") {
  vbu::RngStream rng(77);
  std::vector<vbu::FamilySpec> specs;
  specs.push_back({vbu::Family::kDiagGaussian, 3, {}});
  specs.push_back({vbu::Family::kFullGaussian, 3, {}});
  specs.push_back({vbu::Family::kAutoregressiveFlow, 3, {3, 6, 2}});
  for (const auto& spec : specs) {
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> raw(spec.num_params());
      if (spec.family == vbu::Family::kAutoregressiveFlow) {
        raw = random_flow(3, rng, 0.5, 2, 6).params;
      } else {
        for (auto& v : raw) v = 0.5 * rng.normal();
      }
      std::vector<double> noise(3);
      for (auto& v : noise) v = rng.normal();
      std::vector<double> c(3);
      for (auto& v : c) v = rng.normal();
      // Scalar projection of the draw plus its log-density.
      const auto taped = [&](std::span<const vbu::ad::Var> x) {
        vbu::ad::Var log_q;
        const auto th = vbu::reparam_draw<vbu::ad::Var>(spec, x, noise, &log_q);
        return vbu::ad::dot(std::span<const vbu::ad::Var>(th), std::span<const double>(c)) + log_q;
      };
      const auto plain = [&](std::span<const double> x) {
        double log_q = 0.0;
        const auto th = vbu::reparam_draw<double>(spec, x, noise, &log_q);
        return vbu::ad::dot(std::span<const double>(th), std::span<const double>(c)) + log_q;
      };
      const auto g = vbu::testing::tape_grad(taped, raw);
      const auto fd = vbu::testing::central_diff(plain, raw);
      CHECK(vbu::testing::rel_error(g, fd) < 1e-4);
      // log q from the draw agrees with the density evaluated after the fact.
      double log_q = 0.0;
      const auto th = vbu::reparam_draw<double>(spec, std::span<const double>(raw), noise, &log_q);
      const auto post = vbu::unpack(spec, raw);
      CHECK(log_q == doctest::Approx(vbu::log_density(post, th)).epsilon(1e-10));
    }
  }
}

TEST_CASE("pack and unpack round trip") {
  vbu::RngStream rng(12);
  std::vector<Posterior> cases{random_diag(3, rng), random_full(3, rng),
                               Posterior(random_flow(2, rng, 0.3))};
  for (const auto& q : cases) {
    const auto raw = vbu::pack(q);
    const auto back = vbu::unpack(vbu::family_spec(q), raw);
    std::vector<double> th(q.dim(), 0.3);
    CHECK(vbu::log_density(back, th) == doctest::Approx(vbu::log_density(q, th)).epsilon(1e-12));
  }
}

TEST_CASE("flow affine initialization") {
  auto f = vbu::AutoregressiveFlow::identity(2, 3, 8);
  std::vector<double> mean{1.0, -2.0};
  std::vector<double> sd{0.5, 3.0};
  f.set_affine(mean, sd);
  const Posterior flow(f);
  const auto ref = vbu::make_diag_gaussian(Eigen::Map<Vector>(mean.data(), 2),
                                           Eigen::Map<Vector>(sd.data(), 2));
  std::vector<double> th{0.2, 0.9};
  CHECK(vbu::log_density(flow, th) == doctest::Approx(vbu::log_density(ref, th)).epsilon(1e-12));
}
