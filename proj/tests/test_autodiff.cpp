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
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "vbu/autodiff.hpp"
#include "vbu/error.hpp"
#include "vbu/rng.hpp"

using vbu::ad::Tape;
using vbu::ad::Var;

TEST_CASE("gradient of squared norm") {
  Tape tape;
  auto theta = tape.variables(std::vector<double>{1.0, 2.0});
  const Var f = vbu::ad::dot(std::span<const Var>(theta), std::span<const Var>(theta));
  const auto g = tape.gradient(f, theta);
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
  CHECK(f.value() == doctest::Approx(5.0));
}

TEST_CASE("elementwise primitives match finite differences") {
  const auto taped = [](std::span<const Var> x) {
    Var acc = vbu::ad::exp(x[0]) * vbu::ad::log(x[1]) + vbu::ad::tanh(x[2]) / x[1];
    acc += vbu::ad::softplus(x[0] - x[2]) + vbu::ad::log_sigmoid(x[1]);
    acc += vbu::ad::sqrt(x[1]) * vbu::ad::sigmoid(x[2]) + vbu::ad::lgamma(x[1]);
    acc -= vbu::ad::square(x[2]) + vbu::ad::log1p(x[1]);
    std::vector<Var> terms(x.begin(), x.end());
    acc += vbu::ad::log_sum_exp(std::span<const Var>(terms)) + 2.0 * vbu::ad::sum(x);
    return acc;
  };
  const auto plain = [](std::span<const double> x) {
    double acc = std::exp(x[0]) * std::log(x[1]) + std::tanh(x[2]) / x[1];
    acc += vbu::ad::softplus(x[0] - x[2]) + vbu::ad::log_sigmoid(x[1]);
    acc += std::sqrt(x[1]) * vbu::ad::sigmoid(x[2]) + std::lgamma(x[1]);
    acc -= x[2] * x[2] + std::log1p(x[1]);
    acc += vbu::ad::log_sum_exp(x) + 2.0 * (x[0] + x[1] + x[2]);
    return acc;
  };
  vbu::RngStream rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> x{rng.normal(), 0.5 + 2.0 * rng.uniform(), rng.normal()};
    const auto g = vbu::testing::tape_grad(taped, x);
    const auto fd = vbu::testing::central_diff(plain, x);
    CHECK(vbu::testing::rel_error(g, fd) < 1e-6);
  }
}

TEST_CASE("mixing tapes is rejected") {
  Tape a;
  Tape b;
  const Var x = a.variable(1.0);
  const Var y = b.variable(2.0);
  CHECK_THROWS_AS(x + y, vbu::Error);
}

TEST_CASE("rng streams are replayable") {
  vbu::RngStream a(42, 3);
  vbu::RngStream b(42, 3);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  vbu::RngStream parent(42);
  const auto child1 = parent.substream(7);
  parent.next_u64();
  auto child2 = parent.substream(7);
  auto c1 = child1;
  CHECK(c1.next_u64() == child2.next_u64());
  vbu::RngStream c(43, 3);
  vbu::RngStream d(42, 3);
  CHECK(c.next_u64() != d.next_u64());
}

TEST_CASE("rng moments") {
  vbu::RngStream rng(5);
  const int n = 200000;
  double s = 0.0;
  double s2 = 0.0;
  double u = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
    u += rng.uniform();
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
  CHECK(std::abs(u / n - 0.5) < 0.005);
  for (int i = 0; i < 1000; ++i) CHECK(rng.below(7) < 7u);
}
