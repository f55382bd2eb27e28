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

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "vbu/autodiff.hpp"

namespace vbu::testing {

// Central differences of a scalar function of a parameter vector.
inline std::vector<double> central_diff(
    const std::function<double(std::span<const double>)>& f, std::vector<double> x,
    double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Relative error ||a - b|| / max(||b||, floor).
inline double rel_error(std::span<const double> a, std::span<const double> b,
                        double floor = 1e-6) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

// Gradient of a taped scalar function evaluated at x.
inline std::vector<double> tape_grad(
    const std::function<ad::Var(std::span<const ad::Var>)>& f,
    std::span<const double> x) {
  ad::Tape tape;
  const std::vector<ad::Var> vars = tape.variables(x);
  const ad::Var out = f(vars);
  return tape.gradient(out, vars);
}

}  // namespace vbu::testing
