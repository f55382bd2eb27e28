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

// Problem instances and closed-form oracles shared by the test programs.

#include <cmath>
#include <vector>

#include "vbu/models.hpp"

namespace vbu::testing {

// Random strictly positive probability vector.
inline Vector random_simplex(std::size_t k, RngStream& rng, double floor = 0.02) {
  Vector p(static_cast<Eigen::Index>(k));
  for (auto& v : p) v = floor + rng.uniform();
  return p / p.sum();
}

struct DiscreteInstance {
  DiscreteToyModel model;
  Dataset data;
  std::vector<RowId> all;
  std::vector<RowId> erased;
  std::vector<RowId> remaining;
};

// A small discrete model with at least one erased and one remaining row.
inline DiscreteInstance random_discrete(RngStream& rng) {
  const std::size_t k = 2 + rng.below(9);
  const std::size_t ny = 2 + rng.below(4);
  DiscreteToyModel m{random_simplex(k, rng), Matrix(k, ny)};
  for (std::size_t s = 0; s < k; ++s) {
    m.table.row(static_cast<Eigen::Index>(s)) = random_simplex(ny, rng).transpose();
  }
  const std::size_t n = 2 + rng.below(8);
  Vector ys(static_cast<Eigen::Index>(n));
  for (auto& v : ys) v = static_cast<double>(rng.below(ny));
  Dataset data(Matrix::Zero(static_cast<Eigen::Index>(n), 1), ys);
  std::vector<RowId> all = data.ids();
  std::vector<RowId> erased;
  std::vector<RowId> remaining;
  for (RowId id : all) (rng.uniform() < 0.4 ? erased : remaining).push_back(id);
  if (erased.empty()) {
    erased.push_back(remaining.back());
    remaining.pop_back();
  }
  if (remaining.empty()) {
    remaining.push_back(erased.back());
    erased.pop_back();
  }
  return {std::move(m), std::move(data), std::move(all), std::move(erased), std::move(remaining)};
}

// Exact p(theta | y) for y_i ~ N(theta, noise^2), theta ~ N(m0, s0^2).
struct ScalarGaussian {
  double mean;
  double sd;
};

inline ScalarGaussian conjugate_mean_posterior(double m0, double s0, double noise,
                                               const std::vector<double>& ys) {
  double prec = 1.0 / (s0 * s0);
  double num = m0 / (s0 * s0);
  for (double y : ys) {
    prec += 1.0 / (noise * noise);
    num += y / (noise * noise);
  }
  return {num / prec, 1.0 / std::sqrt(prec)};
}

// log N(y; m0 1, noise^2 I + s0^2 1 1^T).
inline double conjugate_mean_log_evidence(double m0, double s0, double noise,
                                          const std::vector<double>& ys) {
  const auto n = static_cast<Eigen::Index>(ys.size());
  Matrix cov = Matrix::Constant(n, n, s0 * s0);
  cov.diagonal().array() += noise * noise;
  Vector r(n);
  for (Eigen::Index i = 0; i < n; ++i) r[i] = ys[static_cast<std::size_t>(i)] - m0;
  const Eigen::LLT<Matrix> llt(cov);
  const Matrix l = llt.matrixL();
  const double logdet = 2.0 * l.diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(n) * std::log(2.0 * M_PI) + logdet + r.dot(llt.solve(r)));
}

inline double scalar_gaussian_kl(ScalarGaussian a, ScalarGaussian b) {
  return std::log(b.sd / a.sd) + (a.sd * a.sd + (a.mean - b.mean) * (a.mean - b.mean)) /
                                     (2.0 * b.sd * b.sd) - 0.5;
}

inline std::vector<double> gaussian_rows(std::size_t n, double mean, double sd, RngStream& rng) {
  std::vector<double> ys(n);
  for (auto& y : ys) y = mean + sd * rng.normal();
  return ys;
}

inline Dataset column_dataset(const std::vector<double>& ys) {
  const auto n = static_cast<Eigen::Index>(ys.size());
  return Dataset(Matrix::Zero(n, 1), Eigen::Map<const Vector>(ys.data(), n));
}

}  // namespace vbu::testing
