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

// Scalar-generic density kernels. Each kernel is written once over a scalar
// type T and instantiated with double (evaluation) and ad::Var (gradients).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <type_traits>
#include <span>
#include <vector>

#include "vbu/autodiff.hpp"

namespace vbu::kernels {

inline constexpr double kLogTwoPi = 1.8378770664093454836;

inline std::size_t tri_index(std::size_t i, std::size_t j) {
  return i * (i + 1) / 2 + j;
}

template <class T>
T zero_like(const T& x) {
  if constexpr (std::is_same_v<T, double>) {
    (void)x;
    return 0.0;
  } else {
    return x.tape()->variable(0.0);
  }
}

// Gaussian N(mean, L L^T). A diagonal factor stores only the d standard
// deviations; otherwise `factor` is the row-major packed lower triangle.
template <class T>
struct GaussianParams {
  bool diagonal = true;
  std::vector<T> mean;
  std::vector<T> factor;

  std::size_t dim() const { return mean.size(); }
  const T& diag(std::size_t i) const {
    return diagonal ? factor[i] : factor[tri_index(i, i)];
  }
};

template <class T>
T sum_log_diag(const GaussianParams<T>& g) {
  T s = ad::log(g.diag(0));
  for (std::size_t i = 1; i < g.dim(); ++i) s = s + ad::log(g.diag(i));
  return s;
}

// theta = mean + L eps.
template <class T>
std::vector<T> gaussian_transform(const GaussianParams<T>& g,
                                  std::span<const double> eps) {
  const std::size_t d = g.dim();
  std::vector<T> out;
  out.reserve(d);
  if (g.diagonal) {
    for (std::size_t i = 0; i < d; ++i) out.push_back(g.mean[i] + g.factor[i] * eps[i]);
    return out;
  }
  for (std::size_t i = 0; i < d; ++i) {
    std::span<const T> row(g.factor.data() + tri_index(i, 0), i + 1);
    out.push_back(g.mean[i] + ad::dot(row, eps.subspan(0, i + 1)));
  }
  return out;
}

// Solves L x = b by forward substitution.
template <class T>
std::vector<T> forward_solve(const GaussianParams<T>& g, std::span<const T> b) {
  const std::size_t d = g.dim();
  std::vector<T> x;
  x.reserve(d);
  if (g.diagonal) {
    for (std::size_t i = 0; i < d; ++i) x.push_back(b[i] / g.factor[i]);
    return x;
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (i == 0) {
      x.push_back(b[0] / g.factor[0]);
      continue;
    }
    std::span<const T> row(g.factor.data() + tri_index(i, 0), i);
    std::span<const T> prev(x.data(), i);
    x.push_back((b[i] - ad::dot(row, prev)) / g.factor[tri_index(i, i)]);
  }
  return x;
}

template <class T>
T gaussian_log_density(const GaussianParams<T>& g, std::span<const T> theta) {
  const std::size_t d = g.dim();
  std::vector<T> r;
  r.reserve(d);
  for (std::size_t i = 0; i < d; ++i) r.push_back(theta[i] - g.mean[i]);
  const std::vector<T> z = forward_solve<T>(g, r);
  return -0.5 * ad::dot(std::span<const T>(z), std::span<const T>(z)) -
         sum_log_diag(g) - 0.5 * static_cast<double>(d) * kLogTwoPi;
}

template <class T>
T gaussian_entropy(const GaussianParams<T>& g) {
  return 0.5 * static_cast<double>(g.dim()) * (1.0 + kLogTwoPi) + sum_log_diag(g);
}

template <class T>
GaussianParams<T> densify(const GaussianParams<T>& g) {
  if (!g.diagonal) return g;
  const std::size_t d = g.dim();
  GaussianParams<T> out;
  out.diagonal = false;
  out.mean = g.mean;
  const T zero = zero_like(g.mean[0]);
  out.factor.assign(d * (d + 1) / 2, zero);
  for (std::size_t i = 0; i < d; ++i) out.factor[tri_index(i, i)] = g.factor[i];
  return out;
}

// Closed-form KL[q || p].
template <class T>
T gaussian_kl(const GaussianParams<T>& q, const GaussianParams<T>& p) {
  const std::size_t d = q.dim();
  if (q.diagonal && p.diagonal) {
    T total = zero_like(q.mean[0]);
    for (std::size_t i = 0; i < d; ++i) {
      const T ratio = q.factor[i] / p.factor[i];
      const T delta = (q.mean[i] - p.mean[i]) / p.factor[i];
      total = total + 0.5 * (ad::square(ratio) + ad::square(delta) - 1.0) -
              ad::log(ratio);
    }
    return total;
  }
  const GaussianParams<T> qf = densify(q);
  const GaussianParams<T> pf = densify(p);
  // trace term: ||P^{-1} Q||_F^2 computed column by column.
  std::vector<T> frob_terms;
  frob_terms.reserve(d * (d + 1) / 2);
  std::vector<T> x;
  for (std::size_t j = 0; j < d; ++j) {
    x.clear();
    for (std::size_t i = j; i < d; ++i) {
      T rhs = qf.factor[tri_index(i, j)];
      if (i > j) {
        std::span<const T> row(pf.factor.data() + tri_index(i, j), i - j);
        std::span<const T> prev(x.data(), i - j);
        rhs = rhs - ad::dot(row, prev);
      }
      x.push_back(rhs / pf.factor[tri_index(i, i)]);
    }
    for (const T& v : x) frob_terms.push_back(v);
  }
  const T frob = ad::dot(std::span<const T>(frob_terms), std::span<const T>(frob_terms));
  std::vector<T> delta;
  delta.reserve(d);
  for (std::size_t i = 0; i < d; ++i) delta.push_back(p.mean[i] - q.mean[i]);
  const std::vector<T> m = forward_solve<T>(pf, delta);
  const T maha = ad::dot(std::span<const T>(m), std::span<const T>(m));
  return 0.5 * (frob + maha - static_cast<double>(d)) + sum_log_diag(pf) -
         sum_log_diag(qf);
}

// ---------------------------------------------------------------------------
// Masked autoregressive flow.
//
// Hidden unit k has degree deg(k) = 1 + k (d - 1) / H (non-decreasing), and
// reads inputs [0, deg(k)). Output i (shift m_i and log-scale s_i) reads the
// hidden units with deg(k) <= i, which always form a prefix. The generative
// direction of one layer is u_i = z_i exp(s_i(u_<i)) + m_i(u_<i); layers are
// separated by a reversal of the coordinates.

struct FlowShape {
  std::size_t dim = 1;
  std::size_t hidden = 32;
  std::size_t layers = 3;

  std::size_t degree(std::size_t k) const {
    return dim > 1 ? 1 + (k * (dim - 1)) / hidden : 1;
  }
  std::size_t hidden_prefix(std::size_t i) const {
    std::size_t n = 0;
    while (n < hidden && degree(n) <= i) ++n;
    return n;
  }
  // Offsets inside one layer's parameter block.
  std::size_t w1_offset() const { return 0; }
  std::size_t b1_offset() const { return hidden * dim; }
  std::size_t w2_offset() const { return b1_offset() + hidden; }
  std::size_t b2_offset() const { return w2_offset() + 2 * dim * hidden; }
  std::size_t params_per_layer() const { return b2_offset() + 2 * dim; }
  std::size_t num_params() const { return layers * params_per_layer(); }
};

template <class T>
T made_output(const FlowShape& s, const T* p, std::size_t row,
              const std::vector<T>& h, std::size_t n_hidden) {
  const T& bias = p[s.b2_offset() + row];
  if (n_hidden == 0) return bias;
  std::span<const T> w(p + s.w2_offset() + row * s.hidden, n_hidden);
  return ad::dot(w, std::span<const T>(h.data(), n_hidden)) + bias;
}

template <class T>
T made_hidden(const FlowShape& s, const T* p, std::size_t k,
              std::span<const T> u) {
  const std::size_t n_in = s.degree(k);
  std::span<const T> w(p + s.w1_offset() + k * s.dim, n_in);
  return ad::tanh(ad::dot(w, u.subspan(0, n_in)) + p[s.b1_offset() + k]);
}

// One generative layer z -> u; returns sum of log-scales.
template <class T>
T made_generate(const FlowShape& s, const T* p, std::span<const T> z,
                std::vector<T>& u) {
  const std::size_t d = s.dim;
  u.clear();
  u.reserve(d);
  std::vector<T> h;
  h.reserve(s.hidden);
  T total_s{};
  for (std::size_t i = 0; i < d; ++i) {
    while (h.size() < s.hidden && s.degree(h.size()) <= i) {
      h.push_back(made_hidden<T>(s, p, h.size(), std::span<const T>(u)));
    }
    const T m = made_output(s, p, i, h, h.size());
    const T ls = made_output(s, p, d + i, h, h.size());
    u.push_back(z[i] * ad::exp(ls) + m);
    total_s = (i == 0) ? ls : total_s + ls;
  }
  return total_s;
}

// One inverse layer u -> z; returns sum of log-scales.
template <class T>
T made_inverse(const FlowShape& s, const T* p, std::span<const T> u,
               std::vector<T>& z) {
  const std::size_t d = s.dim;
  std::vector<T> h;
  h.reserve(s.hidden);
  for (std::size_t k = 0; k < s.hidden; ++k) h.push_back(made_hidden<T>(s, p, k, u));
  z.clear();
  z.reserve(d);
  T total_s{};
  std::size_t n = 0;
  for (std::size_t i = 0; i < d; ++i) {
    while (n < s.hidden && s.degree(n) <= i) ++n;
    const T m = made_output(s, p, i, h, n);
    const T ls = made_output(s, p, d + i, h, n);
    z.push_back((u[i] - m) * ad::exp(-ls));
    total_s = (i == 0) ? ls : total_s + ls;
  }
  return total_s;
}

template <class T>
T standard_normal_log_density(std::span<const T> z) {
  return -0.5 * ad::dot(z, z) - 0.5 * static_cast<double>(z.size()) * kLogTwoPi;
}

// z -> theta through all layers; `log_det` receives log|dtheta/dz|.
template <class T>
std::vector<T> flow_generate(const FlowShape& s, std::span<const T> params,
                             std::span<const T> z, T* log_det) {
  std::vector<T> v(z.begin(), z.end());
  std::vector<T> next;
  T total{};
  for (std::size_t l = 0; l < s.layers; ++l) {
    const T* p = params.data() + l * s.params_per_layer();
    const T ls = made_generate<T>(s, p, std::span<const T>(v), next);
    total = (l == 0) ? ls : total + ls;
    v.swap(next);
    if (l + 1 < s.layers) std::reverse(v.begin(), v.end());
  }
  if (log_det) *log_det = total;
  return v;
}

template <class T>
std::vector<T> flow_inverse(const FlowShape& s, std::span<const T> params,
                            std::span<const T> theta, T* log_det) {
  std::vector<T> v(theta.begin(), theta.end());
  std::vector<T> next;
  T total{};
  for (std::size_t l = s.layers; l-- > 0;) {
    const T* p = params.data() + l * s.params_per_layer();
    const T ls = made_inverse<T>(s, p, std::span<const T>(v), next);
    total = (l + 1 == s.layers) ? ls : total + ls;
    v.swap(next);
    if (l > 0) std::reverse(v.begin(), v.end());
  }
  if (log_det) *log_det = total;
  return v;
}

template <class T>
T flow_log_density(const FlowShape& s, std::span<const T> params,
                   std::span<const T> theta) {
  T log_det{};
  const std::vector<T> z = flow_inverse<T>(s, params, theta, &log_det);
  return standard_normal_log_density<T>(std::span<const T>(z)) - log_det;
}

}  // namespace vbu::kernels
