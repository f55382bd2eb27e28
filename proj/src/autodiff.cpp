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

#include "vbu/autodiff.hpp"

#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <limits>

#include "vbu/error.hpp"

namespace vbu::ad {

Var Tape::variable(double v) {
  value_.push_back(v);
  begin_.push_back(static_cast<std::uint32_t>(parent_.size()));
  return Var(this, static_cast<std::uint32_t>(value_.size() - 1));
}

std::vector<Var> Tape::variables(std::span<const double> v) {
  std::vector<Var> out;
  out.reserve(v.size());
  for (double x : v) out.push_back(variable(x));
  return out;
}

Var Tape::unary(double value, Var a, double da) {
  parent_.push_back(a.index());
  partial_.push_back(da);
  value_.push_back(value);
  begin_.push_back(static_cast<std::uint32_t>(parent_.size()));
  return Var(this, static_cast<std::uint32_t>(value_.size() - 1));
}

Var Tape::binary(double value, Var a, double da, Var b, double db) {
  parent_.push_back(a.index());
  partial_.push_back(da);
  parent_.push_back(b.index());
  partial_.push_back(db);
  value_.push_back(value);
  begin_.push_back(static_cast<std::uint32_t>(parent_.size()));
  return Var(this, static_cast<std::uint32_t>(value_.size() - 1));
}

Var Tape::nary(double value, std::span<const Var> parents,
               std::span<const double> partials) {
  for (std::size_t i = 0; i < parents.size(); ++i) {
    parent_.push_back(parents[i].index());
    partial_.push_back(partials[i]);
  }
  value_.push_back(value);
  begin_.push_back(static_cast<std::uint32_t>(parent_.size()));
  return Var(this, static_cast<std::uint32_t>(value_.size() - 1));
}

Var Tape::nary_begin(double value) {
  value_.push_back(value);
  begin_.push_back(static_cast<std::uint32_t>(parent_.size()));
  return Var(this, static_cast<std::uint32_t>(value_.size() - 1));
}

void Tape::add_parent(Var p, double partial) {
  parent_.push_back(p.index());
  partial_.push_back(partial);
  begin_.back() = static_cast<std::uint32_t>(parent_.size());
}

std::vector<double> Tape::adjoints(Var out) const {
  std::vector<double> adj(value_.size(), 0.0);
  adj[out.index()] = 1.0;
  for (std::size_t i = out.index() + 1; i-- > 0;) {
    const double a = adj[i];
    if (a == 0.0) continue;
    for (std::uint32_t k = begin_[i]; k < begin_[i + 1]; ++k) {
      adj[parent_[k]] += a * partial_[k];
    }
  }
  return adj;
}

std::vector<double> Tape::gradient(Var out, std::span<const Var> wrt) const {
  const std::vector<double> adj = adjoints(out);
  std::vector<double> g(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) g[i] = adj[wrt[i].index()];
  return g;
}

void Tape::clear() {
  value_.clear();
  begin_.assign(1, 0);
  parent_.clear();
  partial_.clear();
}

namespace {
Tape* tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) {
    fail(ErrorCode::kInvalidArgument, "autodiff: operands on different tapes");
  }
  return a.tape();
}
}  // namespace

Var operator+(Var a, Var b) {
  return tape_of(a, b)->binary(a.value() + b.value(), a, 1.0, b, 1.0);
}
Var operator-(Var a, Var b) {
  return tape_of(a, b)->binary(a.value() - b.value(), a, 1.0, b, -1.0);
}
Var operator*(Var a, Var b) {
  return tape_of(a, b)->binary(a.value() * b.value(), a, b.value(), b,
                               a.value());
}
Var operator/(Var a, Var b) {
  const double inv = 1.0 / b.value();
  const double q = a.value() * inv;
  return tape_of(a, b)->binary(q, a, inv, b, -q * inv);
}
Var operator+(Var a, double b) { return a.tape()->unary(a.value() + b, a, 1.0); }
Var operator+(double a, Var b) { return b + a; }
Var operator-(Var a, double b) { return a.tape()->unary(a.value() - b, a, 1.0); }
Var operator-(double a, Var b) {
  return b.tape()->unary(a - b.value(), b, -1.0);
}
Var operator*(Var a, double b) { return a.tape()->unary(a.value() * b, a, b); }
Var operator*(double a, Var b) { return b * a; }
Var operator/(Var a, double b) {
  return a.tape()->unary(a.value() / b, a, 1.0 / b);
}
Var operator/(double a, Var b) {
  const double q = a / b.value();
  return b.tape()->unary(q, b, -q / b.value());
}
Var operator-(Var a) { return a.tape()->unary(-a.value(), a, -1.0); }

Var exp(Var a) {
  const double e = std::exp(a.value());
  return a.tape()->unary(e, a, e);
}
Var log(Var a) {
  return a.tape()->unary(std::log(a.value()), a, 1.0 / a.value());
}
Var log1p(Var a) {
  return a.tape()->unary(std::log1p(a.value()), a, 1.0 / (1.0 + a.value()));
}
Var sqrt(Var a) {
  const double s = std::sqrt(a.value());
  return a.tape()->unary(s, a, 0.5 / s);
}
Var tanh(Var a) {
  const double t = std::tanh(a.value());
  return a.tape()->unary(t, a, 1.0 - t * t);
}
Var square(Var a) {
  return a.tape()->unary(a.value() * a.value(), a, 2.0 * a.value());
}
Var softplus(Var a) {
  return a.tape()->unary(softplus(a.value()), a, sigmoid(a.value()));
}
Var log_sigmoid(Var a) {
  return a.tape()->unary(log_sigmoid(a.value()), a, sigmoid(-a.value()));
}
Var sigmoid(Var a) {
  const double s = sigmoid(a.value());
  return a.tape()->unary(s, a, s * (1.0 - s));
}
Var lgamma(Var a) {
  return a.tape()->unary(std::lgamma(a.value()), a,
                         boost::math::digamma(a.value()));
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Var dot(std::span<const Var> a, std::span<const double> b) {
  if (a.empty()) fail(ErrorCode::kInvalidArgument, "autodiff: empty dot");
  Tape* t = a[0].tape();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i].value() * b[i];
  Var out = t->nary_begin(s);
  for (std::size_t i = 0; i < a.size(); ++i) t->add_parent(a[i], b[i]);
  return out;
}

Var dot(std::span<const Var> a, std::span<const Var> b) {
  if (a.empty()) fail(ErrorCode::kInvalidArgument, "autodiff: empty dot");
  Tape* t = a[0].tape();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i].value() * b[i].value();
  Var out = t->nary_begin(s);
  for (std::size_t i = 0; i < a.size(); ++i) {
    t->add_parent(a[i], b[i].value());
    t->add_parent(b[i], a[i].value());
  }
  return out;
}

double sum(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x;
  return s;
}

Var sum(std::span<const Var> a) {
  if (a.empty()) fail(ErrorCode::kInvalidArgument, "autodiff: empty sum");
  Tape* t = a[0].tape();
  double s = 0.0;
  for (const Var& x : a) s += x.value();
  Var out = t->nary_begin(s);
  for (const Var& x : a) t->add_parent(x, 1.0);
  return out;
}

double log_sum_exp(std::span<const double> a) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : a) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : a) s += std::exp(x - m);
  return m + std::log(s);
}

Var log_sum_exp(std::span<const Var> a) {
  if (a.empty()) fail(ErrorCode::kInvalidArgument, "autodiff: empty lse");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[i] = a[i].value();
  const double l = log_sum_exp(v);
  Tape* t = a[0].tape();
  Var out = t->nary_begin(l);
  for (std::size_t i = 0; i < a.size(); ++i) {
    t->add_parent(a[i], std::exp(v[i] - l));
  }
  return out;
}

double softplus_inverse(double y) {
  // log(exp(y) - 1) without overflow for large y.
  return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

}  // namespace vbu::ad
