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

// Reverse-mode automatic differentiation over a flat tape.
//
// Every Var is a handle into exactly one Tape. Nodes store their parents and
// the local partial derivatives, so the backward sweep is a single reverse
// pass. Fused n-ary nodes (dot, sum) keep dense inner products cheap.
//
// The math helpers below are overloaded for double as well, which lets the
// same template kernel produce plain values or taped values.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace vbu::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t index) : tape_(tape), index_(index) {}

  double value() const;
  Tape* tape() const { return tape_; }
  std::uint32_t index() const { return index_; }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t index_ = 0;
};

class Tape {
 public:
  Tape() { begin_.push_back(0); }

  Var variable(double v);
  std::vector<Var> variables(std::span<const double> v);

  Var unary(double value, Var a, double da);
  Var binary(double value, Var a, double da, Var b, double db);
  // Node whose parents are `parents` with local partials `partials`.
  Var nary(double value, std::span<const Var> parents,
           std::span<const double> partials);
  Var nary_begin(double value);  // followed by add_parent calls
  void add_parent(Var p, double partial);

  // Adjoint of `out` with respect to every node on the tape.
  std::vector<double> adjoints(Var out) const;
  // Gradient of `out` restricted to the given leaves.
  std::vector<double> gradient(Var out, std::span<const Var> wrt) const;

  double value(std::uint32_t i) const { return value_[i]; }
  std::size_t size() const { return value_.size(); }
  void clear();

 private:
  std::vector<double> value_;
  std::vector<std::uint32_t> begin_;
  std::vector<std::uint32_t> parent_;
  std::vector<double> partial_;
};

inline double Var::value() const { return tape_->value(index_); }

inline double value(double x) { return x; }
inline double value(const Var& x) { return x.value(); }

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator+(Var a, double b);
Var operator+(double a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator*(Var a, double b);
Var operator*(double a, Var b);
Var operator/(Var a, double b);
Var operator/(double a, Var b);
Var operator-(Var a);

inline Var& operator+=(Var& a, Var b) { return a = a + b; }
inline Var& operator-=(Var& a, Var b) { return a = a - b; }
inline Var& operator*=(Var& a, Var b) { return a = a * b; }
inline Var& operator+=(Var& a, double b) { return a = a + b; }
inline Var& operator-=(Var& a, double b) { return a = a - b; }
inline Var& operator*=(Var& a, double b) { return a = a * b; }

Var exp(Var a);
Var log(Var a);
Var log1p(Var a);
Var sqrt(Var a);
Var tanh(Var a);
Var square(Var a);
Var softplus(Var a);
Var log_sigmoid(Var a);
Var sigmoid(Var a);
Var lgamma(Var a);

inline double exp(double a) { return std::exp(a); }
inline double log(double a) { return std::log(a); }
inline double log1p(double a) { return std::log1p(a); }
inline double sqrt(double a) { return std::sqrt(a); }
inline double tanh(double a) { return std::tanh(a); }
inline double square(double a) { return a * a; }
inline double softplus(double a) {
  return a > 0.0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
}
inline double log_sigmoid(double a) { return -softplus(-a); }
inline double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}
inline double lgamma(double a) { return std::lgamma(a); }

// Inner products and sums; the Var overloads emit one fused node.
double dot(std::span<const double> a, std::span<const double> b);
Var dot(std::span<const Var> a, std::span<const double> b);
Var dot(std::span<const Var> a, std::span<const Var> b);
double sum(std::span<const double> a);
Var sum(std::span<const Var> a);

// log(sum(exp(a))) with max shifting.
double log_sum_exp(std::span<const double> a);
Var log_sum_exp(std::span<const Var> a);

// Numerical softplus inverse, used when packing positive parameters.
double softplus_inverse(double y);

}  // namespace vbu::ad
