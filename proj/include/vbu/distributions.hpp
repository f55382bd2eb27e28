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

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "vbu/autodiff.hpp"
#include "vbu/error.hpp"
#include "vbu/kernels.hpp"
#include "vbu/rng.hpp"

namespace vbu {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline std::span<const double> as_span(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

enum class Family {
  kDiagGaussian,
  kFullGaussian,
  kGaussianMixture1D,
  kAutoregressiveFlow,
};

std::string_view family_name(Family f);
Family parse_family(std::string_view name);

struct DiagGaussian {
  Vector mean;
  Vector log_std;
};

struct FullGaussian {
  Vector mean;
  Matrix chol_lower;

  Matrix covariance() const { return chol_lower * chol_lower.transpose(); }
};

struct GaussianMixture1D {
  Vector weights;
  Vector means;
  Vector stds;
};

// Stack of masked autoregressive affine layers over a fixed standard normal
// base. All-zero parameters give the identity map.
struct AutoregressiveFlow {
  kernels::FlowShape shape;
  std::vector<double> params;

  static AutoregressiveFlow identity(std::size_t dim, std::size_t layers = 3,
                                     std::size_t hidden = 32);
  // Small random input-to-hidden weights, zero outputs: starts at identity
  // but has non-vanishing gradients for every output weight.
  static AutoregressiveFlow initialized(std::size_t dim, std::size_t layers,
                                        std::size_t hidden, RngStream& rng,
                                        double weight_scale = 0.1);
  // Sets the last layer's biases so the flow starts at N(mean, diag(std^2)).
  void set_affine(std::span<const double> mean, std::span<const double> stddev);
};

struct PosteriorMeta {
  std::uint64_t seed = 0;
  std::string trainer;
};

class Posterior {
 public:
  using Payload = std::variant<DiagGaussian, FullGaussian, GaussianMixture1D,
                               AutoregressiveFlow>;

  // Validates the payload; throws on corrupt or inconsistent parameters.
  explicit Posterior(Payload payload, PosteriorMeta meta = {});

  Family family() const;
  std::size_t dim() const { return dim_; }
  const Payload& payload() const { return payload_; }
  bool is_gaussian() const {
    return family() == Family::kDiagGaussian || family() == Family::kFullGaussian;
  }
  // Mean and factor view; only for the two Gaussian families.
  kernels::GaussianParams<double> gaussian() const;

  template <class F>
  const F& as() const {
    const F* p = std::get_if<F>(&payload_);
    require(p != nullptr, ErrorCode::kUnsupported, "posterior: wrong family");
    return *p;
  }

  PosteriorMeta meta;

 private:
  Payload payload_;
  std::size_t dim_ = 0;
};

// Mean and lower Cholesky factor of a Gaussian posterior (either family).
Vector gaussian_mean(const Posterior& q);
Matrix gaussian_factor(const Posterior& q);

Posterior make_diag_gaussian(Vector mean, Vector stddev);
Posterior make_full_gaussian(Vector mean, Matrix chol_lower);
Posterior gaussian_from_params(const kernels::GaussianParams<double>& g);
Posterior standard_normal(std::size_t dim);

struct Draws {
  Matrix theta;  // n x d
  Matrix noise;  // n x noise_dim; replaying a row reproduces its draw
};

std::size_t noise_dim(const Posterior& post);
Draws sample(const Posterior& post, std::size_t n, RngStream& rng);
Vector transform_noise(const Posterior& post, std::span<const double> noise);
double log_density(const Posterior& post, std::span<const double> theta);

// Closed-form KL[q1 || q2] between Gaussian posteriors of equal dimension.
double kl_gaussian(const Posterior& q1, const Posterior& q2);

struct EntropyEstimate {
  double value = 0.0;
  double std_error = 0.0;
  bool exact = false;
};
EntropyEstimate entropy(const Posterior& post, std::size_t n_mc, RngStream& rng);

// Maximum density. Exact for Gaussians; for mixtures and flows a lower bound
// from the pushforward of the base mode plus seeded samples. An underestimate
// only widens the region where the adjusted likelihood keeps unlearning on.
struct ModeDensity {
  double log_value = 0.0;
  bool exact = false;
  std::string method;
};
ModeDensity mode_density(const Posterior& post);

// ---------------------------------------------------------------------------
// Unconstrained parameterization used by the optimizers.
//   diag: [mean, log_std]
//   full: [mean, packed lower triangle with softplus-transformed diagonal]
//   flow: raw network weights

struct FamilySpec {
  Family family = Family::kDiagGaussian;
  std::size_t dim = 1;
  kernels::FlowShape flow;

  std::size_t num_params() const;
  std::size_t noise_dim() const;
};

FamilySpec family_spec(const Posterior& post);
std::vector<double> pack(const Posterior& post);
Posterior unpack(const FamilySpec& spec, std::span<const double> raw,
                 PosteriorMeta meta = {});

template <class T>
kernels::GaussianParams<T> gaussian_from_raw(const FamilySpec& spec,
                                             std::span<const T> raw) {
  const std::size_t d = spec.dim;
  kernels::GaussianParams<T> g;
  g.mean.assign(raw.begin(), raw.begin() + d);
  if (spec.family == Family::kDiagGaussian) {
    g.diagonal = true;
    for (std::size_t i = 0; i < d; ++i) g.factor.push_back(ad::exp(raw[d + i]));
    return g;
  }
  g.diagonal = false;
  g.factor.reserve(d * (d + 1) / 2);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const T& r = raw[d + kernels::tri_index(i, j)];
      g.factor.push_back(i == j ? ad::softplus(r) : r);
    }
  }
  return g;
}

// Reparameterized draw theta = T_phi(noise); optionally log q_phi(theta).
template <class T>
std::vector<T> reparam_draw(const FamilySpec& spec, std::span<const T> raw,
                            std::span<const double> noise, T* log_q) {
  if (spec.family == Family::kAutoregressiveFlow) {
    std::vector<T> z;
    z.reserve(spec.dim);
    for (std::size_t i = 0; i < spec.dim; ++i) {
      if constexpr (std::is_same_v<T, double>) {
        z.push_back(noise[i]);
      } else {
        z.push_back(raw[0].tape()->variable(noise[i]));
      }
    }
    T log_det{};
    std::vector<T> theta =
        kernels::flow_generate<T>(spec.flow, raw, std::span<const T>(z), &log_det);
    if (log_q) {
      *log_q = kernels::standard_normal_log_density<T>(std::span<const T>(z)) - log_det;
    }
    return theta;
  }
  require(spec.family != Family::kGaussianMixture1D, ErrorCode::kUnsupported,
          "mixture family has no reparameterized training path");
  const kernels::GaussianParams<T> g = gaussian_from_raw<T>(spec, raw);
  std::vector<T> theta = kernels::gaussian_transform<T>(g, noise);
  if (log_q) {
    double base = 0.0;
    for (std::size_t i = 0; i < spec.dim; ++i) base += noise[i] * noise[i];
    base = -0.5 * base - 0.5 * static_cast<double>(spec.dim) * kernels::kLogTwoPi;
    *log_q = base - kernels::sum_log_diag(g);
  }
  return theta;
}

template <class T>
T log_density_raw(const FamilySpec& spec, std::span<const T> raw,
                  std::span<const T> theta) {
  if (spec.family == Family::kAutoregressiveFlow) {
    return kernels::flow_log_density<T>(spec.flow, raw, theta);
  }
  require(spec.family != Family::kGaussianMixture1D, ErrorCode::kUnsupported,
          "mixture family has no reparameterized training path");
  return kernels::gaussian_log_density<T>(gaussian_from_raw<T>(spec, raw), theta);
}

// Places a fixed distribution's parameters on a tape as constants.
kernels::GaussianParams<ad::Var> lift(ad::Tape& tape,
                                      const kernels::GaussianParams<double>& g);

}  // namespace vbu
