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

#include "vbu/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vbu {
namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

void validate_flow(const AutoregressiveFlow& f) {
  const auto& s = f.shape;
  require(s.dim >= 1 && s.layers >= 1 && s.hidden >= 1, ErrorCode::kParse,
          "flow: dim, layers and hidden must be positive");
  require(f.params.size() == s.num_params(), ErrorCode::kDimensionMismatch,
          "flow: parameter count does not match shape");
  require(all_finite(f.params), ErrorCode::kParameterCorruption,
          "flow: non-finite parameters");
  const std::size_t d = s.dim;
  for (std::size_t l = 0; l < s.layers; ++l) {
    const double* p = f.params.data() + l * s.params_per_layer();
    for (std::size_t k = 0; k < s.hidden; ++k) {
      for (std::size_t i = s.degree(k); i < d; ++i) {
        require(p[s.w1_offset() + k * d + i] == 0.0, ErrorCode::kParse,
                "flow: input weight violates autoregressive mask");
      }
    }
    for (std::size_t row = 0; row < 2 * d; ++row) {
      const std::size_t n = s.hidden_prefix(row % d);
      for (std::size_t k = n; k < s.hidden; ++k) {
        require(p[s.w2_offset() + row * s.hidden + k] == 0.0, ErrorCode::kParse,
                "flow: output weight violates autoregressive mask");
      }
    }
  }
}

struct Validator {
  std::size_t operator()(const DiagGaussian& g) const {
    require(g.mean.size() >= 1 && g.mean.size() == g.log_std.size(),
            ErrorCode::kDimensionMismatch, "diag_gaussian: inconsistent sizes");
    require(all_finite(as_span(g.mean)) && all_finite(as_span(g.log_std)),
            ErrorCode::kParameterCorruption, "diag_gaussian: non-finite parameters");
    return static_cast<std::size_t>(g.mean.size());
  }
  std::size_t operator()(const FullGaussian& g) const {
    const auto d = g.mean.size();
    require(d >= 1 && g.chol_lower.rows() == d && g.chol_lower.cols() == d,
            ErrorCode::kDimensionMismatch, "full_gaussian: inconsistent sizes");
    require(all_finite(as_span(g.mean)) && all_finite(g.chol_lower),
            ErrorCode::kParameterCorruption, "full_gaussian: non-finite parameters");
    for (Eigen::Index i = 0; i < d; ++i) {
      require(g.chol_lower(i, i) > 0.0, ErrorCode::kParameterCorruption,
              "full_gaussian: Cholesky diagonal must be positive");
      for (Eigen::Index j = i + 1; j < d; ++j) {
        require(g.chol_lower(i, j) == 0.0, ErrorCode::kParse,
                "full_gaussian: factor must be lower triangular");
      }
    }
    return static_cast<std::size_t>(d);
  }
  std::size_t operator()(const GaussianMixture1D& g) const {
    const auto k = g.weights.size();
    require(k >= 1 && g.means.size() == k && g.stds.size() == k,
            ErrorCode::kDimensionMismatch, "mixture: inconsistent sizes");
    require(all_finite(as_span(g.weights)) && all_finite(as_span(g.means)) &&
                all_finite(as_span(g.stds)),
            ErrorCode::kParameterCorruption, "mixture: non-finite parameters");
    require((g.weights.array() >= 0.0).all() &&
                std::abs(g.weights.sum() - 1.0) <= 1e-12,
            ErrorCode::kParameterCorruption, "mixture: weights must sum to one");
    require((g.stds.array() > 0.0).all(), ErrorCode::kParameterCorruption,
            "mixture: standard deviations must be positive");
    return 1;
  }
  std::size_t operator()(const AutoregressiveFlow& f) const {
    validate_flow(f);
    return f.shape.dim;
  }
};

double mixture_log_density(const GaussianMixture1D& g, double x) {
  std::vector<double> terms(static_cast<std::size_t>(g.weights.size()));
  for (Eigen::Index k = 0; k < g.weights.size(); ++k) {
    const double z = (x - g.means[k]) / g.stds[k];
    terms[k] = std::log(g.weights[k]) - 0.5 * z * z - std::log(g.stds[k]) -
               0.5 * kernels::kLogTwoPi;
  }
  return ad::log_sum_exp(terms);
}

}  // namespace

std::string_view family_name(Family f) {
  switch (f) {
    case Family::kDiagGaussian: return "diag_gaussian";
    case Family::kFullGaussian: return "full_gaussian";
    case Family::kGaussianMixture1D: return "gaussian_mixture_1d";
    case Family::kAutoregressiveFlow: return "autoregressive_flow";
  }
  return "unknown";
}

Family parse_family(std::string_view name) {
  for (Family f : {Family::kDiagGaussian, Family::kFullGaussian,
                   Family::kGaussianMixture1D, Family::kAutoregressiveFlow}) {
    if (family_name(f) == name) return f;
  }
  fail(ErrorCode::kParse, "unknown posterior family '" + std::string(name) + "'");
}

AutoregressiveFlow AutoregressiveFlow::identity(std::size_t dim, std::size_t layers,
                                                std::size_t hidden) {
  AutoregressiveFlow f;
  f.shape = kernels::FlowShape{dim, hidden, layers};
  f.params.assign(f.shape.num_params(), 0.0);
  return f;
}

AutoregressiveFlow AutoregressiveFlow::initialized(std::size_t dim, std::size_t layers,
                                                   std::size_t hidden, RngStream& rng,
                                                   double weight_scale) {
  AutoregressiveFlow f = identity(dim, layers, hidden);
  const auto& s = f.shape;
  for (std::size_t l = 0; l < layers; ++l) {
    double* p = f.params.data() + l * s.params_per_layer();
    for (std::size_t k = 0; k < hidden; ++k) {
      for (std::size_t i = 0; i < s.degree(k) && i < dim; ++i) {
        p[s.w1_offset() + k * dim + i] = weight_scale * rng.normal();
      }
      p[s.b1_offset() + k] = weight_scale * rng.normal();
    }
  }
  return f;
}

void AutoregressiveFlow::set_affine(std::span<const double> mean,
                                    std::span<const double> stddev) {
  require(mean.size() == shape.dim && stddev.size() == shape.dim,
          ErrorCode::kDimensionMismatch, "flow: affine init dimension mismatch");
  double* p = params.data() + (shape.layers - 1) * shape.params_per_layer();
  for (std::size_t i = 0; i < shape.dim; ++i) {
    p[shape.b2_offset() + i] = mean[i];
    p[shape.b2_offset() + shape.dim + i] = std::log(stddev[i]);
  }
}

Posterior::Posterior(Payload payload, PosteriorMeta m)
    : meta(std::move(m)), payload_(std::move(payload)) {
  dim_ = std::visit(Validator{}, payload_);
}

Family Posterior::family() const {
  switch (payload_.index()) {
    case 0: return Family::kDiagGaussian;
    case 1: return Family::kFullGaussian;
    case 2: return Family::kGaussianMixture1D;
    default: return Family::kAutoregressiveFlow;
  }
}

kernels::GaussianParams<double> Posterior::gaussian() const {
  kernels::GaussianParams<double> g;
  if (const auto* d = std::get_if<DiagGaussian>(&payload_)) {
    g.diagonal = true;
    g.mean.assign(d->mean.begin(), d->mean.end());
    for (double ls : d->log_std) g.factor.push_back(std::exp(ls));
    return g;
  }
  const auto* f = std::get_if<FullGaussian>(&payload_);
  require(f != nullptr, ErrorCode::kUnsupported, "posterior is not Gaussian");
  g.diagonal = false;
  g.mean.assign(f->mean.begin(), f->mean.end());
  for (std::size_t i = 0; i < dim_; ++i) {
    for (std::size_t j = 0; j <= i; ++j) g.factor.push_back(f->chol_lower(i, j));
  }
  return g;
}

Vector gaussian_mean(const Posterior& q) {
  if (q.family() == Family::kDiagGaussian) return q.as<DiagGaussian>().mean;
  return q.as<FullGaussian>().mean;
}

Matrix gaussian_factor(const Posterior& q) {
  if (q.family() == Family::kDiagGaussian) {
    return q.as<DiagGaussian>().log_std.array().exp().matrix().asDiagonal();
  }
  return q.as<FullGaussian>().chol_lower;
}

Posterior make_diag_gaussian(Vector mean, Vector stddev) {
  return Posterior(DiagGaussian{std::move(mean), stddev.array().log().matrix()});
}

Posterior make_full_gaussian(Vector mean, Matrix chol_lower) {
  return Posterior(FullGaussian{std::move(mean), std::move(chol_lower)});
}

Posterior gaussian_from_params(const kernels::GaussianParams<double>& g) {
  const auto d = static_cast<Eigen::Index>(g.dim());
  Vector mean = Eigen::Map<const Vector>(g.mean.data(), d);
  if (g.diagonal) {
    Vector sd = Eigen::Map<const Vector>(g.factor.data(), d);
    return make_diag_gaussian(std::move(mean), std::move(sd));
  }
  Matrix l = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) l(i, j) = g.factor[kernels::tri_index(i, j)];
  }
  return make_full_gaussian(std::move(mean), std::move(l));
}

Posterior standard_normal(std::size_t dim) {
  const auto d = static_cast<Eigen::Index>(dim);
  return make_diag_gaussian(Vector::Zero(d), Vector::Ones(d));
}

std::size_t noise_dim(const Posterior& post) {
  return post.family() == Family::kGaussianMixture1D ? 2 : post.dim();
}

Vector transform_noise(const Posterior& post, std::span<const double> noise) {
  require(noise.size() == noise_dim(post), ErrorCode::kDimensionMismatch,
          "sample: noise dimension mismatch");
  const auto d = static_cast<Eigen::Index>(post.dim());
  if (post.is_gaussian()) {
    const auto theta = kernels::gaussian_transform<double>(post.gaussian(), noise);
    return Eigen::Map<const Vector>(theta.data(), d);
  }
  if (const auto* f = std::get_if<AutoregressiveFlow>(&post.payload())) {
    const auto theta = kernels::flow_generate<double>(
        f->shape, std::span<const double>(f->params), noise, nullptr);
    return Eigen::Map<const Vector>(theta.data(), d);
  }
  const auto& m = post.as<GaussianMixture1D>();
  // noise = (u, eps): u picks the component, eps the offset inside it.
  double cumulative = 0.0;
  Eigen::Index k = 0;
  for (; k + 1 < m.weights.size(); ++k) {
    cumulative += m.weights[k];
    if (noise[0] < cumulative) break;
  }
  Vector out(1);
  out[0] = m.means[k] + m.stds[k] * noise[1];
  return out;
}

Draws sample(const Posterior& post, std::size_t n, RngStream& rng) {
  require(n >= 1, ErrorCode::kInvalidArgument, "sample: n must be at least 1");
  const auto nd = static_cast<Eigen::Index>(noise_dim(post));
  Draws out;
  out.theta.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(post.dim()));
  out.noise.resize(static_cast<Eigen::Index>(n), nd);
  std::vector<double> eps(static_cast<std::size_t>(nd));
  const bool mixture = post.family() == Family::kGaussianMixture1D;
  for (std::size_t r = 0; r < n; ++r) {
    for (Eigen::Index j = 0; j < nd; ++j) {
      eps[j] = (mixture && j == 0) ? rng.uniform() : rng.normal();
      out.noise(static_cast<Eigen::Index>(r), j) = eps[j];
    }
    out.theta.row(static_cast<Eigen::Index>(r)) = transform_noise(post, eps).transpose();
  }
  return out;
}

double log_density(const Posterior& post, std::span<const double> theta) {
  require(theta.size() == post.dim(), ErrorCode::kDimensionMismatch,
          "log_density: dimension mismatch");
  if (post.is_gaussian()) {
    return kernels::gaussian_log_density<double>(post.gaussian(), theta);
  }
  if (const auto* f = std::get_if<AutoregressiveFlow>(&post.payload())) {
    return kernels::flow_log_density<double>(f->shape,
                                             std::span<const double>(f->params), theta);
  }
  return mixture_log_density(post.as<GaussianMixture1D>(), theta[0]);
}

double kl_gaussian(const Posterior& q1, const Posterior& q2) {
  require(q1.is_gaussian() && q2.is_gaussian(), ErrorCode::kUnsupported,
          "kl_gaussian: both arguments must be Gaussian");
  require(q1.dim() == q2.dim(), ErrorCode::kDimensionMismatch,
          "kl_gaussian: dimension mismatch");
  return kernels::gaussian_kl<double>(q1.gaussian(), q2.gaussian());
}

EntropyEstimate entropy(const Posterior& post, std::size_t n_mc, RngStream& rng) {
  if (post.is_gaussian()) {
    return {kernels::gaussian_entropy<double>(post.gaussian()), 0.0, true};
  }
  require(n_mc >= 2, ErrorCode::kInvalidArgument, "entropy: need n_mc >= 2");
  const Draws draws = sample(post, n_mc, rng);
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t r = 0; r < n_mc; ++r) {
    const Vector th = draws.theta.row(static_cast<Eigen::Index>(r)).transpose();
    const double v = -log_density(post, as_span(th));
    const double delta = v - mean;
    mean += delta / static_cast<double>(r + 1);
    m2 += delta * (v - mean);
  }
  const double var = m2 / static_cast<double>(n_mc - 1);
  return {mean, std::sqrt(var / static_cast<double>(n_mc)), false};
}

ModeDensity mode_density(const Posterior& post) {
  if (post.is_gaussian()) {
    const auto g = post.gaussian();
    const double d = static_cast<double>(post.dim());
    return {-0.5 * d * kernels::kLogTwoPi - kernels::sum_log_diag(g), true,
            "density at mean"};
  }
  constexpr std::size_t kModeSamples = 4096;
  double best = -std::numeric_limits<double>::infinity();
  if (post.family() == Family::kAutoregressiveFlow) {
    const std::vector<double> zero(post.dim(), 0.0);
    const Vector th = transform_noise(post, zero);
    best = log_density(post, as_span(th));
  } else {
    const auto& m = post.as<GaussianMixture1D>();
    for (double mu : m.means) best = std::max(best, log_density(post, {&mu, 1}));
  }
  RngStream rng(0x6D6F6465ull, 0);
  const Draws draws = sample(post, kModeSamples, rng);
  for (Eigen::Index r = 0; r < draws.theta.rows(); ++r) {
    const Vector th = draws.theta.row(r).transpose();
    best = std::max(best, log_density(post, as_span(th)));
  }
  return {best, false, "max over base-mode pushforward and 4096 seeded samples"};
}

std::size_t FamilySpec::num_params() const {
  switch (family) {
    case Family::kDiagGaussian: return 2 * dim;
    case Family::kFullGaussian: return dim + dim * (dim + 1) / 2;
    case Family::kAutoregressiveFlow: return flow.num_params();
    case Family::kGaussianMixture1D: break;
  }
  fail(ErrorCode::kUnsupported, "mixture family has no trainable parameterization");
}

std::size_t FamilySpec::noise_dim() const {
  return family == Family::kGaussianMixture1D ? 2 : dim;
}

FamilySpec family_spec(const Posterior& post) {
  FamilySpec s;
  s.family = post.family();
  s.dim = post.dim();
  if (const auto* f = std::get_if<AutoregressiveFlow>(&post.payload())) s.flow = f->shape;
  return s;
}

std::vector<double> pack(const Posterior& post) {
  const std::size_t d = post.dim();
  std::vector<double> raw;
  switch (post.family()) {
    case Family::kDiagGaussian: {
      const auto& g = post.as<DiagGaussian>();
      raw.assign(g.mean.begin(), g.mean.end());
      raw.insert(raw.end(), g.log_std.begin(), g.log_std.end());
      return raw;
    }
    case Family::kFullGaussian: {
      const auto& g = post.as<FullGaussian>();
      raw.assign(g.mean.begin(), g.mean.end());
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          const double v = g.chol_lower(i, j);
          raw.push_back(i == j ? ad::softplus_inverse(v) : v);
        }
      }
      return raw;
    }
    case Family::kAutoregressiveFlow:
      return post.as<AutoregressiveFlow>().params;
    case Family::kGaussianMixture1D: break;
  }
  fail(ErrorCode::kUnsupported, "mixture family has no trainable parameterization");
}

Posterior unpack(const FamilySpec& spec, std::span<const double> raw,
                 PosteriorMeta meta) {
  require(raw.size() == spec.num_params(), ErrorCode::kDimensionMismatch,
          "unpack: parameter count mismatch");
  const auto d = static_cast<Eigen::Index>(spec.dim);
  switch (spec.family) {
    case Family::kDiagGaussian: {
      DiagGaussian g{Eigen::Map<const Vector>(raw.data(), d),
                     Eigen::Map<const Vector>(raw.data() + d, d)};
      return Posterior(std::move(g), std::move(meta));
    }
    case Family::kFullGaussian: {
      FullGaussian g{Eigen::Map<const Vector>(raw.data(), d), Matrix::Zero(d, d)};
      for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double v = raw[d + kernels::tri_index(i, j)];
          g.chol_lower(i, j) = i == j ? ad::softplus(v) : v;
        }
      }
      return Posterior(std::move(g), std::move(meta));
    }
    case Family::kAutoregressiveFlow: {
      AutoregressiveFlow f;
      f.shape = spec.flow;
      f.params.assign(raw.begin(), raw.end());
      return Posterior(std::move(f), std::move(meta));
    }
    case Family::kGaussianMixture1D: break;
  }
  fail(ErrorCode::kUnsupported, "mixture family has no trainable parameterization");
}

kernels::GaussianParams<ad::Var> lift(ad::Tape& tape,
                                      const kernels::GaussianParams<double>& g) {
  kernels::GaussianParams<ad::Var> out;
  out.diagonal = g.diagonal;
  out.mean = tape.variables(g.mean);
  out.factor = tape.variables(g.factor);
  return out;
}

}  // namespace vbu
