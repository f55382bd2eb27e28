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

#include "vbu/models.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "vbu/json_io.hpp"
#include "vbu/parallel.hpp"

namespace vbu {
namespace {

constexpr double kHalfLogTwoPi = 0.5 * kernels::kLogTwoPi;
// Gamma shapes at or below this floor are evaluated at the floor.
constexpr double kMinShape = 1e-8;

template <class... F>
struct Overloaded : F... {
  using F::operator()...;
};
template <class... F>
Overloaded(F...) -> Overloaded<F...>;

std::span<const double> row_span(const Matrix& m, std::size_t r, std::vector<double>& buf) {
  buf.resize(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) buf[j] = m(static_cast<Eigen::Index>(r), j);
  return buf;
}

void logistic_features(std::span<const double> x, double* out) {
  std::copy(x.begin(), x.end(), out);
  out[x.size()] = 1.0;
}

void poly_features(std::size_t degree, double x, double* out) {
  double p = 1.0;
  for (std::size_t k = 0; k <= degree; ++k) {
    out[degree - k] = p;
    p *= x;
  }
}

Json matrix_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from(const Json& j, std::string_view key) {
  const auto it = j.find(key);
  require(it != j.end() && it->is_array() && !it->empty() && (*it)[0].is_array(),
          ErrorCode::kConfig, "model: '" + std::string(key) + "' must be a 2-D array");
  const std::size_t rows = it->size();
  const std::size_t cols = (*it)[0].size();
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    require((*it)[i].is_array() && (*it)[i].size() == cols, ErrorCode::kConfig,
            "model: ragged '" + std::string(key) + "'");
    for (std::size_t c = 0; c < cols; ++c) {
      require((*it)[i][c].is_number(), ErrorCode::kConfig, "model: non-numeric entry");
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = (*it)[i][c].get<double>();
    }
  }
  return m;
}

Vector vector_from(const Json& j, std::string_view key) {
  const auto it = j.find(key);
  require(it != j.end() && it->is_array(), ErrorCode::kConfig,
          "model: '" + std::string(key) + "' must be an array");
  Vector v(static_cast<Eigen::Index>(it->size()));
  for (std::size_t i = 0; i < it->size(); ++i) {
    require((*it)[i].is_number(), ErrorCode::kConfig, "model: non-numeric entry");
    v[static_cast<Eigen::Index>(i)] = (*it)[i].get<double>();
  }
  return v;
}

Json vector_json(const Vector& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(x);
  return a;
}

double positive(const Json& j, std::string_view key, double fallback) {
  const double v = json_number(j, key, fallback);
  require(v > 0.0 && std::isfinite(v), ErrorCode::kConfig,
          "model: '" + std::string(key) + "' must be positive");
  return v;
}

// log sigma(s * f) and its derivative in f, for s = +-1.
double log_sigmoid_signed(double f, double s, double* dlog) {
  const double z = s * f;
  if (dlog) *dlog = s * ad::sigmoid(-z);
  return ad::log_sigmoid(z);
}

// Link of the sparse GP classifier: p(y=1|f) = 1/(1+e^f) = sigmoid(-f).
double gp_class_loglik(double f, double y, double* dlog) {
  return log_sigmoid_signed(f, y > 0.5 ? -1.0 : 1.0, dlog);
}

}  // namespace

// ---------------------------------------------------------------------------
// Sparse GP

double gp_point_loglik(const SparseGPModel& model, double f, double y, double* dlog) {
  if (model.kind == GpKind::kClassifier) return gp_class_loglik(f, y, dlog);
  const double s2 = model.noise_std * model.noise_std;
  const double r = y - f;
  if (dlog) *dlog = r / s2;
  return -kHalfLogTwoPi - 0.5 * std::log(s2) - r * r / (2.0 * s2);
}

SparseGPModel SparseGPModel::create(Matrix inducing, Vector lengthscales, double signal_var,
                                    GpKind kind, double noise_std) {
  require(inducing.rows() >= 1 && inducing.cols() == lengthscales.size(), ErrorCode::kConfig,
          "sparse_gp: inducing inputs and lengthscales disagree in dimension");
  require((lengthscales.array() > 0.0).all() && signal_var > 0.0 && noise_std > 0.0,
          ErrorCode::kConfig, "sparse_gp: hyperparameters must be positive");
  require(inducing.allFinite(), ErrorCode::kConfig, "sparse_gp: non-finite inducing inputs");
  SparseGPModel m;
  m.inducing = std::move(inducing);
  m.lengthscales = std::move(lengthscales);
  m.signal_var = signal_var;
  m.kind = kind;
  m.noise_std = noise_std;
  const Eigen::Index k = m.inducing.rows();
  m.kuu.resize(k, k);
  std::vector<double> xi;
  std::vector<double> xj;
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      m.kuu(i, j) = m.kernel(row_span(m.inducing, i, xi), row_span(m.inducing, j, xj));
    }
  }
  m.kuu.diagonal().array() += 1e-6 * signal_var;
  m.kuu_chol.compute(m.kuu);
  require(m.kuu_chol.info() == Eigen::Success, ErrorCode::kNumerical,
          "sparse_gp: Cholesky of K_uu failed after jitter (duplicate inducing inputs?)");
  return m;
}

double SparseGPModel::kernel(std::span<const double> x, std::span<const double> z) const {
  double r2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = lengthscales[static_cast<Eigen::Index>(i)] * (x[i] - z[i]);
    r2 += d * d;
  }
  return signal_var * std::exp(-0.5 * r2);
}

GpRowFeatures gp_features(const SparseGPModel& model, std::span<const double> x) {
  require(x.size() == static_cast<std::size_t>(model.inducing.cols()),
          ErrorCode::kDimensionMismatch, "sparse_gp: input dimension mismatch");
  const Eigen::Index m = model.inducing.rows();
  Vector k(m);
  std::vector<double> buf;
  for (Eigen::Index i = 0; i < m; ++i) k[i] = model.kernel(x, row_span(model.inducing, i, buf));
  GpRowFeatures f;
  f.a = model.kuu_chol.solve(k);
  // Exact at inducing inputs up to jitter; clamp to keep the variance valid.
  f.c = std::max(model.kernel(x, x) - k.dot(f.a), 0.0);
  return f;
}

GpMarginal gp_conditional(const SparseGPModel& model, const Posterior& q_u,
                          std::span<const double> x) {
  require(q_u.is_gaussian(), ErrorCode::kUnsupported, "gp_conditional: q_u must be Gaussian");
  require(q_u.dim() == model.num_inducing(), ErrorCode::kDimensionMismatch,
          "gp_conditional: q_u dimension differs from the number of inducing inputs");
  const GpRowFeatures f = gp_features(model, x);
  const auto g = q_u.gaussian();
  const Vector mean = Eigen::Map<const Vector>(g.mean.data(), static_cast<Eigen::Index>(g.dim()));
  // a^T Sigma a = ||L^T a||^2.
  const std::size_t d = g.dim();
  double quad = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double col = 0.0;
    if (g.diagonal) {
      col = g.factor[j] * f.a[static_cast<Eigen::Index>(j)];
    } else {
      for (std::size_t i = j; i < d; ++i) {
        col += g.factor[kernels::tri_index(i, j)] * f.a[static_cast<Eigen::Index>(i)];
      }
    }
    quad += col * col;
  }
  return {f.a.dot(mean), f.c + quad};
}

double gp_regression_expected_loglik(const SparseGPModel& model, const Posterior& q_u,
                                     std::span<const double> x, double y) {
  require(model.kind == GpKind::kRegressor, ErrorCode::kUnsupported,
          "gp_regression_expected_loglik: model is not a regressor");
  const GpMarginal m = gp_conditional(model, q_u, x);
  const double s2 = model.noise_std * model.noise_std;
  return -kHalfLogTwoPi - 0.5 * std::log(s2) - ((y - m.mean) * (y - m.mean) + m.var) / (2.0 * s2);
}

Matrix select_inducing_inputs(const Matrix& inputs, std::size_t m, RngStream& rng) {
  const auto n = static_cast<std::size_t>(inputs.rows());
  require(m >= 1 && m <= n, ErrorCode::kInvalidArgument,
          "inducing inputs: need 1 <= m <= number of rows");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  Matrix out(static_cast<Eigen::Index>(m), inputs.cols());
  for (std::size_t i = 0; i < m; ++i) out.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Model registry

std::string_view model_name(const Model& model) {
  return std::visit(Overloaded{
                        [](const LinearRegressionModel&) { return std::string_view("linear_regression"); },
                        [](const GaussianMeanModel&) { return std::string_view("gaussian_mean"); },
                        [](const LogisticRegressionModel&) { return std::string_view("logistic_regression"); },
                        [](const GammaShapeModel&) { return std::string_view("gamma_shape"); },
                        [](const BimodalSyntheticModel&) { return std::string_view("bimodal_synthetic"); },
                        [](const BetaBernoulliModel&) { return std::string_view("beta_bernoulli"); },
                        [](const SparseGPModel&) { return std::string_view("sparse_gp"); },
                        [](const DiscreteToyModel&) { return std::string_view("discrete_toy"); },
                    },
                    model);
}

std::size_t param_dim(const Model& model) {
  return std::visit(Overloaded{
                        [](const LinearRegressionModel& m) { return m.degree + 1; },
                        [](const GaussianMeanModel&) { return std::size_t{1}; },
                        [](const LogisticRegressionModel& m) {
                          return m.num_classes == 2 ? m.num_inputs + 1
                                                    : m.num_classes * (m.num_inputs + 1);
                        },
                        [](const GammaShapeModel&) { return std::size_t{1}; },
                        [](const BimodalSyntheticModel&) { return std::size_t{1}; },
                        [](const BetaBernoulliModel&) { return std::size_t{1}; },
                        [](const SparseGPModel& m) { return m.num_inducing(); },
                        [](const DiscreteToyModel&) { return std::size_t{1}; },
                    },
                    model);
}

bool is_linear_gaussian(const Model& model) {
  if (std::holds_alternative<LinearRegressionModel>(model) ||
      std::holds_alternative<GaussianMeanModel>(model)) {
    return true;
  }
  const auto* gp = std::get_if<SparseGPModel>(&model);
  return gp != nullptr && gp->kind == GpKind::kRegressor;
}

Posterior default_prior(const Model& model) {
  const std::size_t d = param_dim(model);
  const auto iso = [d](double sd) {
    return make_diag_gaussian(Vector::Zero(static_cast<Eigen::Index>(d)),
                              Vector::Constant(static_cast<Eigen::Index>(d), sd));
  };
  if (const auto* gp = std::get_if<SparseGPModel>(&model)) {
    Matrix l = gp->kuu_chol.matrixL();
    return make_full_gaussian(Vector::Zero(static_cast<Eigen::Index>(d)), std::move(l));
  }
  if (std::holds_alternative<LogisticRegressionModel>(model)) return iso(10.0);
  if (std::holds_alternative<GammaShapeModel>(model)) {
    return make_diag_gaussian(Vector::Constant(1, 2.0), Vector::Constant(1, 2.0));
  }
  if (std::holds_alternative<GaussianMeanModel>(model)) return iso(10.0);
  if (std::holds_alternative<BetaBernoulliModel>(model) ||
      std::holds_alternative<DiscreteToyModel>(model)) {
    fail(ErrorCode::kUnsupported, "model has no Gaussian prior");
  }
  return iso(1.0);
}

Json model_to_json(const Model& model) {
  Json j = Json::object();
  j["kind"] = std::string(model_name(model));
  std::visit(Overloaded{
                 [&](const LinearRegressionModel& m) {
                   j["degree"] = m.degree;
                   j["noise_std"] = m.noise_std;
                 },
                 [&](const GaussianMeanModel& m) { j["noise_std"] = m.noise_std; },
                 [&](const LogisticRegressionModel& m) {
                   j["num_inputs"] = m.num_inputs;
                   j["num_classes"] = m.num_classes;
                 },
                 [&](const GammaShapeModel& m) { j["rate"] = m.rate; },
                 [&](const BimodalSyntheticModel&) {},
                 [&](const BetaBernoulliModel& m) {
                   j["prior_a"] = m.prior_a;
                   j["prior_b"] = m.prior_b;
                 },
                 [&](const SparseGPModel& m) {
                   j["gp_kind"] = m.kind == GpKind::kClassifier ? "classifier" : "regressor";
                   j["lengthscales"] = vector_json(m.lengthscales);
                   j["signal_var"] = m.signal_var;
                   j["noise_std"] = m.noise_std;
                   j["inducing_inputs"] = matrix_json(m.inducing);
                 },
                 [&](const DiscreteToyModel& m) {
                   j["prior"] = vector_json(m.prior);
                   j["table"] = matrix_json(m.table);
                 },
             },
             model);
  return j;
}

Model model_from_json(const Json& j) {
  require(j.is_object(), ErrorCode::kConfig, "model: expected an object");
  const std::string kind = json_string(j, "kind", "");
  if (kind == "linear_regression") {
    const auto degree = json_int(j, "degree", 3);
    require(degree >= 0 && degree <= 12, ErrorCode::kConfig, "model: degree out of range");
    return LinearRegressionModel{static_cast<std::size_t>(degree), positive(j, "noise_std", 0.05)};
  }
  if (kind == "gaussian_mean") return GaussianMeanModel{positive(j, "noise_std", 1.0)};
  if (kind == "logistic_regression") {
    const auto p = json_int(j, "num_inputs", 0);
    const auto k = json_int(j, "num_classes", 2);
    require(p >= 1 && k >= 2, ErrorCode::kConfig,
            "model: logistic regression needs num_inputs >= 1 and num_classes >= 2");
    return LogisticRegressionModel{static_cast<std::size_t>(p), static_cast<std::size_t>(k)};
  }
  if (kind == "gamma_shape") return GammaShapeModel{positive(j, "rate", 1.0)};
  if (kind == "bimodal_synthetic") return BimodalSyntheticModel{};
  if (kind == "beta_bernoulli") {
    return BetaBernoulliModel{positive(j, "prior_a", 1.0), positive(j, "prior_b", 1.0)};
  }
  if (kind == "sparse_gp") {
    const std::string gk = json_string(j, "gp_kind", "classifier");
    require(gk == "classifier" || gk == "regressor", ErrorCode::kConfig,
            "model: gp_kind must be classifier or regressor");
    return SparseGPModel::create(matrix_from(j, "inducing_inputs"), vector_from(j, "lengthscales"),
                                 positive(j, "signal_var", 1.0),
                                 gk == "classifier" ? GpKind::kClassifier : GpKind::kRegressor,
                                 positive(j, "noise_std", 0.1));
  }
  if (kind == "discrete_toy") {
    DiscreteToyModel m{vector_from(j, "prior"), matrix_from(j, "table")};
    require(m.prior.size() == m.table.rows() && m.prior.size() >= 1, ErrorCode::kConfig,
            "model: prior and table disagree in support size");
    require(m.table.size() <= 1024, ErrorCode::kConfig, "model: support x outcomes exceeds 1024");
    require((m.prior.array() >= 0.0).all() && std::abs(m.prior.sum() - 1.0) <= 1e-12,
            ErrorCode::kConfig, "model: prior must be normalized");
    for (Eigen::Index k = 0; k < m.table.rows(); ++k) {
      require((m.table.row(k).array() >= 0.0).all() && std::abs(m.table.row(k).sum() - 1.0) <= 1e-12,
              ErrorCode::kConfig, "model: likelihood rows must be normalized");
    }
    return m;
  }
  fail(ErrorCode::kConfig, "model: unknown kind '" + kind + "'");
}

void validate_outputs(const Model& model, const Dataset& data) {
  const Vector& y = data.outputs();
  const auto is_int = [](double v) { return v == std::floor(v); };
  std::visit(Overloaded{
                 [&](const LogisticRegressionModel& m) {
                   require(data.num_inputs() == m.num_inputs, ErrorCode::kDimensionMismatch,
                           "dataset input width differs from the model");
                   for (double v : y) {
                     require(is_int(v) && v >= 0 && v < static_cast<double>(m.num_classes),
                             ErrorCode::kInvalidArgument, "labels must be class indices");
                   }
                 },
                 [&](const GammaShapeModel&) {
                   for (double v : y) {
                     require(v > 0.0, ErrorCode::kInvalidArgument, "Gamma observations must be positive");
                   }
                 },
                 [&](const BetaBernoulliModel&) {
                   for (double v : y) {
                     require(v == 0.0 || v == 1.0, ErrorCode::kInvalidArgument, "Bernoulli outcomes must be 0 or 1");
                   }
                 },
                 [&](const SparseGPModel& m) {
                   require(data.num_inputs() == static_cast<std::size_t>(m.inducing.cols()),
                           ErrorCode::kDimensionMismatch, "dataset input width differs from the model");
                   if (m.kind == GpKind::kClassifier) {
                     for (double v : y) {
                       require(v == 0.0 || v == 1.0, ErrorCode::kInvalidArgument, "labels must be 0 or 1");
                     }
                   }
                 },
                 [&](const DiscreteToyModel& m) {
                   for (double v : y) {
                     require(is_int(v) && v >= 0 && v < static_cast<double>(m.table.cols()),
                             ErrorCode::kInvalidArgument, "outcome outside the discrete domain");
                   }
                 },
                 [&](const LinearRegressionModel&) {
                   require(data.num_inputs() >= 1, ErrorCode::kDimensionMismatch,
                           "linear regression needs one input column");
                 },
                 [&](const auto&) {},
             },
             model);
}

// ---------------------------------------------------------------------------
// Likelihood

Likelihood::Likelihood(const Model& model, const Dataset& data, std::span<const std::size_t> rows)
    : model_(&model), rows_(rows.begin(), rows.end()), dim_(param_dim(model)) {
  linear_gaussian_ = is_linear_gaussian(model);
  const std::size_t n = rows_.size();
  y_.resize(n);
  c_.assign(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    require(rows_[k] < data.size(), ErrorCode::kUnknownId, "likelihood: row out of range");
    y_[k] = data.outputs()[static_cast<Eigen::Index>(rows_[k])];
  }
  std::vector<double> x;
  std::visit(Overloaded{
                 [&](const LinearRegressionModel& m) {
                   width_ = m.degree + 1;
                   feat_.resize(n * width_);
                   for (std::size_t k = 0; k < n; ++k) {
                     poly_features(m.degree, data.inputs()(static_cast<Eigen::Index>(rows_[k]), 0),
                                   feat_.data() + k * width_);
                   }
                 },
                 [&](const GaussianMeanModel&) {
                   width_ = 1;
                   feat_.assign(n, 1.0);
                 },
                 [&](const LogisticRegressionModel& m) {
                   width_ = m.num_inputs + 1;
                   feat_.resize(n * width_);
                   for (std::size_t k = 0; k < n; ++k) {
                     logistic_features(row_span(data.inputs(), rows_[k], x), feat_.data() + k * width_);
                   }
                 },
                 [&](const SparseGPModel& m) {
                   width_ = m.num_inducing();
                   feat_.resize(n * width_);
                   for (std::size_t k = 0; k < n; ++k) {
                     const GpRowFeatures f = gp_features(m, row_span(data.inputs(), rows_[k], x));
                     std::copy(f.a.begin(), f.a.end(), feat_.begin() + static_cast<std::ptrdiff_t>(k * width_));
                     c_[k] = f.c;
                   }
                 },
                 [&](const auto&) { width_ = 0; },
             },
             model);
  validate_outputs(model, data);
}

std::span<const double> Likelihood::features(std::size_t k) const {
  return {feat_.data() + k * width_, width_};
}

double Likelihood::point(std::span<const double> theta, std::size_t k, RngStream* noise,
                         double* grad) const {
  require(theta.size() == dim_, ErrorCode::kDimensionMismatch, "likelihood: theta dimension mismatch");
  const double y = y_[k];
  const auto feat = features(k);
  return std::visit(
      Overloaded{
          [&](const LinearRegressionModel& m) {
            const double s2 = m.noise_std * m.noise_std;
            const double r = y - ad::dot(theta, feat);
            if (grad) {
              for (std::size_t i = 0; i < dim_; ++i) grad[i] += r / s2 * feat[i];
            }
            return -kHalfLogTwoPi - 0.5 * std::log(s2) - r * r / (2.0 * s2);
          },
          [&](const GaussianMeanModel& m) {
            const double s2 = m.noise_std * m.noise_std;
            const double r = y - theta[0];
            if (grad) grad[0] += r / s2;
            return -kHalfLogTwoPi - 0.5 * std::log(s2) - r * r / (2.0 * s2);
          },
          [&](const LogisticRegressionModel& m) {
            const std::size_t w = width_;
            if (m.num_classes == 2) {
              const double z = ad::dot(theta, feat);
              double dlog = 0.0;
              const double ll = log_sigmoid_signed(z, y > 0.5 ? 1.0 : -1.0, &dlog);
              if (grad) {
                for (std::size_t i = 0; i < w; ++i) grad[i] += dlog * feat[i];
              }
              return ll;
            }
            std::vector<double> z(m.num_classes);
            for (std::size_t c = 0; c < m.num_classes; ++c) z[c] = ad::dot(theta.subspan(c * w, w), feat);
            const double lse = ad::log_sum_exp(z);
            const auto label = static_cast<std::size_t>(y);
            if (grad) {
              for (std::size_t c = 0; c < m.num_classes; ++c) {
                const double coef = (c == label ? 1.0 : 0.0) - std::exp(z[c] - lse);
                for (std::size_t i = 0; i < w; ++i) grad[c * w + i] += coef * feat[i];
              }
            }
            return z[label] - lse;
          },
          [&](const GammaShapeModel& m) {
            const bool floored = theta[0] <= kMinShape;
            const double a = floored ? kMinShape : theta[0];
            const double lx = std::log(y);
            if (grad && !floored) grad[0] += std::log(m.rate) - boost::math::digamma(a) + lx;
            return a * std::log(m.rate) - std::lgamma(a) + (a - 1.0) * lx - m.rate * y;
          },
          [&](const BimodalSyntheticModel&) {
            const double u = 2.0 * theta[0] - 2.0;
            if (grad) grad[0] += 2.0 * ad::sigmoid(u);
            return ad::softplus(u);
          },
          [&](const BetaBernoulliModel&) {
            const double t = theta[0];
            require(t > 0.0 && t < 1.0, ErrorCode::kInvalidArgument,
                    "beta_bernoulli: theta must lie in (0, 1)");
            if (grad) grad[0] += y > 0.5 ? 1.0 / t : -1.0 / (1.0 - t);
            return y > 0.5 ? std::log(t) : std::log1p(-t);
          },
          [&](const SparseGPModel& m) {
            const double mu = ad::dot(theta, feat);
            const double c = c_[k];
            double dmu = 0.0;
            double ll = 0.0;
            if (m.kind == GpKind::kRegressor) {
              const double s2 = m.noise_std * m.noise_std;
              const double r = y - mu;
              ll = -kHalfLogTwoPi - 0.5 * std::log(s2) - (r * r + c) / (2.0 * s2);
              dmu = r / s2;
            } else if (noise != nullptr) {
              ll = gp_class_loglik(mu + std::sqrt(c) * noise->normal(), y, &dmu);
            } else {
              const Quadrature& q = gauss_hermite();
              const double sd = std::sqrt(c);
              for (std::size_t i = 0; i < q.nodes.size(); ++i) {
                double d = 0.0;
                ll += q.weights[i] * gp_class_loglik(mu + sd * q.nodes[i], y, &d);
                dmu += q.weights[i] * d;
              }
            }
            if (grad) {
              for (std::size_t i = 0; i < dim_; ++i) grad[i] += dmu * feat[i];
            }
            return ll;
          },
          [&](const DiscreteToyModel& m) {
            const auto s = static_cast<Eigen::Index>(theta[0]);
            require(theta[0] == static_cast<double>(s) && s >= 0 && s < m.table.rows(),
                    ErrorCode::kInvalidArgument, "discrete_toy: theta must be a support index");
            return std::log(m.table(s, static_cast<Eigen::Index>(y)));
          },
      },
      *model_);
}

double Likelihood::total(std::span<const double> theta, std::span<const std::size_t> subset,
                         RngStream* noise, double scale, double* grad) const {
  const std::size_t n = subset.empty() ? rows_.size() : subset.size();
  const auto index = [&](std::size_t i) { return subset.empty() ? i : subset[i]; };
  constexpr std::size_t kChunk = 2048;
  const std::size_t chunks = chunk_count(n, kChunk);
  if (chunks <= 1 || noise != nullptr) {
    double v = 0.0;
    std::vector<double> g(grad ? dim_ : 0, 0.0);
    for (std::size_t i = 0; i < n; ++i) v += point(theta, index(i), noise, grad ? g.data() : nullptr);
    if (grad) {
      for (std::size_t i = 0; i < dim_; ++i) grad[i] += scale * g[i];
    }
    return scale * v;
  }
  std::vector<double> values(chunks, 0.0);
  std::vector<double> grads(grad ? chunks * dim_ : 0, 0.0);
  for_each_chunk(n, kChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
    double v = 0.0;
    double* g = grad ? grads.data() + c * dim_ : nullptr;
    for (std::size_t i = b; i < e; ++i) v += point(theta, index(i), nullptr, g);
    values[c] = v;
  });
  double v = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    v += values[c];
    if (grad) {
      for (std::size_t i = 0; i < dim_; ++i) grad[i] += scale * grads[c * dim_ + i];
    }
  }
  return scale * v;
}

ad::Var Likelihood::total(std::span<const ad::Var> theta, std::span<const std::size_t> subset,
                          RngStream* noise, double scale) const {
  require(!theta.empty(), ErrorCode::kDimensionMismatch, "likelihood: empty theta");
  std::vector<double> values(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) values[i] = theta[i].value();
  std::vector<double> grad(theta.size(), 0.0);
  const double v = total(values, subset, noise, scale, grad.data());
  return theta[0].tape()->nary(v, theta, grad);
}

ThetaPredictive Likelihood::predictive(std::span<const double> theta, std::size_t k) const {
  require(theta.size() == dim_, ErrorCode::kDimensionMismatch, "predictive: theta dimension mismatch");
  const auto feat = features(k);
  ThetaPredictive out;
  std::visit(Overloaded{
                 [&](const LinearRegressionModel& m) {
                   out.gaussian = true;
                   out.mean = ad::dot(theta, feat);
                   out.var = m.noise_std * m.noise_std;
                 },
                 [&](const GaussianMeanModel& m) {
                   out.gaussian = true;
                   out.mean = theta[0];
                   out.var = m.noise_std * m.noise_std;
                 },
                 [&](const LogisticRegressionModel& m) {
                   const std::size_t w = width_;
                   if (m.num_classes == 2) {
                     const double p1 = ad::sigmoid(ad::dot(theta, feat));
                     out.probs = {1.0 - p1, p1};
                     return;
                   }
                   std::vector<double> z(m.num_classes);
                   for (std::size_t c = 0; c < m.num_classes; ++c) z[c] = ad::dot(theta.subspan(c * w, w), feat);
                   const double lse = ad::log_sum_exp(z);
                   for (double zc : z) out.probs.push_back(std::exp(zc - lse));
                 },
                 [&](const BetaBernoulliModel&) { out.probs = {1.0 - theta[0], theta[0]}; },
                 [&](const GammaShapeModel& m) {
                   const double a = std::max(theta[0], kMinShape);
                   out.gaussian = true;
                   out.mean = a / m.rate;
                   out.var = a / (m.rate * m.rate);
                 },
                 [&](const SparseGPModel& m) {
                   const double mu = ad::dot(theta, feat);
                   if (m.kind == GpKind::kRegressor) {
                     out.gaussian = true;
                     out.mean = mu;
                     out.var = c_[k] + m.noise_std * m.noise_std;
                     return;
                   }
                   const Quadrature& q = gauss_hermite();
                   const double sd = std::sqrt(c_[k]);
                   double p1 = 0.0;
                   for (std::size_t i = 0; i < q.nodes.size(); ++i) {
                     p1 += q.weights[i] * ad::sigmoid(-(mu + sd * q.nodes[i]));
                   }
                   out.probs = {1.0 - p1, p1};
                 },
                 [&](const DiscreteToyModel& m) {
                   const auto s = static_cast<Eigen::Index>(theta[0]);
                   for (Eigen::Index y = 0; y < m.table.cols(); ++y) out.probs.push_back(m.table(s, y));
                 },
                 [&](const auto&) {
                   fail(ErrorCode::kUnsupported, "predictive: model has no per-input predictive");
                 },
             },
             *model_);
  return out;
}

LinearGaussianStats Likelihood::stats(std::span<const std::size_t> subset) const {
  require(linear_gaussian_, ErrorCode::kUnsupported, "stats: model is not linear-Gaussian");
  LinearGaussianStats s;
  const auto w = static_cast<Eigen::Index>(width_);
  s.a_outer = Matrix::Zero(w, w);
  s.a_y = Vector::Zero(w);
  const std::size_t n = subset.empty() ? rows_.size() : subset.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = subset.empty() ? i : subset[i];
    const Eigen::Map<const Vector> a(feat_.data() + k * width_, w);
    s.a_outer.selfadjointView<Eigen::Lower>().rankUpdate(a);
    s.a_y += y_[k] * a;
    s.yy += y_[k] * y_[k];
    s.c_sum += c_[k];
  }
  s.a_outer = s.a_outer.selfadjointView<Eigen::Lower>();
  s.count = static_cast<double>(n);
  s.noise_var = std::visit(Overloaded{
                               [](const LinearRegressionModel& m) { return m.noise_std * m.noise_std; },
                               [](const GaussianMeanModel& m) { return m.noise_std * m.noise_std; },
                               [](const SparseGPModel& m) { return m.noise_std * m.noise_std; },
                               [](const auto&) { return 1.0; },
                           },
                           *model_);
  return s;
}

const Quadrature& gauss_hermite(std::size_t n) {
  static const std::size_t kDefault = 32;
  static const Quadrature q32 = [] {
    // Golub-Welsch on the Jacobi matrix of the probabilists' Hermite polynomials.
    const auto size = static_cast<Eigen::Index>(kDefault);
    Matrix j = Matrix::Zero(size, size);
    for (Eigen::Index k = 1; k < size; ++k) {
      j(k, k - 1) = std::sqrt(static_cast<double>(k));
      j(k - 1, k) = j(k, k - 1);
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(j);
    Quadrature q;
    for (Eigen::Index k = 0; k < size; ++k) {
      q.nodes.push_back(es.eigenvalues()[k]);
      const double v = es.eigenvectors()(0, k);
      q.weights.push_back(v * v);
    }
    return q;
  }();
  require(n == kDefault, ErrorCode::kUnsupported, "gauss_hermite: only the 32-point rule is built");
  return q32;
}

double log_lik_point(const Model& model, std::span<const double> theta, const Dataset& data,
                     std::size_t row) {
  const std::size_t rows[] = {row};
  return Likelihood(model, data, rows).point(theta, 0, nullptr, nullptr);
}

double log_lik_set(const Model& model, std::span<const double> theta, const Dataset& data,
                   std::span<const RowId> ids) {
  const auto rows = data.rows_of(ids);
  if (rows.empty()) return 0.0;
  return Likelihood(model, data, rows).total(theta, {}, nullptr, 1.0, nullptr);
}

Vector discrete_posterior(const DiscreteToyModel& model, const Dataset& data,
                          std::span<const RowId> ids) {
  const Eigen::Index k = model.prior.size();
  Vector log_post(k);
  for (Eigen::Index s = 0; s < k; ++s) {
    log_post[s] = std::log(model.prior[s]);
    for (RowId id : ids) {
      const auto y = static_cast<Eigen::Index>(data.outputs()[static_cast<Eigen::Index>(data.row_of(id))]);
      log_post[s] += std::log(model.table(s, y));
    }
  }
  const double m = log_post.maxCoeff();
  require(std::isfinite(m), ErrorCode::kDegenerate, "discrete posterior: data impossible under every state");
  Vector p = (log_post.array() - m).exp();
  return p / p.sum();
}

// ---------------------------------------------------------------------------
// Generators

Dataset generate_moon(std::size_t n_per_class, double noise_std, std::uint64_t seed) {
  require(n_per_class >= 1, ErrorCode::kInvalidArgument, "generate_moon: n_per_class must be >= 1");
  RngStream rng(seed, 0x6d6f6f6e);
  const std::size_t n = 2 * n_per_class;
  Matrix x(static_cast<Eigen::Index>(n), 2);
  Vector y(static_cast<Eigen::Index>(n));
  const double denom = n_per_class > 1 ? static_cast<double>(n_per_class - 1) : 1.0;
  for (std::size_t i = 0; i < n_per_class; ++i) {
    const double t = M_PI * static_cast<double>(i) / denom;
    const auto r0 = static_cast<Eigen::Index>(i);
    const auto r1 = static_cast<Eigen::Index>(n_per_class + i);
    x(r0, 0) = std::cos(t) + noise_std * rng.normal();
    x(r0, 1) = std::sin(t) + noise_std * rng.normal();
    y[r0] = 0.0;
    x(r1, 0) = 1.0 - std::cos(t) + noise_std * rng.normal();
    x(r1, 1) = 0.5 - std::sin(t) + noise_std * rng.normal();
    y[r1] = 1.0;
  }
  return Dataset(std::move(x), std::move(y));
}

Dataset generate_cubic(std::size_t n, std::span<const double> coefficients, double noise_std,
                       std::pair<double, double> input_range, std::uint64_t seed) {
  require(n >= 1, ErrorCode::kInvalidArgument, "generate_cubic: n must be >= 1");
  require(coefficients.size() == 4, ErrorCode::kInvalidArgument, "generate_cubic: need 4 coefficients");
  RngStream rng(seed, 0x63756265);
  Matrix x(static_cast<Eigen::Index>(n), 1);
  Vector y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double v = input_range.first + (input_range.second - input_range.first) * rng.uniform();
    const auto r = static_cast<Eigen::Index>(i);
    x(r, 0) = v;
    y[r] = ((coefficients[0] * v + coefficients[1]) * v + coefficients[2]) * v + coefficients[3] +
           noise_std * rng.normal();
  }
  return Dataset(std::move(x), std::move(y));
}

Dataset generate_gamma(std::size_t n, double shape, double rate, std::uint64_t seed) {
  require(n >= 1 && shape > 0.0 && rate > 0.0, ErrorCode::kInvalidArgument,
          "generate_gamma: need n >= 1 and positive shape and rate");
  RngStream rng(seed, 0x67616d6d);
  // Marsaglia-Tsang with the RngStream's normals and uniforms.
  const double boost = shape < 1.0 ? 1.0 : 0.0;
  const double d = shape + boost - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(n), 1);
  Vector y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    while (true) {
      const double z = rng.normal();
      const double t = 1.0 + c * z;
      if (t <= 0.0) continue;
      v = t * t * t;
      const double u = rng.uniform();
      if (std::log(u) < 0.5 * z * z + d - d * v + d * std::log(v)) break;
    }
    double g = d * v;
    if (boost > 0.0) g *= std::pow(rng.uniform(), 1.0 / shape);
    y[static_cast<Eigen::Index>(i)] = g / rate;
  }
  return Dataset(std::move(x), std::move(y));
}

Dataset generate_gp_regression(std::size_t n, double lo, double hi, double lengthscale,
                               double signal_var, double noise_std, std::uint64_t seed) {
  require(n >= 1 && hi > lo && lengthscale > 0.0, ErrorCode::kInvalidArgument,
          "generate_gp_regression: invalid arguments");
  RngStream rng(seed, 0x67707267);
  constexpr int kFeatures = 256;
  std::vector<double> omega(kFeatures);
  std::vector<double> phase(kFeatures);
  std::vector<double> weight(kFeatures);
  for (int k = 0; k < kFeatures; ++k) {
    omega[k] = rng.normal() / lengthscale;
    phase[k] = 2.0 * M_PI * rng.uniform();
    weight[k] = rng.normal();
  }
  const double amp = std::sqrt(2.0 * signal_var / kFeatures);
  Matrix x(static_cast<Eigen::Index>(n), 1);
  Vector y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double v = lo + (hi - lo) * (static_cast<double>(i) + rng.uniform()) / static_cast<double>(n);
    double f = 0.0;
    for (int k = 0; k < kFeatures; ++k) f += weight[k] * std::cos(omega[k] * v + phase[k]);
    const auto r = static_cast<Eigen::Index>(i);
    x(r, 0) = v;
    y[r] = amp * f + noise_std * rng.normal();
  }
  return Dataset(std::move(x), std::move(y));
}

Dataset generate_classification(std::size_t n, std::size_t num_inputs, std::size_t num_classes,
                                double separation, std::uint64_t seed) {
  require(n >= num_classes && num_inputs >= 1 && num_classes >= 2, ErrorCode::kInvalidArgument,
          "generate_classification: invalid arguments");
  RngStream rng(seed, 0x636c6173);
  Matrix centers(static_cast<Eigen::Index>(num_classes), static_cast<Eigen::Index>(num_inputs));
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    for (Eigen::Index j = 0; j < centers.cols(); ++j) centers(c, j) = separation * rng.normal();
  }
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(num_inputs));
  Vector y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const auto c = static_cast<Eigen::Index>(i % num_classes);
    y[r] = static_cast<double>(c);
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(r, j) = centers(c, j) + rng.normal();
  }
  return Dataset(std::move(x), std::move(y));
}

}  // namespace vbu
