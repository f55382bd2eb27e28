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

#include "vbu/vbu.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <new>
#include <string>

#include "vbu/experiments.hpp"
#include "vbu/json_io.hpp"
#include "vbu/metrics.hpp"

#ifndef VBU_VERSION
#define VBU_VERSION "0.0.0"
#endif

struct vbu_dataset {
  vbu::Dataset value;
};
struct vbu_model {
  vbu::Model value;
};
struct vbu_posterior {
  vbu::Posterior value;
};

namespace {

thread_local std::string last_error;

template <class F>
int guard(F&& fn) {
  try {
    fn();
    last_error.clear();
    return VBU_OK;
  } catch (const vbu::Error& e) {
    last_error = e.what();
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    last_error = std::string("json: ") + e.what();
    return VBU_ERR_PARSE;
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return VBU_ERR_INTERNAL;
  } catch (const std::exception& e) {
    last_error = e.what();
    return VBU_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  vbu::require(p != nullptr, vbu::ErrorCode::kInvalidArgument, std::string(what) + " is NULL");
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void put_string(char** out, const std::string& s) {
  if (out != nullptr) *out = copy_string(s);
}

vbu::Json options(const char* json) {
  if (json == nullptr || *json == '\0') return vbu::Json::object();
  vbu::Json j = vbu::parse_json(json);
  vbu::require(j.is_object(), vbu::ErrorCode::kConfig, "options: expected a JSON object");
  return j;
}

std::vector<vbu::RowId> id_vector(const int64_t* ids, size_t n) {
  if (n > 0) need(ids, "ids");
  return std::vector<vbu::RowId>(ids, ids + n);
}

}  // namespace

extern "C" {

const char* vbu_version(void) { return VBU_VERSION; }

const char* vbu_status_name(int status) {
  switch (status) {
    case VBU_OK: return "ok";
    case VBU_ERR_INVALID_ARGUMENT: return "invalid argument";
    case VBU_ERR_CONFIG: return "configuration error";
    case VBU_ERR_IO: return "i/o error";
    case VBU_ERR_PARSE: return "parse error";
    case VBU_ERR_DIMENSION_MISMATCH: return "dimension mismatch";
    case VBU_ERR_PARAMETER_CORRUPTION: return "parameter corruption";
    case VBU_ERR_DIVERGED: return "diverged";
    case VBU_ERR_UNSUPPORTED: return "unsupported";
    case VBU_ERR_NUMERICAL: return "numerical failure";
    case VBU_ERR_UNKNOWN_ID: return "unknown id";
    case VBU_ERR_DEGENERATE: return "degenerate input";
    default: return "internal error";
  }
}

const char* vbu_last_error(void) { return last_error.c_str(); }

void vbu_string_free(char* s) { std::free(s); }

void vbu_content_hash(const char* bytes, size_t n, char out[17]) {
  const std::string h = vbu::content_hash(std::string_view(bytes == nullptr ? "" : bytes, bytes ? n : 0));
  std::memcpy(out, h.c_str(), 17);
}

int vbu_dataset_load_csv(const char* path, vbu_dataset** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new vbu_dataset{vbu::load_dataset_csv(path)};
  });
}

int vbu_dataset_create(size_t n, size_t p, const double* inputs, const double* outputs,
                       const int64_t* ids, vbu_dataset** out) {
  return guard([&] {
    need(out, "out");
    if (n > 0) {
      need(outputs, "outputs");
      if (p > 0) need(inputs, "inputs");
    }
    vbu::Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
    vbu::Vector y(static_cast<Eigen::Index>(n));
    for (size_t r = 0; r < n; ++r) {
      for (size_t k = 0; k < p; ++k) {
        x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = inputs[r * p + k];
      }
      y[static_cast<Eigen::Index>(r)] = outputs[r];
    }
    std::vector<vbu::RowId> v;
    if (ids != nullptr) v.assign(ids, ids + n);
    *out = new vbu_dataset{vbu::Dataset(std::move(x), std::move(y), std::move(v))};
  });
}

size_t vbu_dataset_size(const vbu_dataset* data) { return data ? data->value.size() : 0; }

size_t vbu_dataset_num_inputs(const vbu_dataset* data) { return data ? data->value.num_inputs() : 0; }

void vbu_dataset_ids(const vbu_dataset* data, int64_t* out) {
  if (data == nullptr || out == nullptr) return;
  const auto& ids = data->value.ids();
  std::copy(ids.begin(), ids.end(), out);
}

int vbu_dataset_subset(const vbu_dataset* data, const int64_t* ids, size_t n, vbu_dataset** out) {
  return guard([&] {
    need(data, "data");
    need(out, "out");
    const auto v = id_vector(ids, n);
    *out = new vbu_dataset{data->value.subset(v)};
  });
}

int vbu_dataset_to_csv(const vbu_dataset* data, char** out) {
  return guard([&] {
    need(data, "data");
    need(out, "out");
    *out = copy_string(vbu::dataset_csv(data->value));
  });
}

void vbu_dataset_free(vbu_dataset* data) { delete data; }

int vbu_ids_load_csv(const char* path, int64_t** ids, size_t* n) {
  return guard([&] {
    need(path, "path");
    need(ids, "ids");
    need(n, "n");
    const auto v = vbu::load_ids_csv(path);
    auto* buf = static_cast<int64_t*>(std::malloc(std::max<size_t>(1, v.size()) * sizeof(int64_t)));
    if (buf == nullptr) throw std::bad_alloc();
    std::copy(v.begin(), v.end(), buf);
    *ids = buf;
    *n = v.size();
  });
}

void vbu_ids_free(int64_t* ids) { std::free(ids); }

int vbu_model_from_json(const char* json, vbu_model** out) {
  return guard([&] {
    need(json, "json");
    need(out, "out");
    *out = new vbu_model{vbu::model_from_json(vbu::parse_json(json))};
  });
}

int vbu_model_to_json(const vbu_model* model, char** out) {
  return guard([&] {
    need(model, "model");
    need(out, "out");
    *out = copy_string(vbu::dump_json(vbu::model_to_json(model->value)));
  });
}

size_t vbu_model_param_dim(const vbu_model* model) { return model ? vbu::param_dim(model->value) : 0; }

int vbu_model_check_data(const vbu_model* model, const vbu_dataset* data) {
  return guard([&] {
    need(model, "model");
    need(data, "data");
    vbu::validate_outputs(model->value, data->value);
  });
}

void vbu_model_free(vbu_model* model) { delete model; }

int vbu_posterior_from_json(const char* json, vbu_posterior** out) {
  return guard([&] {
    need(json, "json");
    need(out, "out");
    *out = new vbu_posterior{vbu::deserialize(json)};
  });
}

int vbu_posterior_load(const char* path, vbu_posterior** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new vbu_posterior{vbu::load_posterior(path)};
  });
}

int vbu_posterior_to_json(const vbu_posterior* post, char** out) {
  return guard([&] {
    need(post, "posterior");
    need(out, "out");
    *out = copy_string(vbu::serialize(post->value));
  });
}

int vbu_default_prior(const vbu_model* model, vbu_posterior** out) {
  return guard([&] {
    need(model, "model");
    need(out, "out");
    *out = new vbu_posterior{vbu::default_prior(model->value)};
  });
}

size_t vbu_posterior_dim(const vbu_posterior* post) { return post ? post->value.dim() : 0; }

const char* vbu_posterior_family(const vbu_posterior* post) {
  return post ? vbu::family_name(post->value.family()).data() : "";
}

int vbu_kl_gaussian(const vbu_posterior* a, const vbu_posterior* b, double* out) {
  return guard([&] {
    need(a, "a");
    need(b, "b");
    need(out, "out");
    *out = vbu::kl_gaussian(a->value, b->value);
  });
}

void vbu_posterior_free(vbu_posterior* post) { delete post; }

int vbu_train(const vbu_model* model, const vbu_dataset* data, const int64_t* ids, size_t n_ids,
              const vbu_posterior* prior, const char* options_json, vbu_posterior** out,
              char** trace_csv) {
  return guard([&] {
    need(model, "model");
    need(data, "data");
    need(out, "out");
    const vbu::Json opt = options(options_json);
    vbu::require_known_keys(opt, {"family", "train"}, "train options");
    const std::size_t dim = vbu::param_dim(model->value);
    const vbu::FamilySpec family =
        vbu::family_spec_from_json(opt.value("family", vbu::Json::object()), dim);
    const vbu::TrainConfig config = vbu::train_config_from_json(opt.value("train", vbu::Json::object()));
    config.validate();
    vbu::validate_outputs(model->value, data->value);
    const std::vector<vbu::RowId> rows = ids ? id_vector(ids, n_ids) : data->value.ids();
    (void)data->value.rows_of(rows);
    const vbu::Posterior p = prior ? prior->value : vbu::default_prior(model->value);
    vbu::require(p.dim() == dim, vbu::ErrorCode::kDimensionMismatch,
                 "prior dimension differs from the model");
    vbu::FitResult fit = vbu::fit_elbo(model->value, data->value, rows, family, p, config);
    const std::string trace = vbu::trace_csv(fit.trace);
    *out = new vbu_posterior{std::move(fit.posterior)};
    if (trace_csv != nullptr) *trace_csv = copy_string(trace);
  });
}

int vbu_unlearn(const vbu_posterior* q_full, const vbu_model* model, const vbu_dataset* erased,
                const char* options_json, vbu_posterior** out, char** trace_csv,
                char** sidecar_json) {
  return guard([&] {
    need(q_full, "q_full");
    need(model, "model");
    need(erased, "erased");
    need(out, "out");
    const vbu::Json opt = options(options_json);
    vbu::require_known_keys(opt, {"family", "unlearn", "gp_pointwise"}, "unlearn options");
    const vbu::Posterior& q = q_full->value;
    vbu::require(q.dim() == vbu::param_dim(model->value), vbu::ErrorCode::kDimensionMismatch,
                 "posterior dimension differs from the model");
    const vbu::UnlearnConfig config =
        vbu::unlearn_config_from_json(opt.value("unlearn", vbu::Json::object()));
    config.validate();
    const vbu::FamilySpec family = opt.contains("family")
                                       ? vbu::family_spec_from_json(opt["family"], q.dim())
                                       : vbu::family_spec(q);
    const bool pointwise = vbu::json_bool(opt, "gp_pointwise", true);
    const vbu::Dataset& e = erased->value;
    vbu::require(e.size() >= 1, vbu::ErrorCode::kInvalidArgument, "no erased rows");
    vbu::validate_outputs(model->value, e);
    const auto* gp = std::get_if<vbu::SparseGPModel>(&model->value);
    vbu::UnlearnResult r =
        gp && pointwise && q.is_gaussian() && family.family == q.family()
            ? vbu::unlearn_gp_minibatch(q, *gp, e, e.ids(), config)
            : vbu::unlearn(q, model->value, e, e.ids(), family, config);
    const std::string trace = vbu::trace_csv(r.trace);
    const std::string side = vbu::dump_json(vbu::unlearn_sidecar(r));
    *out = new vbu_posterior{std::move(r.posterior)};
    if (trace_csv != nullptr) *trace_csv = copy_string(trace);
    if (sidecar_json != nullptr) *sidecar_json = copy_string(side);
  });
}

int vbu_evaluate(const vbu_posterior* const* candidates, const char* const* labels,
                 const double* lambdas, size_t n_candidates, const vbu_posterior* full,
                 const vbu_posterior* reference, const vbu_model* model, const vbu_dataset* data,
                 const int64_t* erased_ids, size_t n_erased, size_t n_samples, uint64_t seed,
                 char** report_json, char** report_csv) {
  return guard([&] {
    need(reference, "reference");
    need(model, "model");
    need(data, "data");
    if (n_candidates > 0) need(candidates, "candidates");
    vbu::require(n_samples >= 1, vbu::ErrorCode::kConfig, "n_samples must be positive");
    vbu::require(n_erased >= 1, vbu::ErrorCode::kInvalidArgument, "no erased ids");
    const std::size_t dim = vbu::param_dim(model->value);
    const auto check_dim = [&](const vbu_posterior* p, const char* what) {
      need(p, what);
      vbu::require(p->value.dim() == dim, vbu::ErrorCode::kDimensionMismatch,
                   std::string(what) + " dimension differs from the model");
    };
    check_dim(reference, "reference");
    if (full) check_dim(full, "full");
    for (size_t i = 0; i < n_candidates; ++i) check_dim(candidates[i], "candidate");
    vbu::validate_outputs(model->value, data->value);
    const auto part = vbu::ErasePartition::from_erased(data->value, id_vector(erased_ids, n_erased));

    vbu::EvalReport rep;
    rep.seed = seed;
    rep.n_samples = n_samples;
    const auto add = [&](const vbu::Posterior& p, std::string method, std::optional<double> lambda) {
      vbu::EvalRow row = vbu::evaluate_posterior(p, reference->value, model->value, data->value, part,
                                                 n_samples, seed);
      row.method = std::move(method);
      row.lambda = lambda;
      if (lambda && std::find(rep.lambdas.begin(), rep.lambdas.end(), *lambda) == rep.lambdas.end()) {
        rep.lambdas.push_back(*lambda);
      }
      if (row.method != "full" &&
          std::find(rep.methods.begin(), rep.methods.end(), row.method) == rep.methods.end()) {
        rep.methods.push_back(row.method);
      }
      rep.rows.push_back(std::move(row));
    };
    if (full) {
      vbu::RngStream rng = vbu::RngStream(seed, vbu::kEvalStream).substream(3);
      rep.information = vbu::information_measure(reference->value, full->value, 2000, rng);
      add(full->value, "full", std::nullopt);
    }
    for (size_t i = 0; i < n_candidates; ++i) {
      const char* label = labels && labels[i] ? labels[i] : "candidate";
      std::optional<double> lambda;
      if (lambdas && std::isfinite(lambdas[i])) lambda = lambdas[i];
      add(candidates[i]->value, label, lambda);
    }
    put_string(report_json, vbu::dump_json(vbu::eval_report_to_json(rep)));
    put_string(report_csv, vbu::eval_report_csv(rep));
  });
}

int vbu_experiment_names(char** out) {
  return guard([&] {
    need(out, "out");
    vbu::Json names = vbu::Json::array();
    for (auto id : vbu::all_experiments()) names.push_back(std::string(vbu::experiment_name(id)));
    *out = copy_string(names.dump());
  });
}

int vbu_experiment_default_config(const char* experiment, char** out) {
  return guard([&] {
    need(experiment, "experiment");
    need(out, "out");
    *out = copy_string(vbu::dump_json(vbu::default_experiment_config(vbu::parse_experiment(experiment))));
  });
}

int vbu_reproduce(const char* experiment, uint64_t seed, const char* config_json, const char* out_dir,
                  int quiet, char** summary_json, int* passed) {
  return guard([&] {
    need(experiment, "experiment");
    const vbu::ExperimentId id = vbu::parse_experiment(experiment);
    vbu::ExperimentOptions opt;
    opt.seed = seed;
    if (config_json != nullptr && *config_json != '\0') opt.config = vbu::parse_json(config_json);
    if (!quiet) {
      opt.log = [name = std::string(experiment)](std::string_view msg) {
        std::cerr << "[" << name << "] " << msg << "\n";
      };
    }
    const vbu::ExperimentResult r = vbu::run_experiment(id, opt);
    if (out_dir != nullptr) vbu::write_artifacts(out_dir, r);
    put_string(summary_json, vbu::dump_json(r.summary));
    if (passed != nullptr) *passed = r.passed() ? 1 : 0;
  });
}

}  // extern "C"
