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

#ifndef VBU_VBU_H_
#define VBU_VBU_H_

/* C interface to the vbunlearn library.
 *
 * Objects are opaque handles released with their _free function. Every
 * fallible call returns a vbu_status; on failure vbu_last_error() describes
 * the problem for the calling thread. Strings returned through char** are
 * owned by the caller and released with vbu_string_free. JSON arguments
 * use the same schemas as the library's files. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define VBU_API __declspec(dllexport)
#else
#define VBU_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vbu_status {
  VBU_OK = 0,
  VBU_ERR_INVALID_ARGUMENT = 1,
  VBU_ERR_CONFIG = 2,
  VBU_ERR_IO = 3,
  VBU_ERR_PARSE = 4,
  VBU_ERR_DIMENSION_MISMATCH = 5,
  VBU_ERR_PARAMETER_CORRUPTION = 6,
  VBU_ERR_DIVERGED = 7,
  VBU_ERR_UNSUPPORTED = 8,
  VBU_ERR_NUMERICAL = 9,
  VBU_ERR_UNKNOWN_ID = 10,
  VBU_ERR_DEGENERATE = 11,
  VBU_ERR_INTERNAL = 99
} vbu_status;

typedef struct vbu_dataset vbu_dataset;
typedef struct vbu_model vbu_model;
typedef struct vbu_posterior vbu_posterior;

VBU_API const char* vbu_version(void);
VBU_API const char* vbu_status_name(int status);
/* Message of the last failed call on this thread; empty after success. */
VBU_API const char* vbu_last_error(void);
VBU_API void vbu_string_free(char* s);
/* 64-bit FNV-1a of the bytes as 16 hex digits plus a terminator. */
VBU_API void vbu_content_hash(const char* bytes, size_t n, char out[17]);

/* Datasets ---------------------------------------------------------------- */

/* CSV with header id,x0,...,x{p-1},y. */
VBU_API int vbu_dataset_load_csv(const char* path, vbu_dataset** out);
/* `inputs` is row-major n x p; `ids` may be NULL for 0..n-1. */
VBU_API int vbu_dataset_create(size_t n, size_t p, const double* inputs, const double* outputs,
                               const int64_t* ids, vbu_dataset** out);
VBU_API size_t vbu_dataset_size(const vbu_dataset* data);
VBU_API size_t vbu_dataset_num_inputs(const vbu_dataset* data);
/* Copies the ids into `out`, which must hold vbu_dataset_size() entries. */
VBU_API void vbu_dataset_ids(const vbu_dataset* data, int64_t* out);
VBU_API int vbu_dataset_subset(const vbu_dataset* data, const int64_t* ids, size_t n,
                               vbu_dataset** out);
VBU_API int vbu_dataset_to_csv(const vbu_dataset* data, char** out);
VBU_API void vbu_dataset_free(vbu_dataset* data);

/* Single-column CSV with header `id`; release with vbu_ids_free. */
VBU_API int vbu_ids_load_csv(const char* path, int64_t** ids, size_t* n);
VBU_API void vbu_ids_free(int64_t* ids);

/* Models ------------------------------------------------------------------ */

VBU_API int vbu_model_from_json(const char* json, vbu_model** out);
VBU_API int vbu_model_to_json(const vbu_model* model, char** out);
VBU_API size_t vbu_model_param_dim(const vbu_model* model);
/* Checks every output of `data` against the model's domain and inputs. */
VBU_API int vbu_model_check_data(const vbu_model* model, const vbu_dataset* data);
VBU_API void vbu_model_free(vbu_model* model);

/* Posteriors -------------------------------------------------------------- */

VBU_API int vbu_posterior_from_json(const char* json, vbu_posterior** out);
VBU_API int vbu_posterior_load(const char* path, vbu_posterior** out);
VBU_API int vbu_posterior_to_json(const vbu_posterior* post, char** out);
VBU_API int vbu_default_prior(const vbu_model* model, vbu_posterior** out);
VBU_API size_t vbu_posterior_dim(const vbu_posterior* post);
/* Static string such as "diag_gaussian". */
VBU_API const char* vbu_posterior_family(const vbu_posterior* post);
/* Closed-form KL[a || b] for Gaussian posteriors. */
VBU_API int vbu_kl_gaussian(const vbu_posterior* a, const vbu_posterior* b, double* out);
VBU_API void vbu_posterior_free(vbu_posterior* post);

/* Pipelines --------------------------------------------------------------- */

/* Variational training on the rows `ids` (all rows when ids is NULL).
 * options: {"family": {...}, "train": {...}}; `prior` may be NULL for the
 * model's default prior. `trace_csv` may be NULL. */
VBU_API int vbu_train(const vbu_model* model, const vbu_dataset* data, const int64_t* ids,
                      size_t n_ids, const vbu_posterior* prior, const char* options_json,
                      vbu_posterior** out, char** trace_csv);

/* Removes the rows of `erased` from q_full. Only q_full and the erased rows
 * are inputs; there is no argument for the remaining data.
 * options: {"unlearn": {...}, "family": {...}, "gp_pointwise": bool}, all
 * optional; the family defaults to q_full's. `trace_csv` and `sidecar_json`
 * may be NULL. */
VBU_API int vbu_unlearn(const vbu_posterior* q_full, const vbu_model* model,
                        const vbu_dataset* erased, const char* options_json, vbu_posterior** out,
                        char** trace_csv, char** sidecar_json);

/* Predictive-KL report of each candidate against `reference` over the
 * erased and remaining rows of `data`. `labels` names the method of each
 * candidate (NULL entries or array: "candidate"); `lambdas` may be NULL or
 * hold NaN for rows without a lambda. When `full` is given it is added as
 * the baseline row and the entropy-reduction measure is reported. */
VBU_API int vbu_evaluate(const vbu_posterior* const* candidates, const char* const* labels,
                         const double* lambdas, size_t n_candidates, const vbu_posterior* full,
                         const vbu_posterior* reference, const vbu_model* model,
                         const vbu_dataset* data, const int64_t* erased_ids, size_t n_erased,
                         size_t n_samples, uint64_t seed, char** report_json, char** report_csv);

/* Experiments ------------------------------------------------------------- */

/* JSON array of experiment names. */
VBU_API int vbu_experiment_names(char** out);
VBU_API int vbu_experiment_default_config(const char* experiment, char** out);
/* Runs an experiment and writes its artifacts below out_dir (nothing is
 * written when out_dir is NULL). `config_json` may be NULL. `passed`
 * receives 1 when every check passed. Progress goes to stderr unless
 * quiet is nonzero. */
VBU_API int vbu_reproduce(const char* experiment, uint64_t seed, const char* config_json,
                          const char* out_dir, int quiet, char** summary_json, int* passed);

#ifdef __cplusplus
}
#endif

#endif /* VBU_VBU_H_ */
