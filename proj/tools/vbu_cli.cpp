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

// vbu: command-line front end over the C API.
//
//   vbu train     --config run.json --out DIR
//   vbu unlearn   --config run.json --posterior q.json --erased rows.csv --out DIR
//   vbu evaluate  --config run.json --reference r.json --candidate c.json --out DIR
//   vbu reproduce EXPERIMENT --seed N --out DIR
//
// Exit codes: 0 success, 1 failed check or internal error, 2 invalid
// configuration or input, 3 numerical divergence.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vbu/vbu.h"

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

constexpr int kExitFailed = 1;
constexpr int kExitInput = 2;
constexpr int kExitDiverged = 3;

struct Failure {
  int status;
  std::string message;
};

int exit_code(int status) {
  switch (status) {
    case VBU_OK: return 0;
    case VBU_ERR_DIVERGED: return kExitDiverged;
    case VBU_ERR_INVALID_ARGUMENT:
    case VBU_ERR_CONFIG:
    case VBU_ERR_IO:
    case VBU_ERR_PARSE:
    case VBU_ERR_DIMENSION_MISMATCH:
    case VBU_ERR_PARAMETER_CORRUPTION:
    case VBU_ERR_UNSUPPORTED:
    case VBU_ERR_UNKNOWN_ID: return kExitInput;
    default: return kExitFailed;
  }
}

void check(int status, const std::string& what) {
  if (status != VBU_OK) throw Failure{status, what + ": " + vbu_last_error()};
}

[[noreturn]] void config_error(const std::string& what) { throw Failure{VBU_ERR_CONFIG, what}; }

template <class T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using DatasetPtr = std::unique_ptr<vbu_dataset, Deleter<vbu_dataset, vbu_dataset_free>>;
using ModelPtr = std::unique_ptr<vbu_model, Deleter<vbu_model, vbu_model_free>>;
using PosteriorPtr = std::unique_ptr<vbu_posterior, Deleter<vbu_posterior, vbu_posterior_free>>;

std::string take(char* s) {
  std::string out = s ? s : "";
  vbu_string_free(s);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure{VBU_ERR_IO, "cannot read " + path};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string hash(const std::string& bytes) {
  char out[17];
  vbu_content_hash(bytes.data(), bytes.size(), out);
  return out;
}

Json parse(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw Failure{VBU_ERR_PARSE, what + ": " + e.what()};
  }
}

struct Global {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string out = ".";
  bool quiet = false;
};

// Reads --config; a manifest written by an earlier run of `command`
// contributes its recorded config and seed.
Json load_config(const Global& g, const std::string& command, std::optional<std::uint64_t>* seed) {
  if (g.config_path.empty()) return Json::object();
  Json j = parse(read_file(g.config_path), g.config_path);
  if (!j.is_object()) config_error(g.config_path + ": expected a JSON object");
  if (j.value("kind", "") == "vbu-manifest") {
    if (j.value("command", "") != command) config_error(g.config_path + ": manifest is for another command");
    if (!*seed && j.contains("seed")) *seed = j["seed"].get<std::uint64_t>();
    return j.value("config", Json::object());
  }
  return j;
}

void require_keys(const Json& j, std::initializer_list<const char*> known, const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) config_error(what + ": unknown key '" + it.key() + "'");
  }
}

std::string path_of(const Json& cfg, const char* key, bool required) {
  if (!cfg.contains(key) || cfg[key].is_null()) {
    if (required) config_error(std::string("config: missing '") + key + "'");
    return {};
  }
  if (!cfg[key].is_string()) config_error(std::string("config: '") + key + "' must be a path");
  return cfg[key].get<std::string>();
}

ModelPtr load_model(const Json& cfg) {
  if (!cfg.contains("model") || !cfg["model"].is_object()) config_error("config: missing 'model' object");
  vbu_model* m = nullptr;
  check(vbu_model_from_json(cfg["model"].dump().c_str(), &m), "model");
  return ModelPtr(m);
}

DatasetPtr load_dataset(const std::string& path) {
  vbu_dataset* d = nullptr;
  check(vbu_dataset_load_csv(path.c_str(), &d), path);
  return DatasetPtr(d);
}

PosteriorPtr load_posterior(const std::string& path) {
  vbu_posterior* p = nullptr;
  check(vbu_posterior_load(path.c_str(), &p), path);
  return PosteriorPtr(p);
}

std::vector<std::int64_t> load_ids(const std::string& path) {
  std::int64_t* ids = nullptr;
  std::size_t n = 0;
  check(vbu_ids_load_csv(path.c_str(), &ids, &n), path);
  std::vector<std::int64_t> out(ids, ids + n);
  vbu_ids_free(ids);
  return out;
}

Json inputs_json(const std::vector<std::pair<std::string, std::string>>& files) {
  Json j = Json::object();
  for (const auto& [role, path] : files) {
    if (!path.empty()) j[role] = {{"path", path}, {"hash", hash(read_file(path))}};
  }
  return j;
}

// Every output is computed before anything is written; each file goes
// through a temporary name and a rename.
void write_outputs(const std::string& dir, std::map<std::string, std::string> files, const std::string& command,
                   std::uint64_t seed, const Json& config, const Json& inputs, bool quiet) {
  Json outputs = Json::object();
  for (const auto& [name, content] : files) outputs[name] = hash(content);
  const std::string config_text = config.dump(2);
  Json manifest = {{"kind", "vbu-manifest"}, {"command", command},        {"version", vbu_version()},
                   {"seed", seed},           {"config", config},          {"config_hash", hash(config_text)},
                   {"inputs", inputs},       {"outputs", std::move(outputs)}};
  files["manifest.json"] = manifest.dump(2) + "\n";
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{VBU_ERR_IO, "cannot create " + dir};
  for (const auto& [name, content] : files) {
    const fs::path path = fs::path(dir) / name;
    const fs::path tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      out << content;
      if (!out) throw Failure{VBU_ERR_IO, "cannot write " + tmp.string()};
    }
    fs::rename(tmp, path, ec);
    if (ec) throw Failure{VBU_ERR_IO, "cannot rename into " + path.string()};
    if (!quiet) std::cout << "wrote " << path.string() << "\n";
  }
}

std::uint64_t apply_seed(Json& section, const std::optional<std::uint64_t>& seed) {
  if (!section.is_object()) section = Json::object();
  if (seed) section["seed"] = *seed;
  return section.value("seed", std::uint64_t{0});
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, ids, prior;
};

int cmd_train(const Global& g, const TrainArgs& a) {
  std::optional<std::uint64_t> seed = g.seed;
  Json cfg = load_config(g, "train", &seed);
  require_keys(cfg, {"model", "family", "prior", "train", "data", "ids"}, "train config");
  if (!a.data.empty()) cfg["data"] = a.data;
  if (!a.ids.empty()) cfg["ids"] = a.ids;
  if (!a.prior.empty()) cfg["prior"] = a.prior;
  const std::uint64_t s = apply_seed(cfg["train"], seed);
  if (!cfg.contains("family")) cfg["family"] = {{"family", "diag_gaussian"}};

  const ModelPtr model = load_model(cfg);
  const std::string data_path = path_of(cfg, "data", true);
  const std::string ids_path = path_of(cfg, "ids", false);
  const std::string prior_path = path_of(cfg, "prior", false);
  const DatasetPtr data = load_dataset(data_path);
  std::vector<std::int64_t> ids;
  if (!ids_path.empty()) ids = load_ids(ids_path);
  PosteriorPtr prior;
  if (!prior_path.empty()) prior = load_posterior(prior_path);
  const Json options = {{"family", cfg["family"]}, {"train", cfg["train"]}};

  vbu_posterior* post = nullptr;
  char* trace = nullptr;
  check(vbu_train(model.get(), data.get(), ids_path.empty() ? nullptr : ids.data(), ids.size(), prior.get(),
                  options.dump().c_str(), &post, &trace),
        "train");
  const PosteriorPtr result(post);
  const std::string trace_text = take(trace);
  char* json = nullptr;
  check(vbu_posterior_to_json(result.get(), &json), "serialize");
  write_outputs(g.out, {{"posterior.json", take(json)}, {"trace.csv", trace_text}}, "train", s, cfg,
                inputs_json({{"data", data_path}, {"ids", ids_path}, {"prior", prior_path}}), g.quiet);
  return 0;
}

struct UnlearnArgs {
  std::string posterior, erased, erased_ids;
};

// Inputs are q(theta | D) and the erased rows only: the config schema has
// no key and the command no flag for the remaining data.
int cmd_unlearn(const Global& g, const UnlearnArgs& a) {
  std::optional<std::uint64_t> seed = g.seed;
  Json cfg = load_config(g, "unlearn", &seed);
  require_keys(cfg, {"model", "family", "unlearn", "gp_pointwise", "posterior", "erased", "erased_ids"},
               "unlearn config");
  if (!a.posterior.empty()) cfg["posterior"] = a.posterior;
  if (!a.erased.empty()) cfg["erased"] = a.erased;
  if (!a.erased_ids.empty()) cfg["erased_ids"] = a.erased_ids;
  if (!cfg.contains("unlearn") || !cfg["unlearn"].is_object()) cfg["unlearn"] = Json::object();
  const std::uint64_t s = apply_seed(cfg["unlearn"]["optimizer"], seed);

  const ModelPtr model = load_model(cfg);
  const std::string post_path = path_of(cfg, "posterior", true);
  const std::string erased_path = path_of(cfg, "erased", true);
  const std::string ids_path = path_of(cfg, "erased_ids", false);
  const PosteriorPtr q_full = load_posterior(post_path);
  DatasetPtr erased = load_dataset(erased_path);
  if (!ids_path.empty()) {
    const auto ids = load_ids(ids_path);
    vbu_dataset* sub = nullptr;
    check(vbu_dataset_subset(erased.get(), ids.data(), ids.size(), &sub), "erased ids");
    erased.reset(sub);
  }
  Json options = {{"unlearn", cfg["unlearn"]}};
  if (cfg.contains("family")) options["family"] = cfg["family"];
  if (cfg.contains("gp_pointwise")) options["gp_pointwise"] = cfg["gp_pointwise"];

  vbu_posterior* post = nullptr;
  char* trace = nullptr;
  char* side = nullptr;
  check(vbu_unlearn(q_full.get(), model.get(), erased.get(), options.dump().c_str(), &post, &trace, &side),
        "unlearn");
  const PosteriorPtr result(post);
  const std::string trace_text = take(trace);
  const std::string side_text = take(side);
  char* json = nullptr;
  check(vbu_posterior_to_json(result.get(), &json), "serialize");
  write_outputs(g.out,
                {{"posterior.json", take(json)}, {"trace.csv", trace_text}, {"unlearn.json", side_text + "\n"}},
                "unlearn", s, cfg,
                inputs_json({{"posterior", post_path}, {"erased", erased_path}, {"erased_ids", ids_path}}),
                g.quiet);
  return 0;
}

struct EvaluateArgs {
  std::string data, erased_ids, reference, full;
  std::vector<std::string> candidates, labels;
  std::vector<double> lambdas;
  std::optional<std::size_t> n_samples;
};

int cmd_evaluate(const Global& g, const EvaluateArgs& a) {
  std::optional<std::uint64_t> seed = g.seed;
  Json cfg = load_config(g, "evaluate", &seed);
  require_keys(cfg, {"model", "data", "erased_ids", "reference", "full", "candidates", "n_samples", "seed"},
               "evaluate config");
  if (!a.data.empty()) cfg["data"] = a.data;
  if (!a.erased_ids.empty()) cfg["erased_ids"] = a.erased_ids;
  if (!a.reference.empty()) cfg["reference"] = a.reference;
  if (!a.full.empty()) cfg["full"] = a.full;
  if (a.n_samples) cfg["n_samples"] = *a.n_samples;
  if (!a.labels.empty() && a.labels.size() != a.candidates.size()) config_error("--label needs one per --candidate");
  if (!a.lambdas.empty() && a.lambdas.size() != a.candidates.size()) config_error("--lambda needs one per --candidate");
  if (!a.candidates.empty()) {
    cfg["candidates"] = Json::array();
    for (std::size_t i = 0; i < a.candidates.size(); ++i) {
      Json c = {{"path", a.candidates[i]}};
      if (!a.labels.empty()) c["label"] = a.labels[i];
      if (!a.lambdas.empty()) c["lambda"] = a.lambdas[i];
      cfg["candidates"].push_back(std::move(c));
    }
  }
  if (seed) cfg["seed"] = *seed;
  const std::uint64_t s = cfg.value("seed", std::uint64_t{0});
  cfg["seed"] = s;
  if (!cfg.contains("n_samples")) cfg["n_samples"] = 100;
  if (!cfg["n_samples"].is_number_integer() || cfg["n_samples"].get<long long>() < 1) {
    config_error("config: 'n_samples' must be a positive integer");
  }
  if (!cfg.contains("candidates")) cfg["candidates"] = Json::array();
  if (!cfg["candidates"].is_array()) config_error("config: 'candidates' must be an array");

  const ModelPtr model = load_model(cfg);
  const std::string data_path = path_of(cfg, "data", true);
  const std::string ids_path = path_of(cfg, "erased_ids", true);
  const std::string ref_path = path_of(cfg, "reference", true);
  const std::string full_path = path_of(cfg, "full", false);
  const DatasetPtr data = load_dataset(data_path);
  const auto erased = load_ids(ids_path);
  const PosteriorPtr reference = load_posterior(ref_path);
  PosteriorPtr full;
  if (!full_path.empty()) full = load_posterior(full_path);
  std::vector<PosteriorPtr> cands;
  std::vector<std::string> labels;
  std::vector<double> lambdas;
  std::vector<std::pair<std::string, std::string>> files = {
      {"data", data_path}, {"erased_ids", ids_path}, {"reference", ref_path}, {"full", full_path}};
  for (Json& c : cfg["candidates"]) {
    if (c.is_string()) c = Json{{"path", c}};
    if (!c.is_object()) config_error("config: candidates must be paths or objects");
    require_keys(c, {"path", "label", "lambda"}, "candidate");
    const std::string path = path_of(c, "path", true);
    cands.push_back(load_posterior(path));
    labels.push_back(c.value("label", "candidate"));
    lambdas.push_back(c.contains("lambda") && c["lambda"].is_number() ? c["lambda"].get<double>()
                                                                      : std::numeric_limits<double>::quiet_NaN());
    files.emplace_back("candidate" + std::to_string(cands.size() - 1), path);
  }
  if (cands.empty() && !full) config_error("evaluate: nothing to score (give --candidate or --full)");
  std::vector<const vbu_posterior*> cp;
  std::vector<const char*> lp;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    cp.push_back(cands[i].get());
    lp.push_back(labels[i].c_str());
  }
  char* rj = nullptr;
  char* rc = nullptr;
  check(vbu_evaluate(cp.data(), lp.data(), lambdas.data(), cp.size(), full.get(), reference.get(), model.get(),
                     data.get(), erased.data(), erased.size(), cfg["n_samples"].get<std::size_t>(), s, &rj, &rc),
        "evaluate");
  write_outputs(g.out, {{"report.json", take(rj) + "\n"}, {"report.csv", take(rc)}}, "evaluate", s, cfg,
                inputs_json(files), g.quiet);
  return 0;
}

int cmd_reproduce(const Global& g, const std::string& experiment) {
  std::string config;
  if (!g.config_path.empty()) config = read_file(g.config_path);
  std::uint64_t seed = g.seed.value_or(0);
  if (!g.seed && !config.empty()) {
    const Json j = parse(config, g.config_path);
    if (j.is_object() && j.value("kind", "") == "vbu-manifest" && j.contains("seed")) {
      seed = j["seed"].get<std::uint64_t>();
    }
  }
  const std::string out = g.out == "." ? "vbu-" + experiment + "-seed" + std::to_string(seed) : g.out;
  char* summary = nullptr;
  int passed = 0;
  check(vbu_reproduce(experiment.c_str(), seed, config.empty() ? nullptr : config.c_str(), out.c_str(),
                      g.quiet ? 1 : 0, &summary, &passed),
        "reproduce " + experiment);
  const Json s = parse(take(summary), "summary");
  for (const Json& c : s["checks"]) {
    std::cout << (c["passed"].get<bool>() ? "PASS" : "FAIL") << "  [criterion " << c["criterion"].get<int>()
              << "] " << c["name"].get<std::string>() << ": " << c["detail"].get<std::string>() << "\n";
  }
  std::cout << experiment << ": " << (passed ? "all checks passed" : "some checks FAILED") << " (artifacts in "
            << out << ")\n";
  return passed ? 0 : kExitFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational Bayesian unlearning: train, unlearn, evaluate and reproduce."};
  app.set_version_flag("--version", std::string(vbu_version()));
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Random seed for every stochastic stage");
  app.add_option("--config", g.config_path, "JSON config file (or a manifest.json from an earlier run)");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Fit q(theta | D) by maximizing the ELBO");
  train->add_option("--data", ta.data, "Dataset CSV (id,x0,...,y)");
  train->add_option("--ids", ta.ids, "Rows to train on (id CSV); default every row");
  train->add_option("--prior", ta.prior, "Prior posterior JSON; default the model's prior");

  UnlearnArgs ua;
  auto* unl = app.add_subcommand("unlearn", "Remove erased rows from a trained posterior");
  unl->add_option("--posterior", ua.posterior, "Posterior JSON trained on the full data");
  unl->add_option("--erased", ua.erased, "CSV holding exactly the erased rows");
  unl->add_option("--erased-ids", ua.erased_ids, "Subset of the erased file to remove (id CSV)");

  EvaluateArgs ea;
  std::size_t n_samples = 0;
  auto* ev = app.add_subcommand("evaluate", "Predictive-KL report against a retrained posterior");
  ev->add_option("--data", ea.data, "Dataset CSV");
  ev->add_option("--erased-ids", ea.erased_ids, "Erased ids (id CSV)");
  ev->add_option("--reference", ea.reference, "Retrained posterior JSON");
  ev->add_option("--candidate", ea.candidates, "Posterior JSON to score (repeatable)");
  ev->add_option("--label", ea.labels, "Method label per candidate");
  ev->add_option("--lambda", ea.lambdas, "Lambda per candidate");
  ev->add_option("--full", ea.full, "Untouched q(theta | D), reported as the baseline row");
  auto* ns = ev->add_option("--n-samples", n_samples, "Theta samples per predictive");

  std::string experiment;
  auto* rep = app.add_subcommand("reproduce", "Run a seeded end-to-end experiment and check its outcome");
  rep->add_option("experiment", experiment, "bimodal, gamma, linreg, moon, banknote, fmnist-features or sgpr-synthetic")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInput;
  }
  if (app.count("--seed") > 0) g.seed = seed;
  if (ns->count() > 0) ea.n_samples = n_samples;
  try {
    if (*train) return cmd_train(g, ta);
    if (*unl) return cmd_unlearn(g, ua);
    if (*ev) return cmd_evaluate(g, ea);
    if (*rep) return cmd_reproduce(g, experiment);
  } catch (const Failure& f) {
    std::cerr << "vbu: " << f.message << "\n";
    return exit_code(f.status);
  } catch (const Json::exception& e) {
    std::cerr << "vbu: config: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "vbu: " << e.what() << "\n";
    return kExitFailed;
  }
  return kExitFailed;
}
