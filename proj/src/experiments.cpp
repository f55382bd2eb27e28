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

#include "vbu/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <sstream>

#include "vbu/json_io.hpp"
#include "vbu/metrics.hpp"

#ifndef VBU_VERSION
#define VBU_VERSION "0.0.0"
#endif

namespace vbu {
namespace {

using Json = nlohmann::json;

constexpr std::uint64_t kInducingStream = 9;
constexpr std::uint64_t kPartitionStream = 0x70617274;
constexpr std::uint64_t kEndpointStream = 0x656e6470;

constexpr ExperimentId kAll[] = {
    ExperimentId::kBimodal,  ExperimentId::kGamma,          ExperimentId::kLinreg,
    ExperimentId::kMoon,     ExperimentId::kBanknote,       ExperimentId::kFmnistFeatures,
    ExperimentId::kSgprSynthetic,
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string lambda_tag(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

TrainConfig schedule(std::size_t iters) {
  TrainConfig c;
  c.learning_rate = 0.01;
  c.learning_rate_final = 5e-4;
  c.max_iters = iters;
  return c;
}

Json base_config(const TrainConfig& train, const UnlearnConfig& unlearn, std::vector<double> lambdas,
                 Json family, Json data) {
  return Json{{"train", train_config_to_json(train)},
              {"unlearn", unlearn_config_to_json(unlearn)},
              {"lambdas", lambdas},
              {"methods", {"eubo", "rkl"}},
              {"n_samples", kDefaultPredictiveSamples},
              {"prior_std", nullptr},
              {"family", std::move(family)},
              {"data", std::move(data)}};
}

UnlearnConfig unlearn_defaults(const TrainConfig& train) {
  UnlearnConfig u;
  u.optimizer = train;
  return u;
}

Json family_json(Family f) { return family_spec_to_json(FamilySpec{f, 1, {}}); }

// Overrides may only name keys that exist in the defaults.
Json merge_config(const Json& base, const Json& over, const std::string& path) {
  require(over.is_object(), ErrorCode::kConfig, path + ": expected a JSON object");
  Json out = base;
  for (auto it = over.begin(); it != over.end(); ++it) {
    require(base.contains(it.key()), ErrorCode::kConfig,
            path + ": unknown key '" + it.key() + "'");
    const Json& b = base[it.key()];
    const bool nested = b.is_object() && it->is_object() && it.key() != "family";
    out[it.key()] = nested ? merge_config(b, *it, path + "." + it.key()) : *it;
  }
  return out;
}

struct Setup {
  ExperimentId id;
  std::uint64_t seed = 0;
  Json config;
  Json data;
  TrainConfig train;
  UnlearnConfig unlearn;
  std::vector<double> lambdas;
  std::vector<UnlearnMethod> methods;
  std::size_t n_samples = kDefaultPredictiveSamples;
  std::optional<double> prior_std;

  std::vector<FamilySpec> families(std::size_t dim) const {
    const Json& f = config["family"];
    std::vector<FamilySpec> out;
    if (f.is_array()) {
      require(!f.empty(), ErrorCode::kConfig, "family: empty list");
      for (const Json& e : f) out.push_back(family_spec_from_json(e, dim));
    } else {
      out.push_back(family_spec_from_json(f, dim));
    }
    return out;
  }
  Posterior prior(const Model& model) const {
    if (!prior_std) return default_prior(model);
    const auto d = static_cast<Eigen::Index>(param_dim(model));
    return make_diag_gaussian(Vector::Zero(d), Vector::Constant(d, *prior_std));
  }
};

Setup resolve(ExperimentId id, const ExperimentOptions& opt) {
  Json over = opt.config.is_null() ? Json::object() : opt.config;
  if (over.is_object() && over.value("kind", "") == "vbu-manifest") {
    require(over.contains("config"), ErrorCode::kConfig, "manifest: missing 'config'");
    require(over.value("experiment", "") == experiment_name(id), ErrorCode::kConfig,
            "manifest: recorded for a different experiment");
    over = over["config"];
  }
  Setup s;
  s.id = id;
  s.seed = opt.seed;
  s.config = merge_config(default_experiment_config(id), over, "config");
  s.train = train_config_from_json(s.config["train"]);
  s.train.seed = s.seed;
  s.train.validate();
  s.unlearn = unlearn_config_from_json(s.config["unlearn"]);
  s.unlearn.optimizer.seed = s.seed;
  s.unlearn.validate();
  const Json& lam = s.config["lambdas"];
  require(lam.is_array() && !lam.empty(), ErrorCode::kConfig, "lambdas: expected a non-empty array");
  for (const Json& l : lam) {
    require(l.is_number(), ErrorCode::kConfig, "lambdas: entries must be numbers");
    const double v = l.get<double>();
    require(v >= 0.0 && v <= 1.0, ErrorCode::kConfig, "lambdas: entries must lie in [0, 1]");
    s.lambdas.push_back(v);
  }
  const Json& meth = s.config["methods"];
  require(meth.is_array() && !meth.empty(), ErrorCode::kConfig, "methods: expected a non-empty array");
  for (const Json& m : meth) {
    require(m.is_string(), ErrorCode::kConfig, "methods: entries must be strings");
    s.methods.push_back(parse_method(m.get<std::string>()));
  }
  const Json& ns = s.config["n_samples"];
  require(ns.is_number_integer() && ns.get<std::int64_t>() >= 1, ErrorCode::kConfig,
          "n_samples: expected a positive integer");
  s.n_samples = ns.get<std::size_t>();
  const Json& ps = s.config["prior_std"];
  if (!ps.is_null()) {
    require(ps.is_number() && ps.get<double>() > 0.0, ErrorCode::kConfig,
            "prior_std: expected a positive number or null");
    s.prior_std = ps.get<double>();
  }
  s.data = s.config["data"];
  s.config["train"] = train_config_to_json(s.train);
  s.config["unlearn"] = unlearn_config_to_json(s.unlearn);
  return s;
}

double data_number(const Json& d, const char* key) { return json_number(d, key); }

std::size_t data_count(const Json& d, const char* key) {
  const std::int64_t v = json_int(d, key, -1);
  require(v >= 0, ErrorCode::kConfig, std::string("data: '") + key + "' must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

std::vector<double> data_vector(const Json& d, const char* key) {
  require(d.contains(key) && d[key].is_array(), ErrorCode::kConfig,
          std::string("data: '") + key + "' must be an array");
  std::vector<double> out;
  for (const Json& e : d[key]) {
    require(e.is_number(), ErrorCode::kConfig, std::string("data: '") + key + "' must hold numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

// Runs one named stage; failures are rethrown with the stage named.
template <class F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), "stage '" + name + "': " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kNumerical, "stage '" + name + "': " + e.what());
  }
}

std::string ids_csv(std::span<const RowId> ids) {
  std::string out = "id\n";
  for (RowId id : ids) out += std::to_string(id) + "\n";
  return out;
}

// Plain numeric table with the label in the last column, or the library's
// own id,x0,..,y format.
Dataset load_table(const std::string& path) {
  const std::string text = read_text_file(path);
  if (text.rfind("id,", 0) == 0) return load_dataset_csv(path);
  std::istringstream in(text);
  std::string line;
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream fields(line);
    std::string field;
    bool numeric = true;
    while (std::getline(fields, field, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(field, &used));
        numeric = numeric && used == field.size();
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (!numeric) {
      require(rows.empty() && line_no == 1, ErrorCode::kParse,
              path + ": non-numeric field on line " + std::to_string(line_no));
      continue;  // header
    }
    require(row.size() >= 2, ErrorCode::kParse, path + ": need at least one feature and a label");
    require(rows.empty() || row.size() == rows.front().size(), ErrorCode::kParse,
            path + ": wrong field count on line " + std::to_string(line_no));
    rows.push_back(std::move(row));
  }
  require(!rows.empty(), ErrorCode::kParse, path + ": no rows");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto p = static_cast<Eigen::Index>(rows.front().size() - 1);
  Matrix x(n, p);
  Vector y(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index k = 0; k < p; ++k) x(r, k) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
    y[r] = rows[static_cast<std::size_t>(r)].back();
  }
  return Dataset(std::move(x), std::move(y));
}

Dataset standardized(const Dataset& data) {
  Matrix x = data.inputs();
  for (Eigen::Index k = 0; k < x.cols(); ++k) {
    const double mean = x.col(k).mean();
    const double sd = std::sqrt((x.col(k).array() - mean).square().mean());
    x.col(k).array() -= mean;
    if (sd > 0.0) x.col(k) /= sd;
  }
  return Dataset(std::move(x), data.outputs(), data.ids());
}

// Seeded uniform draw of k ids, returned in dataset order.
std::vector<RowId> uniform_ids(const Dataset& data, std::size_t k, std::uint64_t seed,
                               std::uint64_t salt) {
  require(k >= 1 && k < data.size(), ErrorCode::kConfig,
          "data: erased count must be between 1 and the dataset size minus 1");
  RngStream rng = RngStream(seed, kPartitionStream).substream(salt);
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(rows.size() - i));
    std::swap(rows[i], rows[j]);
  }
  rows.resize(k);
  std::sort(rows.begin(), rows.end());
  std::vector<RowId> out;
  for (std::size_t r : rows) out.push_back(data.ids()[r]);
  return out;
}

const EvalRow* find_row(const EvalReport& rep, std::string_view method, std::optional<double> lambda) {
  for (const auto& r : rep.rows) {
    if (r.method == method && r.lambda == lambda) return &r;
  }
  return nullptr;
}

class Runner {
 public:
  explicit Runner(Setup s, const ExperimentOptions& opt) : s_(std::move(s)), log_(opt.log) {}

  const Setup& setup() const { return s_; }
  void log(const std::string& msg) const {
    if (log_) log_(msg);
  }
  void check(std::string name, int criterion, bool passed, std::string detail) {
    checks_.push_back({std::move(name), criterion, passed, std::move(detail)});
  }
  void artifact(const std::string& name, std::string content) { artifacts_[name] = std::move(content); }
  const std::string& artifact_text(const std::string& name) const { return artifacts_.at(name); }
  Json& results() { return results_; }

  FitResult train(const std::string& what, const Model& model, const Dataset& data,
                  std::span<const RowId> ids, const FamilySpec& family, const Posterior& prior) {
    log("training " + what + " (" + std::to_string(ids.size()) + " rows)");
    return stage("train " + what, [&] { return fit_elbo(model, data, ids, family, prior, s_.train); });
  }

  void save_dataset(const Dataset& data, const ErasePartition& part, const Model& model) {
    artifact("data.csv", dataset_csv(data));
    artifact("erased_ids.csv", ids_csv(part.erased_ids));
    artifact("erased_data.csv", dataset_csv(data.subset(part.erased_ids)));
    artifact("model.json", dump_json(model_to_json(model)));
  }

  // Trains q_full and the retrained oracle, sweeps the grid, writes the
  // report artifacts and the endpoint checks. `tag` suffixes file names.
  EvalReport sweep(const Model& model, const Dataset& data, const ErasePartition& part,
                   const FamilySpec& family, const std::string& tag, bool gp_pointwise = true) {
    const Posterior prior = s_.prior(model);
    const FitResult full = train("q_full" + tag, model, data, data.ids(), family, prior);
    const FitResult ref = train("retrain oracle" + tag, model, data, part.remaining_ids, family, prior);
    artifact("q_full" + tag + ".json", serialize(full.posterior));
    artifact("q_retrain" + tag + ".json", serialize(ref.posterior));
    artifact("trace_full" + tag + ".csv", trace_csv(full.trace));
    artifact("trace_retrain" + tag + ".csv", trace_csv(ref.trace));

    SweepConfig sc;
    sc.lambdas = s_.lambdas;
    sc.methods = s_.methods;
    sc.unlearn = s_.unlearn;
    sc.family = family;
    sc.gp_pointwise = gp_pointwise;
    sc.n_samples = s_.n_samples;
    sc.seed = s_.seed;
    sc.retrain = s_.train;
    sc.prior = prior;
    log("sweeping " + std::to_string(s_.lambdas.size()) + " lambdas x " +
        std::to_string(s_.methods.size()) + " methods" + tag);
    EvalReport rep = stage("unlearn sweep" + tag, [&] {
      return lambda_sweep(full.posterior, model, data, part, ref.posterior, sc);
    });
    artifact("sweep" + tag + ".csv", eval_report_csv(rep));
    artifact("sweep" + tag + ".json", dump_json(eval_report_to_json(rep)));
    for (const auto& row : rep.rows) {
      if (!row.lambda || !row.posterior) continue;
      const std::string stem = "unlearned" + tag + "/" + row.method + "_lambda_" + lambda_tag(*row.lambda);
      artifact(stem + ".json", serialize(*row.posterior));
      artifact(stem + "_trace.csv", trace_csv(row.trace));
    }
    endpoint_checks(rep, full.posterior, model, data, part, tag,
                    gp_pointwise && std::holds_alternative<SparseGPModel>(model));
    return rep;
  }

  void endpoint_checks(const EvalReport& rep, const Posterior& q_full, const Model& model,
                       const Dataset& data, const ErasePartition& part, const std::string& tag,
                       bool pointwise) {
    for (const auto& row : rep.rows) {
      if (row.lambda != 1.0) continue;
      double kl = std::numeric_limits<double>::infinity();
      if (row.posterior) {
        RngStream rng = RngStream(s_.seed, kEndpointStream).substream(1);
        kl = posterior_kl(*row.posterior, q_full, 4000, rng).value;
      }
      check(row.method + " lambda=1 leaves q_full unchanged" + tag, 5, kl < 1e-3,
            "KL[q_lambda=1 || q_full] = " + num(kl));
    }
    // lambda = 0: the adjusted likelihood must equal the plain one at every
    // point q_full can produce.
    RngStream rng = RngStream(s_.seed, kEndpointStream).substream(2);
    const Draws draws = sample(q_full, 1000, rng);
    const AdjustedThreshold zero(q_full, 0.0);
    std::size_t off = 0;
    const auto* gp = std::get_if<SparseGPModel>(&model);
    for (Eigen::Index i = 0; i < draws.theta.rows(); ++i) {
      const Vector th = draws.theta.row(i).transpose();
      if (!zero.active(as_span(th))) ++off;
      if (pointwise && gp != nullptr) {
        const std::size_t row = data.row_of(part.erased_ids[static_cast<std::size_t>(i) % part.erased_ids.size()]);
        const Vector x = data.inputs().row(static_cast<Eigen::Index>(row)).transpose();
        const GpRowFeatures feat = gp_features(*gp, as_span(x));
        const double fx = feat.a.dot(th) + std::sqrt(std::max(feat.c, 0.0)) * rng.normal();
        if (!gp_pointwise_indicator(*gp, q_full, as_span(x), as_span(th), fx, 0.0)) ++off;
      }
    }
    check("lambda=0 keeps the unadjusted likelihood" + tag, 5, off == 0,
          std::to_string(off) + " of 1000 draws from q_full switched off");
  }

  ExperimentResult finish() {
    ExperimentResult r;
    r.id = s_.id;
    r.seed = s_.seed;
    r.config = s_.config;
    r.checks = checks_;
    Json checks = Json::array();
    bool all = true;
    for (const auto& c : checks_) {
      checks.push_back({{"name", c.name}, {"criterion", c.criterion}, {"passed", c.passed}, {"detail", c.detail}});
      all = all && c.passed;
    }
    r.summary = {{"experiment", std::string(experiment_name(s_.id))},
                 {"seed", s_.seed},
                 {"passed", all},
                 {"checks", std::move(checks)},
                 {"results", results_}};
    artifacts_["summary.json"] = dump_json(r.summary);
    Json files = Json::object();
    for (const auto& [name, content] : artifacts_) files[name] = content_hash(content);
    const std::string config_text = dump_json(s_.config);
    const Json manifest = {
        {"kind", "vbu-manifest"},
        {"experiment", std::string(experiment_name(s_.id))},
        {"seed", s_.seed},
        {"version", VBU_VERSION},
        {"config", s_.config},
        {"config_hash", content_hash(config_text)},
        {"command", {"vbu", "reproduce", std::string(experiment_name(s_.id)), "--seed",
                     std::to_string(s_.seed), "--config", "manifest.json"}},
        {"artifacts", std::move(files)}};
    artifacts_["manifest.json"] = dump_json(manifest);
    r.artifacts = std::move(artifacts_);
    return r;
  }

 private:
  Setup s_;
  std::function<void(std::string_view)> log_;
  std::vector<Check> checks_;
  std::map<std::string, std::string> artifacts_;
  Json results_ = Json::object();
};

Json row_json(const EvalRow* r) {
  if (r == nullptr) return nullptr;
  const auto finite = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  return {{"erased_kl", finite(r->erased.mean)},
          {"remaining_kl", finite(r->remaining.mean)},
          {"param_kl", finite(r->param_kl.value)},
          {"diverged", r->diverged}};
}

void record_sweep(Runner& run, const EvalReport& rep, const std::string& key) {
  Json cells = Json::array();
  for (const auto& r : rep.rows) {
    Json c = row_json(&r);
    c["method"] = r.method;
    c["lambda"] = r.lambda ? Json(*r.lambda) : Json(nullptr);
    cells.push_back(std::move(c));
  }
  run.results()[key] = {{"information", rep.information ? Json(*rep.information) : Json(nullptr)},
                        {"cells", std::move(cells)}};
}

// ---------------------------------------------------------------------------

void run_bimodal(Runner& run) {
  const Setup& s = run.setup();
  const Model model = BimodalSyntheticModel{};
  const Dataset data(Matrix::Zero(1, 1), Vector::Zero(1));
  const FamilySpec family = s.families(1).front();
  const Posterior prior = s.prior(model);
  const FitResult full = run.train("q_full", model, data, data.ids(), family, prior);
  run.artifact("q_full.json", serialize(full.posterior));
  run.artifact("trace_full.csv", trace_csv(full.trace));
  run.artifact("model.json", dump_json(model_to_json(model)));

  // Mean and standard deviation of a 1-D posterior, by Monte Carlo unless
  // Gaussian.
  const auto moments = [&](const Posterior& q) -> std::pair<double, double> {
    if (q.is_gaussian()) return {gaussian_mean(q)[0], gaussian_factor(q)(0, 0)};
    RngStream rng = RngStream(s.seed, kEndpointStream).substream(3);
    const Draws d = sample(q, 20000, rng);
    const double m = d.theta.col(0).mean();
    return {m, std::sqrt((d.theta.col(0).array() - m).square().mean())};
  };
  const auto [fm, fs] = moments(full.posterior);
  run.results()["q_full"] = {{"mean", fm}, {"std", fs}};
  const auto near = [](double got, double want) { return std::abs(got - want) <= 0.05; };
  run.check("trained mean near 1.004", 1, near(fm, 1.004), "mean = " + num(fm));
  run.check("trained std near 1.390", 1, near(fs, 1.390), "std = " + num(fs));

  struct Target {
    UnlearnMethod method;
    double mean;
    double std;
  };
  const Target targets[] = {{UnlearnMethod::kEubo, 0.060, 1.000}, {UnlearnMethod::kRkl, 0.062, 1.018}};
  for (double lambda : s.lambdas) {
    for (UnlearnMethod m : s.methods) {
      UnlearnConfig c = s.unlearn;
      c.method = m;
      c.lambda = lambda;
      const std::string name(method_name(m));
      const std::string stem = "unlearned/" + name + "_lambda_" + lambda_tag(lambda);
      run.log("unlearning " + name + " lambda=" + lambda_tag(lambda));
      const UnlearnResult r =
          stage("unlearn " + name, [&] { return unlearn(full.posterior, model, data, data.ids(), family, c); });
      run.artifact(stem + ".json", serialize(r.posterior));
      run.artifact(stem + "_trace.csv", trace_csv(r.trace));
      const auto [um, us] = moments(r.posterior);
      run.results()[name + "_lambda_" + lambda_tag(lambda)] = {{"mean", um}, {"std", us}};
      if (lambda == 0.0) {
        for (const Target& t : targets) {
          if (t.method != m) continue;
          run.check(name + " lambda=0 mean near " + num(t.mean), 1, near(um, t.mean), "mean = " + num(um));
          run.check(name + " lambda=0 std near " + num(t.std), 1, near(us, t.std), "std = " + num(us));
        }
      }
      if (lambda == 1.0) {
        RngStream rng = RngStream(s.seed, kEndpointStream).substream(1);
        const double kl = posterior_kl(r.posterior, full.posterior, 4000, rng).value;
        run.check(name + " lambda=1 leaves q_full unchanged", 5, kl < 1e-3,
                  "KL[q_lambda=1 || q_full] = " + num(kl));
      }
    }
  }
}

void run_gamma(Runner& run) {
  const Setup& s = run.setup();
  const Json& d = s.data;
  const double rate = data_number(d, "rate");
  const Model model = GammaShapeModel{rate};
  const Dataset data = generate_gamma(data_count(d, "n"), data_number(d, "shape"), rate, s.seed);
  const std::size_t k = data_count(d, "n_erased");
  require(k >= 1 && k < data.size(), ErrorCode::kConfig, "data: n_erased out of range");
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), 0);
  std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
    return data.outputs()[static_cast<Eigen::Index>(a)] < data.outputs()[static_cast<Eigen::Index>(b)];
  });
  std::vector<RowId> erased;
  for (std::size_t i = 0; i < k; ++i) erased.push_back(data.ids()[rows[i]]);
  std::sort(erased.begin(), erased.end());
  const auto part = ErasePartition::from_erased(data, erased);
  run.save_dataset(data, part, model);
  const EvalReport rep = run.sweep(model, data, part, s.families(1).front(), "");
  record_sweep(run, rep, "sweep");
}

void run_linreg(Runner& run) {
  const Setup& s = run.setup();
  const Json& d = s.data;
  const auto coef = data_vector(d, "coefficients");
  require(coef.size() == 4, ErrorCode::kConfig, "data: 'coefficients' must hold four cubic coefficients");
  const double noise = data_number(d, "noise_std");
  const Model model = LinearRegressionModel{3, noise};
  const Dataset data = generate_cubic(data_count(d, "n"), coef, noise,
                                      {data_number(d, "lo"), data_number(d, "hi")}, s.seed);
  // D_e is the cluster of rows with the largest inputs.
  const std::size_t k = data_count(d, "n_erased");
  require(k >= 1 && k < data.size(), ErrorCode::kConfig, "data: n_erased out of range");
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), 0);
  std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
    return data.inputs()(static_cast<Eigen::Index>(a), 0) > data.inputs()(static_cast<Eigen::Index>(b), 0);
  });
  std::vector<RowId> erased;
  for (std::size_t i = 0; i < k; ++i) erased.push_back(data.ids()[rows[i]]);
  std::sort(erased.begin(), erased.end());
  const auto part = ErasePartition::from_erased(data, erased);
  run.save_dataset(data, part, model);
  const EvalReport rep = run.sweep(model, data, part, s.families(4).front(), "");
  record_sweep(run, rep, "sweep");

  const double base = rep.find("full", std::nullopt).param_kl.value;
  std::vector<double> grid;
  for (double l : s.lambdas) {
    if (l < 1.0) grid.push_back(l);
  }
  std::sort(grid.begin(), grid.end(), std::greater<>());
  const auto kl = [&](std::string_view m, double l) {
    const EvalRow* r = find_row(rep, m, l);
    return r ? r->param_kl.value : std::numeric_limits<double>::quiet_NaN();
  };

  std::string table = "lambda,eubo,rkl\nfull," + num(base) + "," + num(base) + "\n";
  for (double l : grid) table += lambda_tag(l) + "," + num(kl("eubo", l)) + "," + num(kl("rkl", l)) + "\n";
  run.artifact("kl_table.csv", table);

  bool decreasing = grid.size() >= 2;
  std::string trail;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    trail += (i ? " > " : "") + num(kl("rkl", grid[i]));
    if (i > 0 && !(kl("rkl", grid[i]) < kl("rkl", grid[i - 1]))) decreasing = false;
  }
  run.check("rkl KL to retrained decreases as lambda -> 0", 9, decreasing, trail);
  const bool has_zero = std::find(grid.begin(), grid.end(), 0.0) != grid.end();
  const double e0 = kl("eubo", 0.0);
  run.check("eubo lambda=0 at least 10x the baseline", 9, has_zero && e0 >= 10.0 * base,
            "eubo(0) = " + num(e0) + ", baseline = " + num(base));
  for (double l : grid) {
    if (l > 0.0) {
      run.check("eubo lambda=" + lambda_tag(l) + " below baseline", 9, kl("eubo", l) < base,
                num(kl("eubo", l)) + " vs " + num(base));
    }
    run.check("rkl lambda=" + lambda_tag(l) + " below baseline", 9, kl("rkl", l) < base,
              num(kl("rkl", l)) + " vs " + num(base));
  }
}

Model moon_model(const Setup& s, const Dataset& data) {
  const Json& d = s.data;
  RngStream rng(s.seed, kInducingStream);
  Matrix z = select_inducing_inputs(data.inputs(), data_count(d, "inducing"), rng);
  const auto ls = data_vector(d, "lengthscales");
  require(ls.size() == 2, ErrorCode::kConfig, "data: 'lengthscales' needs two entries");
  return SparseGPModel::create(std::move(z), Eigen::Map<const Vector>(ls.data(), 2),
                               data_number(d, "signal_var"), GpKind::kClassifier);
}

void run_moon(Runner& run) {
  const Setup& s = run.setup();
  const Json& d = s.data;
  const Dataset data = generate_moon(data_count(d, "n_per_class"), data_number(d, "noise_std"), s.seed);
  const Model model = moon_model(s, data);
  const auto centre = data_vector(d, "erase_center");
  require(centre.size() == 2, ErrorCode::kConfig, "data: 'erase_center' needs two entries");
  const double radius = data_number(d, "erase_radius");
  std::vector<RowId> erased;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double dx = data.inputs()(static_cast<Eigen::Index>(i), 0) - centre[0];
    const double dy = data.inputs()(static_cast<Eigen::Index>(i), 1) - centre[1];
    if (dx * dx + dy * dy < radius * radius) erased.push_back(data.ids()[i]);
  }
  require(!erased.empty() && erased.size() < data.size(), ErrorCode::kConfig,
          "data: the erase disc selects no rows or every row");
  const auto part = ErasePartition::from_erased(data, erased);
  run.save_dataset(data, part, model);
  const FamilySpec family = s.families(param_dim(model)).front();
  const EvalReport rep = run.sweep(model, data, part, family, "", json_bool(d, "gp_pointwise", false));
  record_sweep(run, rep, "sweep");

  const EvalRow& base = rep.find("full", std::nullopt);
  const auto cmp = [&](std::string_view m, double l, const std::string& label, bool below) {
    const EvalRow* r = find_row(rep, m, l);
    for (int set = 0; set < 2; ++set) {
      const char* set_name = set == 0 ? "erased" : "remaining";
      const double got = r ? (set == 0 ? r->erased.mean : r->remaining.mean) : std::nan("");
      const double ref = set == 0 ? base.erased.mean : base.remaining.mean;
      run.check(label + " below baseline on the " + set_name + " set", 8, below ? got < ref : got > ref,
                num(got) + " vs " + num(ref));
    }
  };
  cmp("eubo", 1e-9, "eubo lambda=1e-09", true);
  cmp("rkl", 0.0, "rkl lambda=0", true);
  {
    const EvalRow* r = find_row(rep, "eubo", 0.0);
    const double e = r ? r->erased.mean : std::nan("");
    const double m = r ? r->remaining.mean : std::nan("");
    run.check("eubo lambda=0 above baseline on at least one set", 8,
              e > base.erased.mean || m > base.remaining.mean,
              "erased " + num(e) + " vs " + num(base.erased.mean) + ", remaining " + num(m) + " vs " +
                  num(base.remaining.mean));
  }

  if (!json_bool(d, "scenarios", true)) return;
  // Erasure scenarios of increasing information: a uniform draw, then
  // growing parts of class 0 taken from its largest first coordinate, then
  // the whole class.
  const auto sizes = data_vector(d, "scenario_sizes");
  require(sizes.size() == 3, ErrorCode::kConfig, "data: 'scenario_sizes' needs three entries");
  std::vector<std::size_t> class0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.outputs()[static_cast<Eigen::Index>(i)] == 0.0) class0.push_back(i);
  }
  std::stable_sort(class0.begin(), class0.end(), [&](std::size_t a, std::size_t b) {
    return data.inputs()(static_cast<Eigen::Index>(a), 0) > data.inputs()(static_cast<Eigen::Index>(b), 0);
  });
  const auto largest = [&](std::size_t k) {
    require(k >= 1 && k <= class0.size(), ErrorCode::kConfig, "data: scenario size exceeds the class");
    std::vector<RowId> ids;
    for (std::size_t i = 0; i < k; ++i) ids.push_back(data.ids()[class0[i]]);
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  const std::pair<std::string, std::vector<RowId>> scenarios[] = {
      {"random", uniform_ids(data, static_cast<std::size_t>(sizes[0]), s.seed, 1)},
      {"partial", largest(static_cast<std::size_t>(sizes[1]))},
      {"large", largest(static_cast<std::size_t>(sizes[2]))},
      {"full_class", largest(class0.size())},
  };
  const Posterior prior = s.prior(model);
  const Posterior q_full = deserialize(run.artifact_text("q_full.json"));
  Json info = Json::array();
  std::vector<double> values;
  std::string csv = "scenario,erased,information,baseline_erased_kl,baseline_remaining_kl\n";
  for (const auto& [name, ids] : scenarios) {
    const auto p = ErasePartition::from_erased(data, ids);
    const FitResult ref = run.train("scenario " + name, model, data, p.remaining_ids, family, prior);
    RngStream rng = RngStream(s.seed, kEvalStream).substream(3);
    const double i_val = information_measure(ref.posterior, q_full, 2000, rng);
    const EvalRow row = evaluate_posterior(q_full, ref.posterior, model, data, p, s.n_samples, s.seed);
    values.push_back(i_val);
    csv += name + "," + std::to_string(ids.size()) + "," + num(i_val) + "," + num(row.erased.mean) + "," +
           num(row.remaining.mean) + "\n";
    run.artifact("scenarios/" + name + "_erased_ids.csv", ids_csv(ids));
    run.artifact("scenarios/" + name + "_q_retrain.json", serialize(ref.posterior));
    info.push_back({{"scenario", name}, {"erased", ids.size()}, {"information", i_val}});
  }
  run.artifact("scenarios.csv", csv);
  run.results()["scenarios"] = std::move(info);
  bool increasing = true;
  std::string trail;
  for (std::size_t i = 0; i < values.size(); ++i) {
    trail += (i ? " < " : "") + num(values[i]);
    if (i > 0 && !(values[i] > values[i - 1])) increasing = false;
  }
  run.check("information strictly increases from random to full-class erasure", 11, increasing, trail);
}

Dataset classification_data(const Setup& s, std::size_t p, std::size_t classes) {
  const Json& d = s.data;
  Dataset data;
  if (d.contains("path") && !d["path"].is_null()) {
    require(d["path"].is_string(), ErrorCode::kConfig, "data: 'path' must be a string");
    data = load_table(d["path"].get<std::string>());
  } else {
    data = generate_classification(data_count(d, "n"), p, classes, data_number(d, "separation"), s.seed);
  }
  if (json_bool(d, "standardize", true)) data = standardized(data);
  return data;
}

void run_classifier(Runner& run, std::size_t default_inputs, std::size_t default_classes) {
  const Setup& s = run.setup();
  const Json& d = s.data;
  Dataset data = classification_data(s, default_inputs, default_classes);
  std::size_t classes = 0;
  for (Eigen::Index i = 0; i < data.outputs().size(); ++i) {
    const double y = data.outputs()[i];
    require(y >= 0.0 && y == std::floor(y), ErrorCode::kConfig, "data: labels must be 0, 1, ...");
    classes = std::max(classes, static_cast<std::size_t>(y) + 1);
  }
  const Model model = LogisticRegressionModel{data.num_inputs(), std::max<std::size_t>(classes, 2)};
  validate_outputs(model, data);
  std::size_t k = data_count(d, "n_erased");
  const auto part = ErasePartition::from_erased(data, uniform_ids(data, k, s.seed, 0));
  run.save_dataset(data, part, model);
  const auto families = s.families(param_dim(model));
  for (const FamilySpec& f : families) {
    const std::string tag = families.size() > 1 ? "_" + std::string(family_name(f.family)) : "";
    const EvalReport rep = run.sweep(model, data, part, f, tag);
    record_sweep(run, rep, "sweep" + tag);
  }
}

void run_sgpr(Runner& run) {
  const Setup& s = run.setup();
  const Json& d = s.data;
  const double ell = data_number(d, "lengthscale");
  const double noise = data_number(d, "noise_std");
  const double sv = data_number(d, "signal_var");
  const Dataset data = generate_gp_regression(data_count(d, "n"), data_number(d, "lo"), data_number(d, "hi"),
                                              ell, sv, noise, s.seed);
  RngStream rng(s.seed, kInducingStream);
  Matrix z = select_inducing_inputs(data.inputs(), data_count(d, "inducing"), rng);
  const Model model = SparseGPModel::create(std::move(z), Vector::Constant(1, 1.0 / ell), sv,
                                            GpKind::kRegressor, noise);
  // Inputs are generated in increasing order, so consecutive rows form a
  // contiguous block of input space.
  const std::size_t start = data_count(d, "block_start");
  const std::size_t size = data_count(d, "block_size");
  require(size >= 1 && start + size <= data.size() && size < data.size(), ErrorCode::kConfig,
          "data: erased block out of range");
  std::vector<RowId> erased(data.ids().begin() + static_cast<std::ptrdiff_t>(start),
                            data.ids().begin() + static_cast<std::ptrdiff_t>(start + size));
  const auto part = ErasePartition::from_erased(data, erased);
  run.save_dataset(data, part, model);
  const EvalReport rep = run.sweep(model, data, part, s.families(param_dim(model)).front(), "",
                                   json_bool(d, "gp_pointwise", true));
  record_sweep(run, rep, "sweep");

  const double base = rep.find("full", std::nullopt).param_kl.value;
  std::vector<double> grid;
  for (double l : s.lambdas) {
    if (l < 1.0) grid.push_back(l);
  }
  std::sort(grid.begin(), grid.end(), std::greater<>());
  std::string header = "method";
  for (double l : grid) header += ",lambda=" + lambda_tag(l);
  std::string table = header + "\n";
  bool eubo_any = false;
  std::string eubo_trail;
  for (auto m : s.methods) {
    const std::string name(method_name(m));
    table += name;
    for (double l : grid) {
      const EvalRow* r = find_row(rep, name, l);
      const double v = r ? r->param_kl.value : std::nan("");
      table += "," + num(v);
      if (name == "eubo" && l > 0.0) {
        eubo_any = eubo_any || v < base;
        eubo_trail += (eubo_trail.empty() ? "" : ", ") + num(v);
      }
      if (name == "rkl") {
        run.check("rkl lambda=" + lambda_tag(l) + " below baseline", 10, v < base,
                  num(v) + " vs " + num(base));
      }
    }
    table += "\n";
  }
  table += "full";
  for (std::size_t i = 0; i < grid.size(); ++i) table += "," + num(base);
  table += "\n";
  run.artifact("kl_table.csv", table);
  run.check("eubo below baseline at some nonzero lambda", 10, eubo_any,
            "eubo: " + eubo_trail + "; baseline " + num(base));
}

}  // namespace

std::string_view experiment_name(ExperimentId id) {
  switch (id) {
    case ExperimentId::kBimodal: return "bimodal";
    case ExperimentId::kGamma: return "gamma";
    case ExperimentId::kLinreg: return "linreg";
    case ExperimentId::kMoon: return "moon";
    case ExperimentId::kBanknote: return "banknote";
    case ExperimentId::kFmnistFeatures: return "fmnist-features";
    case ExperimentId::kSgprSynthetic: return "sgpr-synthetic";
  }
  return "unknown";
}

ExperimentId parse_experiment(std::string_view name) {
  for (ExperimentId id : kAll) {
    if (experiment_name(id) == name) return id;
  }
  fail(ErrorCode::kConfig, "unknown experiment '" + std::string(name) + "'");
}

std::span<const ExperimentId> all_experiments() { return kAll; }

Json default_experiment_config(ExperimentId id) {
  const TrainConfig train = schedule(3000);
  const Json diag = family_json(Family::kDiagGaussian);
  const Json full = family_json(Family::kFullGaussian);
  switch (id) {
    case ExperimentId::kBimodal:
      return base_config(train, unlearn_defaults(train), {1.0, 0.0}, diag, Json::object());
    case ExperimentId::kGamma:
      return base_config(train, unlearn_defaults(train), {1.0, 0.1, 1e-3, 1e-5, 0.0}, diag,
                         {{"n", 20}, {"shape", 3.0}, {"rate", 1.0}, {"n_erased", 5}});
    case ExperimentId::kLinreg:
      return base_config(train, unlearn_defaults(train), {1.0, 0.5, 0.1, 0.0}, diag,
                         {{"n", 50},
                          {"coefficients", {2.0, -3.0, 1.0, 0.0}},
                          {"noise_std", 0.05},
                          {"lo", -1.0},
                          {"hi", 1.0},
                          {"n_erased", 10}});
    case ExperimentId::kMoon:
      return base_config(train, unlearn_defaults(train), {1.0, 1e-5, 1e-9, 1e-20, 0.0}, full,
                         {{"n_per_class", 50},
                          {"noise_std", 0.1},
                          {"inducing", 20},
                          {"lengthscales", {1.56, 1.35}},
                          {"signal_var", 4.74},
                          {"erase_center", {1.0, 0.1}},
                          {"erase_radius", 0.45},
                          {"gp_pointwise", false},
                          {"scenarios", true},
                          {"scenario_sizes", {20, 30, 40}}});
    case ExperimentId::kBanknote: {
      Json flow = family_spec_to_json(FamilySpec{Family::kAutoregressiveFlow, 1, {1, 32, 3}});
      return base_config(train, unlearn_defaults(train), {1.0, 1e-5, 1e-9, 1e-20, 0.0},
                         Json::array({full, flow}),
                         {{"path", nullptr},
                          {"n", 1372},
                          {"n_erased", 412},
                          {"separation", 1.0},
                          {"standardize", true}});
    }
    case ExperimentId::kFmnistFeatures: {
      TrainConfig t = schedule(2000);
      t.mc_samples = 8;
      t.minibatch = 256;
      UnlearnConfig u = unlearn_defaults(t);
      u.optimizer.minibatch = 128;
      Json c = base_config(t, u, {1.0, 1e-5, 1e-9, 1e-20, 0.0}, diag,
                           {{"path", nullptr},
                            {"n", 3000},
                            {"n_erased", 500},
                            {"separation", 1.0},
                            {"standardize", true}});
      c["prior_std"] = std::sqrt(10.0);
      return c;
    }
    case ExperimentId::kSgprSynthetic: {
      UnlearnConfig u = unlearn_defaults(train);
      u.optimizer.minibatch = 50;
      return base_config(train, u, {1.0, 1e-11, 1e-13, 1e-20, 0.0}, full,
                         {{"n", 10000},
                          {"lo", 0.0},
                          {"hi", 10.0},
                          {"lengthscale", 1.0},
                          {"signal_var", 1.0},
                          {"noise_std", 0.3},
                          {"inducing", 20},
                          {"block_start", 6000},
                          {"block_size", 500},
                          {"gp_pointwise", true}});
    }
  }
  fail(ErrorCode::kConfig, "unknown experiment");
}

bool ExperimentResult::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

ExperimentResult run_experiment(ExperimentId id, const ExperimentOptions& options) {
  Runner run(stage("config", [&] { return resolve(id, options); }), options);
  switch (id) {
    case ExperimentId::kBimodal: run_bimodal(run); break;
    case ExperimentId::kGamma: run_gamma(run); break;
    case ExperimentId::kLinreg: run_linreg(run); break;
    case ExperimentId::kMoon: run_moon(run); break;
    case ExperimentId::kBanknote: run_classifier(run, 4, 2); break;
    case ExperimentId::kFmnistFeatures: run_classifier(run, 64, 10); break;
    case ExperimentId::kSgprSynthetic: run_sgpr(run); break;
  }
  return run.finish();
}

void write_artifacts(const std::filesystem::path& dir, const ExperimentResult& result) {
  for (const auto& [name, content] : result.artifacts) {
    const std::filesystem::path path = dir / name;
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    require(!ec, ErrorCode::kIo, "cannot create directory " + path.parent_path().string());
    write_text_file(path, content);
  }
}

std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vbu
