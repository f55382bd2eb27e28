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

#include <algorithm>
#include <filesystem>
#include <functional>
#include <fstream>

#include "doctest.h"
#include "vbu/dataset.hpp"
#include "vbu/experiments.hpp"
#include "vbu/json_io.hpp"

using vbu::ExperimentId;
using vbu::ExperimentOptions;
using nlohmann::json;

namespace {

vbu::ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const vbu::Error& e) {
    return e.code();
  }
  FAIL("expected a vbu::Error");
  return vbu::ErrorCode::kInvalidArgument;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vbu_exp_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("experiment names form a closed set") {
  CHECK(vbu::all_experiments().size() == 7);
  for (ExperimentId id : vbu::all_experiments()) {
    CHECK(vbu::parse_experiment(vbu::experiment_name(id)) == id);
    const json d = vbu::default_experiment_config(id);
    for (const char* key : {"train", "unlearn", "lambdas", "methods", "n_samples", "family", "data"}) {
      CHECK(d.contains(key));
    }
  }
  CHECK(vbu::parse_experiment("fmnist-features") == ExperimentId::kFmnistFeatures);
  CHECK(code_of([] { vbu::parse_experiment("airline"); }) == vbu::ErrorCode::kConfig);
}

TEST_CASE("content hash is 64-bit FNV-1a") {
  CHECK(vbu::content_hash("") == "cbf29ce484222325");
  CHECK(vbu::content_hash("a") == "af63dc4c8601ec8c");
  CHECK(vbu::content_hash("foobar") == "85944171f73967e8");
}

TEST_CASE("experiment config overrides are validated before any work") {
  ExperimentOptions o;
  o.config = {{"lambda", {0.0}}};
  CHECK(code_of([&] { vbu::run_experiment(ExperimentId::kBimodal, o); }) == vbu::ErrorCode::kConfig);
  o.config = {{"data", {{"radius", 1.0}}}};
  CHECK(code_of([&] { vbu::run_experiment(ExperimentId::kMoon, o); }) == vbu::ErrorCode::kConfig);
  o.config = {{"lambdas", {1.5}}};
  CHECK(code_of([&] { vbu::run_experiment(ExperimentId::kLinreg, o); }) == vbu::ErrorCode::kConfig);
  o.config = {{"methods", {"fkl"}}};
  CHECK(code_of([&] { vbu::run_experiment(ExperimentId::kLinreg, o); }) == vbu::ErrorCode::kConfig);
  o.config = {{"train", {{"learning_rate", -1.0}}}};
  CHECK(code_of([&] { vbu::run_experiment(ExperimentId::kGamma, o); }) == vbu::ErrorCode::kConfig);
}

TEST_CASE("a failing stage is named") {
  ExperimentOptions o;
  o.config = {{"data", {{"path", "/nonexistent/banknote.csv"}}}};
  try {
    vbu::run_experiment(ExperimentId::kBanknote, o);
    FAIL("expected failure");
  } catch (const vbu::Error& e) {
    CHECK(e.code() == vbu::ErrorCode::kIo);
  }
  o.config = {{"data", {{"n_erased", 50}}}};
  try {
    vbu::run_experiment(ExperimentId::kLinreg, o);
    FAIL("expected failure");
  } catch (const vbu::Error& e) {
    CHECK(e.code() == vbu::ErrorCode::kConfig);
  }
  o.config = {{"train", {{"learning_rate", 1e12}, {"learning_rate_final", 0.0}, {"max_iters", 200}}}};
  try {
    vbu::run_experiment(ExperimentId::kLinreg, o);
    FAIL("expected divergence");
  } catch (const vbu::Error& e) {
    CHECK(e.code() == vbu::ErrorCode::kDiverged);
    CHECK(std::string(e.what()).find("stage 'train q_full'") != std::string::npos);
  }
}

TEST_CASE("bimodal reproduction: checks, artifacts and determinism") {
  ExperimentOptions o;
  o.seed = 4;
  const auto a = vbu::run_experiment(ExperimentId::kBimodal, o);
  CHECK(a.passed());
  CHECK(a.checks.size() == 8);
  for (const char* name : {"summary.json", "manifest.json", "q_full.json", "trace_full.csv",
                           "unlearned/eubo_lambda_0.json", "unlearned/rkl_lambda_1.json"}) {
    CHECK(a.artifacts.count(name) == 1);
  }
  const json summary = json::parse(a.artifacts.at("summary.json"));
  CHECK(summary.at("experiment") == "bimodal");
  CHECK(summary.at("passed") == true);
  const json manifest = json::parse(a.artifacts.at("manifest.json"));
  CHECK(manifest.at("config_hash") == vbu::content_hash(vbu::dump_json(a.config)));
  CHECK(manifest.at("artifacts").at("q_full.json") == vbu::content_hash(a.artifacts.at("q_full.json")));

  const auto b = vbu::run_experiment(ExperimentId::kBimodal, o);
  CHECK(a.artifacts == b.artifacts);

  // A manifest is a complete config: replaying it reproduces every byte.
  ExperimentOptions replay;
  replay.seed = 4;
  replay.config = manifest;
  CHECK(vbu::run_experiment(ExperimentId::kBimodal, replay).artifacts == a.artifacts);
  CHECK(code_of([&] { vbu::run_experiment(ExperimentId::kGamma, replay); }) == vbu::ErrorCode::kConfig);

  o.seed = 5;
  CHECK(vbu::run_experiment(ExperimentId::kBimodal, o).artifacts.at("q_full.json") !=
        a.artifacts.at("q_full.json"));

  const auto dir = scratch_dir("bimodal");
  vbu::write_artifacts(dir, a);
  CHECK(vbu::read_text_file(dir / "unlearned" / "eubo_lambda_0.json") ==
        a.artifacts.at("unlearned/eubo_lambda_0.json"));
}

TEST_CASE("classifier experiments ingest plain numeric tables") {
  const auto dir = scratch_dir("table");
  {
    std::ofstream out(dir / "bank.csv");
    out << "variance,skewness,class\n";
    vbu::RngStream rng(1);
    for (int i = 0; i < 40; ++i) {
      const int y = i % 2;
      out << (y ? 1.5 : -1.5) + rng.normal() << "," << 10.0 * rng.normal() << "," << y << "\n";
    }
  }
  ExperimentOptions o;
  o.seed = 2;
  o.config = {{"data", {{"path", (dir / "bank.csv").string()}, {"n_erased", 8}}},
              {"family", {{"family", "diag_gaussian"}}},
              {"lambdas", {1.0, 0.0}},
              {"train", {{"max_iters", 200}}},
              {"unlearn", {{"optimizer", {{"max_iters", 200}}}}}};
  const auto r = vbu::run_experiment(ExperimentId::kBanknote, o);
  const auto data = vbu::load_dataset_csv([&] {
    const auto p = dir / "data.csv";
    vbu::write_text_file(p, r.artifacts.at("data.csv"));
    return p;
  }());
  CHECK(data.size() == 40);
  CHECK(data.num_inputs() == 2);
  // Standardized columns.
  CHECK(std::abs(data.inputs().col(1).mean()) < 1e-12);
  CHECK(std::abs(data.inputs().col(1).squaredNorm() / 40.0 - 1.0) < 1e-12);
  CHECK(r.artifacts.at("erased_ids.csv").find('\n') != std::string::npos);
  CHECK(std::count(r.artifacts.at("erased_ids.csv").begin(), r.artifacts.at("erased_ids.csv").end(), '\n') == 9);
  CHECK(json::parse(r.artifacts.at("model.json")).at("num_inputs") == 2);
  CHECK(r.passed());
}
