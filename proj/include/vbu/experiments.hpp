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

// Seeded end-to-end reproduction runs: generate or ingest data, train,
// retrain the oracle, unlearn over a lambda grid, evaluate, and check the
// outcome against the expected qualitative and quantitative behaviour.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace vbu {

enum class ExperimentId {
  kBimodal,
  kGamma,
  kLinreg,
  kMoon,
  kBanknote,
  kFmnistFeatures,
  kSgprSynthetic,
};

std::string_view experiment_name(ExperimentId id);
// Throws kConfig for names outside the enumeration.
ExperimentId parse_experiment(std::string_view name);
std::span<const ExperimentId> all_experiments();

// Every key an experiment accepts, with its default value. Overrides may
// only use keys present here.
nlohmann::json default_experiment_config(ExperimentId id);

struct ExperimentOptions {
  std::uint64_t seed = 0;
  // Partial config merged over the defaults; a run manifest is accepted
  // too, in which case its recorded config is used.
  nlohmann::json config = nlohmann::json::object();
  std::function<void(std::string_view)> log;
};

struct Check {
  std::string name;
  int criterion = 0;
  bool passed = false;
  std::string detail;
};

struct ExperimentResult {
  ExperimentId id = ExperimentId::kBimodal;
  std::uint64_t seed = 0;
  nlohmann::json config;  // resolved
  std::vector<Check> checks;
  nlohmann::json summary;
  // Relative path -> file content. Contents depend only on the seed and
  // the config.
  std::map<std::string, std::string> artifacts;

  bool passed() const;
};

// Stage failures are rethrown as vbu::Error with the stage named.
ExperimentResult run_experiment(ExperimentId id, const ExperimentOptions& options = {});

// Writes every artifact below `dir`, creating subdirectories as needed.
void write_artifacts(const std::filesystem::path& dir, const ExperimentResult& result);

// 64-bit FNV-1a, printed as 16 hex digits; used for config hashes.
std::string content_hash(std::string_view bytes);

}  // namespace vbu
