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

// JSON and file helpers shared by every on-disk format.

#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "vbu/distributions.hpp"

namespace vbu {

using Json = nlohmann::json;

// Deterministic dump: object keys sorted, every double written with 17
// significant digits.
std::string dump_json(const Json& value, int indent = 2);
Json parse_json(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);
// Writes through a temporary file and a rename, so readers never observe a
// partially written file.
void write_text_file(const std::filesystem::path& path, std::string_view text);

Json posterior_to_json(const Posterior& post);
Posterior posterior_from_json(const Json& j);
std::string serialize(const Posterior& post);
Posterior deserialize(std::string_view text);

Posterior load_posterior(const std::filesystem::path& path);
void save_posterior(const std::filesystem::path& path, const Posterior& post);

// Typed accessors that report a configuration error naming the key.
double json_number(const Json& j, std::string_view key);
double json_number(const Json& j, std::string_view key, double fallback);
std::int64_t json_int(const Json& j, std::string_view key, std::int64_t fallback);
std::string json_string(const Json& j, std::string_view key, std::string_view fallback);
bool json_bool(const Json& j, std::string_view key, bool fallback);

// Throws kConfig naming the first key of `j` not in `known`.
void require_known_keys(const Json& j, std::initializer_list<std::string_view> known,
                        std::string_view context);

// {"family": name} plus "layers" and "hidden" for flows. The dimension
// comes from the model, not the file.
Json family_spec_to_json(const FamilySpec& spec);
FamilySpec family_spec_from_json(const Json& j, std::size_t dim);

}  // namespace vbu
