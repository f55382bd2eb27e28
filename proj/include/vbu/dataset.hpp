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

#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

#include "vbu/distributions.hpp"

namespace vbu {

using RowId = std::int64_t;

// Rows of (input, output) pairs with stable identifiers.
class Dataset {
 public:
  Dataset() = default;
  // Ids default to 0..n-1. Throws on duplicates or inconsistent sizes.
  Dataset(Matrix inputs, Vector outputs, std::vector<RowId> ids = {});

  std::size_t size() const { return ids_.size(); }
  std::size_t num_inputs() const { return static_cast<std::size_t>(inputs_.cols()); }
  const Matrix& inputs() const { return inputs_; }
  const Vector& outputs() const { return outputs_; }
  const std::vector<RowId>& ids() const { return ids_; }

  bool contains(RowId id) const { return index_.count(id) != 0; }
  // Row position of an id; throws kUnknownId.
  std::size_t row_of(RowId id) const;
  std::vector<std::size_t> rows_of(std::span<const RowId> ids) const;
  Dataset subset(std::span<const RowId> ids) const;

 private:
  Matrix inputs_;
  Vector outputs_;
  std::vector<RowId> ids_;
  std::unordered_map<RowId, std::size_t> index_;
};

// Disjoint split of a dataset into erased and remaining rows.
struct ErasePartition {
  std::vector<RowId> erased_ids;
  std::vector<RowId> remaining_ids;

  // Remaining ids are every dataset id not erased, in dataset order.
  static ErasePartition from_erased(const Dataset& data, std::span<const RowId> erased);
};

Dataset load_dataset_csv(const std::filesystem::path& path);
void save_dataset_csv(const std::filesystem::path& path, const Dataset& data);
std::string dataset_csv(const Dataset& data);

// Single-column CSV with header `id`.
std::vector<RowId> load_ids_csv(const std::filesystem::path& path);
void save_ids_csv(const std::filesystem::path& path, std::span<const RowId> ids);

}  // namespace vbu
