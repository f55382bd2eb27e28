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

#include "vbu/dataset.hpp"

#include <charconv>
#include <cmath>
#include <sstream>
#include <string>

#include "vbu/json_io.hpp"

namespace vbu {
namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
  }
  return out;
}

double parse_double(std::string_view field, std::size_t line_no) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  require(ec == std::errc() && ptr == field.data() + field.size() && std::isfinite(v),
          ErrorCode::kParse,
          "csv line " + std::to_string(line_no) + ": bad number '" + std::string(field) + "'");
  return v;
}

RowId parse_id(std::string_view field, std::size_t line_no) {
  RowId v = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  require(ec == std::errc() && ptr == field.data() + field.size(), ErrorCode::kParse,
          "csv line " + std::to_string(line_no) + ": bad id '" + std::string(field) + "'");
  return v;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void append_number(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

}  // namespace

Dataset::Dataset(Matrix inputs, Vector outputs, std::vector<RowId> ids)
    : inputs_(std::move(inputs)), outputs_(std::move(outputs)), ids_(std::move(ids)) {
  const auto n = static_cast<std::size_t>(inputs_.rows());
  require(static_cast<std::size_t>(outputs_.size()) == n, ErrorCode::kDimensionMismatch,
          "dataset: inputs and outputs differ in length");
  if (ids_.empty()) {
    ids_.resize(n);
    for (std::size_t i = 0; i < n; ++i) ids_[i] = static_cast<RowId>(i);
  }
  require(ids_.size() == n, ErrorCode::kDimensionMismatch, "dataset: ids differ in length");
  require(inputs_.allFinite() && outputs_.allFinite(), ErrorCode::kParse,
          "dataset: non-finite entries");
  index_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    require(index_.emplace(ids_[i], i).second, ErrorCode::kParse,
            "dataset: duplicate id " + std::to_string(ids_[i]));
  }
}

std::size_t Dataset::row_of(RowId id) const {
  const auto it = index_.find(id);
  require(it != index_.end(), ErrorCode::kUnknownId, "unknown row id " + std::to_string(id));
  return it->second;
}

std::vector<std::size_t> Dataset::rows_of(std::span<const RowId> ids) const {
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (RowId id : ids) rows.push_back(row_of(id));
  return rows;
}

Dataset Dataset::subset(std::span<const RowId> ids) const {
  const auto rows = rows_of(ids);
  Matrix in(static_cast<Eigen::Index>(rows.size()), inputs_.cols());
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    in.row(static_cast<Eigen::Index>(k)) = inputs_.row(static_cast<Eigen::Index>(rows[k]));
    out[static_cast<Eigen::Index>(k)] = outputs_[static_cast<Eigen::Index>(rows[k])];
  }
  return Dataset(std::move(in), std::move(out), std::vector<RowId>(ids.begin(), ids.end()));
}

ErasePartition ErasePartition::from_erased(const Dataset& data, std::span<const RowId> erased) {
  ErasePartition p;
  std::unordered_map<RowId, bool> seen;
  for (RowId id : erased) {
    data.row_of(id);
    require(seen.emplace(id, true).second, ErrorCode::kInvalidArgument,
            "erase partition: duplicate id " + std::to_string(id));
    p.erased_ids.push_back(id);
  }
  for (RowId id : data.ids()) {
    if (!seen.count(id)) p.remaining_ids.push_back(id);
  }
  return p;
}

Dataset load_dataset_csv(const std::filesystem::path& path) {
  const auto lines = lines_of(read_text_file(path));
  require(!lines.empty(), ErrorCode::kParse, "dataset csv: empty file");
  const auto header = split_fields(lines[0]);
  require(header.size() >= 2 && header.front() == "id" && header.back() == "y", ErrorCode::kParse,
          "dataset csv: header must be id,x0,...,y");
  const std::size_t p = header.size() - 2;
  for (std::size_t k = 0; k < p; ++k) {
    require(header[k + 1] == "x" + std::to_string(k), ErrorCode::kParse,
            "dataset csv: unexpected column '" + std::string(header[k + 1]) + "'");
  }
  const std::size_t n = lines.size() - 1;
  require(n >= 1, ErrorCode::kParse, "dataset csv: no rows");
  Matrix in(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  Vector out(static_cast<Eigen::Index>(n));
  std::vector<RowId> ids(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto fields = split_fields(lines[r + 1]);
    require(fields.size() == p + 2, ErrorCode::kParse,
            "dataset csv line " + std::to_string(r + 2) + ": wrong field count");
    ids[r] = parse_id(fields[0], r + 2);
    for (std::size_t k = 0; k < p; ++k) {
      in(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = parse_double(fields[k + 1], r + 2);
    }
    out[static_cast<Eigen::Index>(r)] = parse_double(fields[p + 1], r + 2);
  }
  return Dataset(std::move(in), std::move(out), std::move(ids));
}

std::string dataset_csv(const Dataset& data) {
  std::string out = "id";
  for (std::size_t k = 0; k < data.num_inputs(); ++k) out += ",x" + std::to_string(k);
  out += ",y\n";
  for (std::size_t r = 0; r < data.size(); ++r) {
    out += std::to_string(data.ids()[r]);
    for (std::size_t k = 0; k < data.num_inputs(); ++k) {
      out += ',';
      append_number(out, data.inputs()(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)));
    }
    out += ',';
    append_number(out, data.outputs()[static_cast<Eigen::Index>(r)]);
    out += '\n';
  }
  return out;
}

void save_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  write_text_file(path, dataset_csv(data));
}

std::vector<RowId> load_ids_csv(const std::filesystem::path& path) {
  const auto lines = lines_of(read_text_file(path));
  require(!lines.empty() && split_fields(lines[0]).front() == "id", ErrorCode::kParse,
          "id csv: header must start with 'id'");
  std::vector<RowId> ids;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    ids.push_back(parse_id(split_fields(lines[r]).front(), r + 1));
  }
  return ids;
}

void save_ids_csv(const std::filesystem::path& path, std::span<const RowId> ids) {
  std::string out = "id\n";
  for (RowId id : ids) out += std::to_string(id) + "\n";
  write_text_file(path, out);
}

}  // namespace vbu
