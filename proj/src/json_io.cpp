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

#include "vbu/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace vbu {
namespace {

void write_number(std::string& out, double v) {
  require(std::isfinite(v), ErrorCode::kNumerical, "json: cannot write non-finite number");
  if (v == std::floor(v) && std::abs(v) < 1e15) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    out += buf;
    return;
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

void write_value(std::string& out, const Json& j, int indent, int depth) {
  const auto newline = [&](int d) {
    if (indent < 0) return;
    out += '\n';
    out.append(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (j.type()) {
    case Json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        out += Json(it.key()).dump();
        out += indent < 0 ? ":" : ": ";
        write_value(out, it.value(), indent, depth + 1);
      }
      newline(depth);
      out += '}';
      return;
    }
    case Json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      // Flat numeric arrays stay on one line.
      const bool flat = std::all_of(j.begin(), j.end(), [](const Json& e) {
        return e.is_number();
      });
      out += '[';
      bool first = true;
      for (const auto& e : j) {
        if (!first) out += ',';
        if (flat && !first && indent >= 0) out += ' ';
        first = false;
        if (!flat) newline(depth + 1);
        write_value(out, e, indent, depth + 1);
      }
      if (!flat) newline(depth);
      out += ']';
      return;
    }
    case Json::value_t::number_float:
      write_number(out, j.get<double>());
      return;
    default:
      out += j.dump();
      return;
  }
}

Json vector_json(const Vector& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(x);
  return a;
}

Vector vector_from(const Json& j, std::string_view key) {
  const auto it = j.find(key);
  require(it != j.end() && it->is_array(), ErrorCode::kParse,
          "posterior params: missing array '" + std::string(key) + "'");
  Vector v(static_cast<Eigen::Index>(it->size()));
  for (std::size_t i = 0; i < it->size(); ++i) {
    require((*it)[i].is_number(), ErrorCode::kParse, "posterior params: non-numeric entry");
    v[static_cast<Eigen::Index>(i)] = (*it)[i].get<double>();
  }
  return v;
}

}  // namespace

std::string dump_json(const Json& value, int indent) {
  std::string out;
  write_value(out, value, indent, 0);
  if (indent >= 0) out += '\n';
  return out;
}

Json parse_json(std::string_view text) {
  try {
    return Json::parse(text.begin(), text.end());
  } catch (const Json::exception& e) {
    fail(ErrorCode::kParse, std::string("json: ") + e.what());
  }
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write '" + path.string() + "'");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    require(static_cast<bool>(out), ErrorCode::kIo, "short write to '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Json posterior_to_json(const Posterior& post) {
  Json params = Json::object();
  switch (post.family()) {
    case Family::kDiagGaussian: {
      const auto& g = post.as<DiagGaussian>();
      params["mean"] = vector_json(g.mean);
      params["log_std"] = vector_json(g.log_std);
      break;
    }
    case Family::kFullGaussian: {
      const auto& g = post.as<FullGaussian>();
      params["mean"] = vector_json(g.mean);
      Json rows = Json::array();
      for (Eigen::Index i = 0; i < g.chol_lower.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index j = 0; j <= i; ++j) row.push_back(g.chol_lower(i, j));
        rows.push_back(std::move(row));
      }
      params["chol_lower"] = std::move(rows);
      break;
    }
    case Family::kGaussianMixture1D: {
      const auto& g = post.as<GaussianMixture1D>();
      params["weights"] = vector_json(g.weights);
      params["means"] = vector_json(g.means);
      params["stds"] = vector_json(g.stds);
      break;
    }
    case Family::kAutoregressiveFlow: {
      const auto& f = post.as<AutoregressiveFlow>();
      params["layers"] = f.shape.layers;
      params["hidden"] = f.shape.hidden;
      params["permutation"] = "reverse";
      Json w = Json::array();
      for (double x : f.params) w.push_back(x);
      params["weights"] = std::move(w);
      break;
    }
  }
  Json j = Json::object();
  j["family"] = std::string(family_name(post.family()));
  j["dim"] = post.dim();
  j["params"] = std::move(params);
  j["meta"] = {{"seed", post.meta.seed}, {"trainer", post.meta.trainer}};
  return j;
}

Posterior posterior_from_json(const Json& j) {
  require(j.is_object(), ErrorCode::kParse, "posterior: expected a JSON object");
  require(j.contains("family") && j["family"].is_string(), ErrorCode::kParse,
          "posterior: missing 'family'");
  require(j.contains("dim") && j["dim"].is_number_integer(), ErrorCode::kParse,
          "posterior: missing integer 'dim'");
  require(j.contains("params") && j["params"].is_object(), ErrorCode::kParse,
          "posterior: missing 'params'");
  const Family family = parse_family(j["family"].get<std::string>());
  const auto dim = j["dim"].get<std::int64_t>();
  require(dim >= 1, ErrorCode::kParse, "posterior: 'dim' must be positive");
  const Json& p = j["params"];
  PosteriorMeta meta;
  if (j.contains("meta") && j["meta"].is_object()) {
    meta.seed = static_cast<std::uint64_t>(json_int(j["meta"], "seed", 0));
    meta.trainer = json_string(j["meta"], "trainer", "");
  }
  const auto check_dim = [&](std::size_t got) {
    require(static_cast<std::int64_t>(got) == dim, ErrorCode::kDimensionMismatch,
            "posterior: 'dim' does not match parameters");
  };
  try {
    switch (family) {
      case Family::kDiagGaussian: {
        Posterior out(DiagGaussian{vector_from(p, "mean"), vector_from(p, "log_std")}, meta);
        check_dim(out.dim());
        return out;
      }
      case Family::kFullGaussian: {
        Vector mean = vector_from(p, "mean");
        const auto d = mean.size();
        require(p.contains("chol_lower") && p["chol_lower"].is_array() &&
                    static_cast<Eigen::Index>(p["chol_lower"].size()) == d,
                ErrorCode::kDimensionMismatch, "posterior: 'chol_lower' has wrong size");
        Matrix l = Matrix::Zero(d, d);
        for (Eigen::Index i = 0; i < d; ++i) {
          const Json& row = p["chol_lower"][static_cast<std::size_t>(i)];
          require(row.is_array() && static_cast<Eigen::Index>(row.size()) == i + 1,
                  ErrorCode::kDimensionMismatch, "posterior: ragged 'chol_lower' row");
          for (Eigen::Index k = 0; k <= i; ++k) l(i, k) = row[static_cast<std::size_t>(k)].get<double>();
        }
        Posterior out(FullGaussian{std::move(mean), std::move(l)}, meta);
        check_dim(out.dim());
        return out;
      }
      case Family::kGaussianMixture1D: {
        require(dim == 1, ErrorCode::kDimensionMismatch, "posterior: mixture must have dim 1");
        return Posterior(GaussianMixture1D{vector_from(p, "weights"), vector_from(p, "means"),
                                           vector_from(p, "stds")},
                         meta);
      }
      case Family::kAutoregressiveFlow: {
        AutoregressiveFlow f;
        f.shape.dim = static_cast<std::size_t>(dim);
        f.shape.layers = static_cast<std::size_t>(json_int(p, "layers", 3));
        f.shape.hidden = static_cast<std::size_t>(json_int(p, "hidden", 32));
        require(json_string(p, "permutation", "reverse") == "reverse", ErrorCode::kParse,
                "posterior: unsupported flow permutation");
        const Vector w = vector_from(p, "weights");
        f.params.assign(w.begin(), w.end());
        return Posterior(std::move(f), meta);
      }
    }
  } catch (const Json::exception& e) {
    fail(ErrorCode::kParse, std::string("posterior: ") + e.what());
  }
  fail(ErrorCode::kParse, "posterior: unknown family");
}

std::string serialize(const Posterior& post) { return dump_json(posterior_to_json(post)); }

Posterior deserialize(std::string_view text) { return posterior_from_json(parse_json(text)); }

Posterior load_posterior(const std::filesystem::path& path) {
  return deserialize(read_text_file(path));
}

void save_posterior(const std::filesystem::path& path, const Posterior& post) {
  write_text_file(path, serialize(post));
}

double json_number(const Json& j, std::string_view key) {
  const auto it = j.find(key);
  require(it != j.end() && it->is_number(), ErrorCode::kConfig,
          "config: missing numeric '" + std::string(key) + "'");
  return it->get<double>();
}

double json_number(const Json& j, std::string_view key, double fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  require(it->is_number(), ErrorCode::kConfig, "config: '" + std::string(key) + "' must be a number");
  return it->get<double>();
}

std::int64_t json_int(const Json& j, std::string_view key, std::int64_t fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  require(it->is_number_integer(), ErrorCode::kConfig,
          "config: '" + std::string(key) + "' must be an integer");
  return it->get<std::int64_t>();
}

std::string json_string(const Json& j, std::string_view key, std::string_view fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return std::string(fallback);
  require(it->is_string(), ErrorCode::kConfig, "config: '" + std::string(key) + "' must be a string");
  return it->get<std::string>();
}

bool json_bool(const Json& j, std::string_view key, bool fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  require(it->is_boolean(), ErrorCode::kConfig, "config: '" + std::string(key) + "' must be a boolean");
  return it->get<bool>();
}

void require_known_keys(const Json& j, std::initializer_list<std::string_view> known,
                        std::string_view context) {
  require(j.is_object(), ErrorCode::kConfig, std::string(context) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const bool ok = std::find(known.begin(), known.end(), std::string_view(it.key())) != known.end();
    require(ok, ErrorCode::kConfig, std::string(context) + ": unknown key '" + it.key() + "'");
  }
}

Json family_spec_to_json(const FamilySpec& spec) {
  Json j = {{"family", std::string(family_name(spec.family))}};
  if (spec.family == Family::kAutoregressiveFlow) {
    j["layers"] = spec.flow.layers;
    j["hidden"] = spec.flow.hidden;
  }
  return j;
}

FamilySpec family_spec_from_json(const Json& j, std::size_t dim) {
  FamilySpec spec;
  spec.dim = dim;
  if (j.is_string()) {
    spec.family = parse_family(j.get<std::string>());
  } else {
    require_known_keys(j, {"family", "layers", "hidden"}, "family");
    spec.family = parse_family(json_string(j, "family", "diag_gaussian"));
    spec.flow.layers = static_cast<std::size_t>(json_int(j, "layers", 3));
    spec.flow.hidden = static_cast<std::size_t>(json_int(j, "hidden", 32));
  }
  require(spec.family != Family::kGaussianMixture1D, ErrorCode::kConfig,
          "family: mixtures cannot be trained");
  require(spec.flow.layers >= 1 && spec.flow.hidden >= 1, ErrorCode::kConfig,
          "family: flow layers and hidden units must be positive");
  spec.flow.dim = dim;
  return spec;
}

}  // namespace vbu
