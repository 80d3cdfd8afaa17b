/*
 * Copyright 2026 The elastic-hybrid Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "elastic/config.hpp"
#include "elastic/cost_model.hpp"
#include "elastic/errors.hpp"
#include "elastic/hash.hpp"
#include "elastic/importance.hpp"
#include "elastic/params.hpp"
#include "elastic/router.hpp"

namespace elastic {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is little-endian float32");

inline constexpr const char* kCheckpointMagic = "ELASTIC-CKPT";
inline constexpr int kCheckpointVersion = 1;

inline std::string config_hash(const ModelConfig& c) { return hex64(fnv1a(c.to_json().dump())); }

/// One trained budget: its target and the eval-mode sizes the router picks.
struct BudgetEntry {
  std::string label;
  double target = 0.0;
  SubnetSizes sizes;

  json to_json() const { return json{{"label", label}, {"target", target}, {"sizes", sizes.to_json()}}; }
  static BudgetEntry from_json(const json& j) {
    detail::check_keys(j, {"label", "target", "sizes"}, "budget");
    return {j.at("label").get<std::string>(), j.at("target").get<double>(), SubnetSizes::from_json(j.at("sizes"))};
  }
  bool operator==(const BudgetEntry&) const = default;
};

struct RouterState {
  RouterOptions options;
  ParamStore weights;
};

/// Model weights plus everything needed to route and slice them.
struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  std::optional<ImportanceReport> importance;
  std::optional<RouterState> router;
  std::vector<BudgetEntry> budgets;
  json metadata = json::object();

  const BudgetEntry& budget(const std::string& label) const {
    std::string known;
    for (const auto& b : budgets) {
      if (b.label == label) return b;
      known += (known.empty() ? "" : ", ") + b.label;
    }
    throw ConfigError("unknown budget '" + label + "' (available: " + (known.empty() ? "none" : known) + ")");
  }

  RouterBank router_bank() const {
    if (!router) throw ContractError("checkpoint has no router");
    return RouterBank::from_params(config, router->options, budgets.size(), router->weights);
  }
};

namespace detail {

inline json tensor_table(const ParamStore& p, std::size_t& offset) {
  json a = json::array();
  for (const auto& [name, t] : p.items()) {
    a.push_back(json{{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"hash", hex64(Fnv1a{}.update(t.data()).digest())}});
    offset += t.numel();
  }
  return a;
}

inline ParamStore read_tensors(const json& table, const std::vector<float>& payload, bool trainable) {
  ParamStore p;
  for (const auto& e : table) {
    detail::check_keys(e, {"name", "shape", "offset", "hash"}, "tensor entry");
    const Shape shape = e.at("shape").get<Shape>();
    const std::size_t off = e.at("offset").get<std::size_t>(), n = shape_numel(shape);
    if (off + n > payload.size()) throw FormatError("checkpoint tensor " + e.at("name").get<std::string>() + " exceeds payload");
    Tensor t(shape, std::vector<float>(payload.begin() + static_cast<std::ptrdiff_t>(off),
                                       payload.begin() + static_cast<std::ptrdiff_t>(off + n)));
    if (hex64(Fnv1a{}.update(t.data()).digest()) != e.at("hash").get<std::string>())
      throw FormatError("checkpoint tensor " + e.at("name").get<std::string>() + " fails its hash");
    if (trainable) t.set_requires_grad();
    p.add(e.at("name").get<std::string>(), t);
  }
  return p;
}

}  // namespace detail

/// Serialized bytes: magic and version line, manifest length line, JSON
/// manifest, newline, raw float32 payload.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::size_t offset = 0;
  json m;
  m["version"] = kCheckpointVersion;
  m["config"] = ck.config.to_json();
  m["config_hash"] = config_hash(ck.config);
  m["tensors"] = detail::tensor_table(ck.params, offset);
  if (ck.importance) m["importance"] = ck.importance->to_json();
  if (ck.router) {
    m["router"] = json{{"options", ck.router->options.to_json()}, {"tensors", detail::tensor_table(ck.router->weights, offset)}};
  }
  json b = json::array();
  for (const auto& e : ck.budgets) b.push_back(e.to_json());
  m["budgets"] = b;
  m["metadata"] = ck.metadata;
  const std::string manifest = m.dump();
  std::ostringstream os;
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n' << manifest.size() << '\n' << manifest << '\n';
  auto put = [&](const ParamStore& p) {
    for (const auto& [name, t] : p.items())
      os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.data().size_bytes()));
  };
  put(ck.params);
  if (ck.router) put(ck.router->weights);
  return os.str();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, bool trainable = false) {
  std::istringstream is(bytes);
  std::string magic;
  int version = 0;
  is >> magic >> version;
  if (magic != kCheckpointMagic) throw FormatError("not an elastic checkpoint");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " (expected " + std::to_string(kCheckpointVersion) + ")");
  std::size_t len = 0;
  is >> len;
  is.get();
  std::string manifest(len, '\0');
  if (!is.read(manifest.data(), static_cast<std::streamsize>(len)) || is.get() != '\n')
    throw FormatError("truncated checkpoint manifest");
  const std::size_t start = static_cast<std::size_t>(is.tellg());
  if ((bytes.size() - start) % sizeof(float)) throw FormatError("checkpoint payload is not whole float32 values");
  std::vector<float> payload((bytes.size() - start) / sizeof(float));
  std::memcpy(payload.data(), bytes.data() + start, payload.size() * sizeof(float));
  json m;
  try {
    m = json::parse(manifest);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  detail::check_keys(m, {"version", "config", "config_hash", "tensors", "importance", "router", "budgets", "metadata"},
                     "checkpoint");
  Checkpoint ck;
  ck.config = ModelConfig::from_json(m.at("config"));
  if (m.at("config_hash").get<std::string>() != config_hash(ck.config))
    throw FormatError("checkpoint config hash does not match its config");
  ck.params = detail::read_tensors(m.at("tensors"), payload, trainable);
  const auto expect = parameter_shapes(ck.config);
  if (expect.size() != ck.params.size()) throw FormatError("checkpoint tensors do not match the config");
  for (std::size_t i = 0; i < expect.size(); ++i)
    if (ck.params.items()[i].first != expect[i].first || ck.params.items()[i].second.shape() != expect[i].second)
      throw FormatError("checkpoint tensor " + ck.params.items()[i].first + " does not match the config");
  if (m.contains("importance")) ck.importance = ImportanceReport::from_json(m.at("importance"));
  for (const auto& e : m.at("budgets")) ck.budgets.push_back(BudgetEntry::from_json(e));
  if (m.contains("router")) {
    const auto& r = m.at("router");
    ck.router = RouterState{RouterOptions::from_json(r.at("options")), detail::read_tensors(r.at("tensors"), payload, false)};
  }
  ck.metadata = m.at("metadata");
  return ck;
}

/// Writes to a sibling temp file, then renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, bool trainable = false) {
  return deserialize_checkpoint(read_file(path), trainable);
}

/// Content hash of a checkpoint's serialized form.
inline std::string checkpoint_hash(const Checkpoint& ck) { return hex64(fnv1a(serialize_checkpoint(ck))); }

}  // namespace elastic
