// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "psb/errors.hpp"
#include "psb/optim.hpp"
#include "psb/synthdata.hpp"
#include "psb/tape.hpp"

namespace psb {

// A checkpoint is a directory holding manifest.json and params.bin. The
// manifest lists every entry (name, shape, offset in scalars) along with
// the run config, the optimizer step and a format version. params.bin is
// the concatenation of all entries as little-endian f64. Optimizer moments
// are stored as entries named "adam.m/<param>" and "adam.v/<param>".

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json config;
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::map<std::string, Tensor<double>> entries;
};

template <class Real>
Checkpoint make_checkpoint(const nlohmann::json& config, const ParamStore<Real>& store,
                           const AdamState* adam) {
  Checkpoint ck;
  ck.config = config;
  ck.step = adam ? adam->step : 0;
  auto put = [&](const std::string& name, Tensor<double> t) {
    ck.names.push_back(name);
    ck.entries.emplace(name, std::move(t));
  };
  std::size_t i = 0;
  for (const auto& p : store) {
    put(p.name, p.value.template cast<double>());
    if (adam && adam->m.size() == store.size()) {
      put("adam.m/" + p.name, Tensor<double>(p.value.shape(), adam->m[i]));
      put("adam.v/" + p.name, Tensor<double>(p.value.shape(), adam->v[i]));
    }
    ++i;
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["config"] = ck.config;
  manifest["step"] = ck.step;
  auto entries = nlohmann::json::array();
  std::string blob;
  std::size_t offset = 0;
  for (const auto& name : ck.names) {
    const auto& t = ck.entries.at(name);
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    for (double v : t.data()) detail::put_le<double>(blob, v);
    offset += t.size();
  }
  manifest["entries"] = entries;
  manifest["scalars"] = offset;
  {
    std::ofstream f(dir / "params.bin", std::ios::binary | std::ios::trunc);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("checkpoint: cannot write " + (dir / "params.bin").string());
  }
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  f << manifest.dump(2) << "\n";
  if (!f) throw std::runtime_error("checkpoint: cannot write " + (dir / "manifest.json").string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file((dir / "manifest.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointMismatch(std::string("checkpoint: bad manifest: ") + e.what());
  } catch (const std::runtime_error& e) {
    throw CheckpointMismatch(std::string("checkpoint: ") + e.what());
  }
  if (manifest.value("format_version", -1) != kCheckpointVersion) {
    throw CheckpointMismatch("checkpoint: unsupported format_version");
  }
  Checkpoint ck;
  if (!manifest.contains("config") || !manifest.contains("step") || !manifest.contains("entries")) {
    throw CheckpointMismatch("checkpoint: manifest lacks config, step or entries");
  }
  ck.config = manifest["config"];
  ck.step = manifest["step"].get<std::uint64_t>();
  try {
    detail::Reader in(read_file((dir / "params.bin").string()));
    for (const auto& e : manifest.at("entries")) {
      const auto name = e.at("name").get<std::string>();
      Tensor<double> t(e.at("shape").get<Shape>());
      for (auto& v : t.data()) v = in.get<double>("checkpoint payload");
      ck.names.push_back(name);
      ck.entries.emplace(name, std::move(t));
    }
    if (in.remaining() != 0) throw CheckpointMismatch("checkpoint: trailing bytes in params.bin");
  } catch (const FormatError&) {
    throw CheckpointMismatch("checkpoint: params.bin is shorter than the manifest says");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointMismatch(std::string("checkpoint: bad manifest entry: ") + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointMismatch(std::string("checkpoint: bad entry shape: ") + e.what());
  } catch (const CheckpointMismatch&) {
    throw;
  } catch (const std::runtime_error& e) {
    throw CheckpointMismatch(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

/// Copies checkpoint values into `store` (and `adam`, when given). Every
/// parameter must be present with an identical shape.
template <class Real>
void restore(const Checkpoint& ck, ParamStore<Real>& store, AdamState* adam) {
  std::size_t params = 0;
  for (const auto& name : ck.names) params += name.rfind("adam.", 0) != 0;
  if (params != store.size()) {
    throw CheckpointMismatch("checkpoint: has " + std::to_string(params) + " params, model has " +
                             std::to_string(store.size()));
  }
  if (adam) {
    adam->m.clear();
    adam->v.clear();
    adam->step = ck.step;
  }
  for (auto& p : store) {
    auto it = ck.entries.find(p.name);
    if (it == ck.entries.end()) throw CheckpointMismatch("checkpoint: missing " + p.name);
    if (it->second.shape() != p.value.shape()) {
      throw CheckpointMismatch("checkpoint: " + p.name + " has shape " +
                               to_string(it->second.shape()) + ", model expects " +
                               to_string(p.value.shape()));
    }
    p.value = it->second.template cast<Real>();
    if (adam) {
      auto m = ck.entries.find("adam.m/" + p.name);
      auto v = ck.entries.find("adam.v/" + p.name);
      if (m == ck.entries.end() || v == ck.entries.end()) {
        if (ck.step != 0) throw CheckpointMismatch("checkpoint: missing optimizer state for " + p.name);
        adam->m.emplace_back(p.value.size(), 0.0);
        adam->v.emplace_back(p.value.size(), 0.0);
      } else {
        adam->m.push_back(m->second.storage());
        adam->v.push_back(v->second.storage());
      }
    }
  }
}

}  // namespace psb
