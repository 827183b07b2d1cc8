// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"
#include "psb/errors.hpp"
#include "psb/optim.hpp"
#include "psb/psb_encoder.hpp"
#include "psb/recurrent.hpp"
#include "psb/synthdata.hpp"

namespace psb {

enum class EncoderKind { psb, recurrent };

inline std::string to_string(EncoderKind k) { return k == EncoderKind::psb ? "psb" : "recurrent"; }

struct ModelConfig {
  EncoderKind encoder = EncoderKind::psb;
  PsbConfig psb;
  std::size_t recurrent_iterations = 2;
  std::size_t recurrent_heads = 1;
  std::size_t patch = 4;
  std::size_t decoder_hidden = 64;
  std::string precision = "float64";  // or "float32"
};

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 4;
  Schedule schedule;
  AdamWConfig adamw;
  double clip = 0;  // 0 disables clip-by-global-norm
  std::size_t checkpoint_every = 500;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  SynthConfig data;
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, const std::string& section,
                           const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError("config: '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) {
      throw ConfigError("config: unknown key '" + (section.empty() ? key : section + "." + key) +
                        "'");
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for '" + section + "." + key + "'");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& p = c.model.psb;
  return {
      {"seed", c.seed},
      {"workers", c.workers},
      {"data",
       {{"steps", c.data.steps},
        {"height", c.data.height},
        {"width", c.data.width},
        {"min_objects", c.data.min_objects},
        {"max_objects", c.data.max_objects},
        {"min_speed", c.data.min_speed},
        {"max_speed", c.data.max_speed}}},
      {"model",
       {{"encoder", to_string(c.model.encoder)},
        {"layers", p.layers},
        {"slots", p.slots},
        {"dim", p.dim},
        {"bottom_up_heads", p.bottom_up_heads},
        {"time_heads", p.time_heads},
        {"object_heads", p.object_heads},
        {"mlp_hidden", p.mlp_hidden},
        {"init", to_string(p.init)},
        {"causal", p.causal},
        {"inverted", p.inverted},
        {"interaction", to_string(p.interaction)},
        {"t_max", p.t_max},
        {"window", p.window},
        {"recurrent_iterations", c.model.recurrent_iterations},
        {"recurrent_heads", c.model.recurrent_heads},
        {"patch", c.model.patch},
        {"decoder_hidden", c.model.decoder_hidden},
        {"precision", c.model.precision}}},
      {"train",
       {{"steps", c.train.steps},
        {"batch", c.train.batch},
        {"peak_lr", c.train.schedule.peak},
        {"warmup", c.train.schedule.warmup},
        {"half_life", c.train.schedule.half_life},
        {"beta1", c.train.adamw.beta1},
        {"beta2", c.train.adamw.beta2},
        {"eps", c.train.adamw.eps},
        {"weight_decay", c.train.adamw.weight_decay},
        {"clip", c.train.clip},
        {"checkpoint_every", c.train.checkpoint_every}}},
  };
}

inline void validate(const RunConfig& c);

/// Overlays `j` on `base`; unknown keys and ill-typed values are errors.
inline RunConfig merge_config(RunConfig c, const nlohmann::json& j) {
  using detail::read;
  detail::reject_unknown(j, "", {"seed", "workers", "data", "model", "train"});
  read(j, "seed", c.seed, "");
  read(j, "workers", c.workers, "");
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown(d, "data", {"steps", "height", "width", "min_objects", "max_objects",
                                       "min_speed", "max_speed"});
    read(d, "steps", c.data.steps, "data");
    read(d, "height", c.data.height, "data");
    read(d, "width", c.data.width, "data");
    read(d, "min_objects", c.data.min_objects, "data");
    read(d, "max_objects", c.data.max_objects, "data");
    read(d, "min_speed", c.data.min_speed, "data");
    read(d, "max_speed", c.data.max_speed, "data");
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::reject_unknown(
        m, "model",
        {"encoder", "layers", "slots", "dim", "bottom_up_heads", "time_heads", "object_heads",
         "mlp_hidden", "init", "causal", "inverted", "interaction", "t_max", "window",
         "recurrent_iterations", "recurrent_heads", "patch", "decoder_hidden", "precision"});
    auto& p = c.model.psb;
    std::string s;
    if (m.contains("encoder")) {
      read(m, "encoder", s, "model");
      if (s == "psb") c.model.encoder = EncoderKind::psb;
      else if (s == "recurrent") c.model.encoder = EncoderKind::recurrent;
      else throw ConfigError("config: model.encoder must be psb or recurrent");
    }
    if (m.contains("init")) {
      read(m, "init", s, "model");
      if (s == "learned") p.init = InitMode::learned;
      else if (s == "random") p.init = InitMode::random;
      else throw ConfigError("config: model.init must be learned or random");
    }
    if (m.contains("interaction")) {
      read(m, "interaction", s, "model");
      if (s == "decoupled") p.interaction = Interaction::decoupled;
      else if (s == "joint") p.interaction = Interaction::joint;
      else throw ConfigError("config: model.interaction must be decoupled or joint");
    }
    read(m, "layers", p.layers, "model");
    read(m, "slots", p.slots, "model");
    read(m, "dim", p.dim, "model");
    read(m, "bottom_up_heads", p.bottom_up_heads, "model");
    read(m, "time_heads", p.time_heads, "model");
    read(m, "object_heads", p.object_heads, "model");
    read(m, "mlp_hidden", p.mlp_hidden, "model");
    read(m, "causal", p.causal, "model");
    read(m, "inverted", p.inverted, "model");
    read(m, "t_max", p.t_max, "model");
    read(m, "window", p.window, "model");
    read(m, "recurrent_iterations", c.model.recurrent_iterations, "model");
    read(m, "recurrent_heads", c.model.recurrent_heads, "model");
    read(m, "patch", c.model.patch, "model");
    read(m, "decoder_hidden", c.model.decoder_hidden, "model");
    read(m, "precision", c.model.precision, "model");
    if (c.model.precision != "float64" && c.model.precision != "float32") {
      throw ConfigError("config: model.precision must be float64 or float32");
    }
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::reject_unknown(t, "train", {"steps", "batch", "peak_lr", "warmup", "half_life", "beta1",
                                        "beta2", "eps", "weight_decay", "clip",
                                        "checkpoint_every"});
    read(t, "steps", c.train.steps, "train");
    read(t, "batch", c.train.batch, "train");
    read(t, "peak_lr", c.train.schedule.peak, "train");
    read(t, "warmup", c.train.schedule.warmup, "train");
    read(t, "half_life", c.train.schedule.half_life, "train");
    read(t, "beta1", c.train.adamw.beta1, "train");
    read(t, "beta2", c.train.adamw.beta2, "train");
    read(t, "eps", c.train.adamw.eps, "train");
    read(t, "weight_decay", c.train.adamw.weight_decay, "train");
    read(t, "clip", c.train.clip, "train");
    read(t, "checkpoint_every", c.train.checkpoint_every, "train");
  }
  validate(c);
  return c;
}

inline void validate(const RunConfig& c) {
  if (c.train.batch == 0) throw ConfigError("config: train.batch must be positive");
  if (c.model.patch == 0) throw ConfigError("config: model.patch must be positive");
  if (c.data.height % c.model.patch || c.data.width % c.model.patch) {
    throw ConfigError("config: data.height/width must be divisible by model.patch");
  }
  if (c.workers == 0) throw ConfigError("config: workers must be positive");
  if (c.train.schedule.half_life <= 0 || c.train.schedule.peak < 0 || c.train.schedule.warmup < 0) {
    throw ConfigError("config: schedule values must be positive");
  }
}

inline RunConfig config_from_json(const nlohmann::json& j) { return merge_config(RunConfig{}, j); }

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON in ") + path + ": " + e.what());
  }
  return merge_config(std::move(base), j);
}

/// Applies one "section.key=value" override; the value is parsed as JSON
/// and falls back to a plain string.
inline RunConfig apply_override(RunConfig c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like key=value");
  }
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json patch = nlohmann::json::object();
  const auto dot = path.find('.');
  if (dot == std::string::npos) patch[path] = value;
  else patch[path.substr(0, dot)][path.substr(dot + 1)] = value;
  return merge_config(std::move(c), patch);
}

/// PSB_SEED, when set, replaces the configured seed.
inline RunConfig apply_env(RunConfig c) {
  if (const char* s = std::getenv("PSB_SEED")) {
    char* end = nullptr;
    const auto v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') throw ConfigError("PSB_SEED must be an unsigned integer");
    c.seed = v;
  }
  return c;
}

inline RecurrentConfig recurrent_config(const ModelConfig& m) {
  RecurrentConfig r;
  r.slots = m.psb.slots;
  r.dim = m.psb.dim;
  r.iterations = m.recurrent_iterations;
  r.mlp_hidden = m.psb.mlp_hidden;
  r.heads = m.recurrent_heads;
  return r;
}

}  // namespace psb
