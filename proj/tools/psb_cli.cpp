// SPDX-License-Identifier: Apache-2.0
// psb: data generation, training, evaluation, probing and benchmarks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "psb/psb.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 2, kNumeric = 3, kCheckpoint = 4, kMetric = 5 };

/// Raised for metric preconditions (exit 5) so they are not confused with
/// the usage errors that share PreconditionError elsewhere.
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  int workers = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "Override, e.g. --set train.steps=200 (repeatable)");
  cmd->add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
}

psb::RunConfig resolve(const Common& c, psb::RunConfig base = {}) {
  auto cfg = c.config_path.empty() ? base : psb::load_config_file(c.config_path, base);
  for (const auto& o : c.overrides) cfg = psb::apply_override(cfg, o);
  cfg = psb::apply_env(cfg);
  if (c.workers > 0) cfg.workers = static_cast<std::size_t>(c.workers);
  psb::set_workers(static_cast<int>(cfg.workers));
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

void write_config(const fs::path& dir, const json& j) { write_text(dir / "config.json", j.dump(2) + "\n"); }

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

/// Dataset frames define T, H and W of the run.
std::vector<psb::Episode> load_data(const std::string& path, psb::RunConfig& cfg) {
  auto data = psb::read_dataset(path);
  if (data.empty()) throw psb::ConfigError("dataset " + path + " has no episodes");
  cfg.data.steps = data[0].steps();
  cfg.data.height = data[0].height();
  cfg.data.width = data[0].width();
  for (const auto& ep : data) {
    if (ep.steps() != cfg.data.steps || ep.height() != cfg.data.height || ep.width() != cfg.data.width) {
      throw psb::ConfigError("dataset " + path + " mixes episode shapes");
    }
  }
  psb::validate(cfg);
  return data;
}

template <class F>
auto with_precision(const std::string& precision, F&& f) {
  if (precision == "float32") return f(float{});
  return f(double{});
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct GenData {
  Common common;
  std::string out;
  std::size_t episodes = 100;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> t, h, w;
};

int gen_data(const GenData& a) {
  auto cfg = resolve(a.common);
  if (a.seed) cfg.seed = *a.seed;
  if (a.t) cfg.data.steps = *a.t;
  if (a.h) cfg.data.height = *a.h;
  if (a.w) cfg.data.width = *a.w;
  const fs::path out(a.out);
  write_config(out.has_parent_path() ? out.parent_path() : fs::path("."), psb::to_json(cfg));
  const auto data = psb::generate_dataset(cfg.seed, a.episodes, cfg.data);
  const auto bytes = psb::serialize_dataset(data);
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("cannot write " + a.out);
  std::cout << "episodes " << data.size() << "\ncrc32 " << hex32(psb::crc32_of(bytes)) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct Train {
  Common common;
  std::string data, out, resume, encoder, init, interaction;
  bool no_inverted = false;
  std::optional<std::size_t> steps;
};

int train(const Train& a) {
  auto cfg = resolve(a.common);
  if (!a.encoder.empty()) cfg = psb::apply_override(cfg, "model.encoder=" + a.encoder);
  if (!a.init.empty()) cfg = psb::apply_override(cfg, "model.init=" + a.init);
  if (!a.interaction.empty()) cfg = psb::apply_override(cfg, "model.interaction=" + a.interaction);
  if (a.no_inverted) cfg.model.psb.inverted = false;
  if (a.steps) cfg.train.steps = *a.steps;
  const auto data = load_data(a.data, cfg);
  const fs::path out(a.out);
  write_config(out, psb::to_json(cfg));
  psb::TrainOptions opt;
  opt.out = out;
  if (!a.resume.empty()) opt.resume = fs::path(a.resume);
  const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 20);
  opt.on_step = [&](const psb::StepRecord& r) {
    if (r.step % every == 0 || r.step == cfg.train.steps) {
      std::cerr << "step " << r.step << "/" << cfg.train.steps << " loss " << r.loss << " grad_norm "
                << r.grad_norm << " lr " << r.lr << "\n";
    }
  };
  const auto history = with_precision(cfg.model.precision, [&](auto real) {
    return psb::run_training<decltype(real)>(cfg, data, opt);
  });
  json summary{{"steps", history.size()}, {"out", out.string()}};
  if (!history.empty()) {
    summary["first_loss"] = history.front().loss;
    summary["final_loss"] = history.back().loss;
  }
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct Loaded {
  psb::RunConfig cfg;
  psb::Checkpoint ck;
};

Loaded load_for_eval(const Common& common, const std::string& checkpoint) {
  Loaded l;
  l.ck = psb::load_checkpoint(checkpoint);
  try {
    l.cfg = resolve(common, psb::config_from_json(l.ck.config));
  } catch (const psb::ConfigError& e) {
    throw psb::CheckpointMismatch(std::string("checkpoint config: ") + e.what());
  }
  return l;
}

template <class Real>
psb::AutoEncoder<Real> restore_model(const Loaded& l) {
  psb::AutoEncoder<Real> model(l.cfg.model, l.cfg.seed);
  psb::restore(l.ck, model.store(), nullptr);
  return model;
}

std::vector<psb::Episode> load_eval_data(const std::string& path, psb::RunConfig& cfg) {
  const auto h = cfg.data.height, w = cfg.data.width;
  std::vector<psb::Episode> data;
  try {
    data = load_data(path, cfg);
  } catch (const psb::ConfigError& e) {
    // Frames that the checkpoint's patch size cannot tile.
    throw psb::CheckpointMismatch(e.what());
  }
  if (cfg.data.height != h || cfg.data.width != w) {
    throw psb::CheckpointMismatch("dataset frames are " + std::to_string(cfg.data.height) + "x" +
                                  std::to_string(cfg.data.width) + " but the checkpoint was trained on " +
                                  std::to_string(h) + "x" + std::to_string(w));
  }
  return data;
}

struct Eval {
  Common common;
  std::string checkpoint, data, out, metrics = "fgari,psnr", grouping = "per-video";
  bool oracle = false;
};

int eval(const Eval& a) {
  auto l = load_for_eval(a.common, a.checkpoint);
  const auto grouping = psb::parse_grouping(a.grouping);
  const auto wanted = split_list(a.metrics);
  for (const auto& m : wanted) {
    if (m != "fgari" && m != "psnr") throw psb::ConfigError("unknown metric '" + m + "'");
  }
  const auto data = load_eval_data(a.data, l.cfg);
  if (!a.out.empty()) write_config(a.out, psb::to_json(l.cfg));
  const auto report = with_precision(l.cfg.model.precision, [&](auto real) {
    auto model = restore_model<decltype(real)>(l);
    try {
      return psb::evaluate(model, data, grouping, a.oracle, l.cfg.seed);
    } catch (const psb::PreconditionError& e) {
      throw MetricError(e.what());
    }
  });
  json j{{"checkpoint", a.checkpoint}, {"episodes", report.episodes}, {"grouping", psb::to_string(grouping)}};
  for (const auto& m : wanted) {
    if (m == "fgari") {
      j["fg_ari"] = report.fg_ari;
      j["fg_ari_one_cluster_baseline"] = report.fg_ari_baseline;
    } else {
      j["psnr"] = report.psnr;
      j["mse"] = report.mse;
    }
  }
  if (!a.out.empty()) write_text(fs::path(a.out) / "metrics.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct Probe {
  Common common;
  std::string checkpoint, data, out, factors = "position,color,shape,size";
  double ridge = 1e-4;
};

int probe(const Probe& a) {
  auto l = load_for_eval(a.common, a.checkpoint);
  const auto factors = split_list(a.factors);
  for (const auto& f : factors) {
    if (f != "position" && f != "color" && f != "shape" && f != "size") {
      throw psb::ConfigError("unknown factor '" + f + "' (known: position, color, shape, size)");
    }
  }
  const auto data = load_eval_data(a.data, l.cfg);
  const std::size_t slots = l.cfg.model.psb.slots;
  for (const auto& ep : data) {
    if (ep.objects.size() > slots) {
      throw MetricError("probe: episode has " + std::to_string(ep.objects.size()) + " objects but the model has " +
                        std::to_string(slots) + " slots");
    }
  }
  if (!a.out.empty()) write_config(a.out, psb::to_json(l.cfg));
  const auto problems = with_precision(l.cfg.model.precision, [&](auto real) {
    auto model = restore_model<decltype(real)>(l);
    return psb::probe_problems(model, data, l.cfg.seed);
  });
  psb::ProbeOptions opt;
  opt.ridge = a.ridge;
  psb::ProbeResult r;
  try {
    r = psb::perm_invariant_probe(problems, factors, opt);
  } catch (const psb::PreconditionError& e) {
    throw MetricError(e.what());
  }
  json scores = json::object();
  for (const auto& s : r.scores) scores[s.factor] = {{"metric", s.metric}, {"value", s.value}, {"test_episodes", s.n_episodes}};
  std::vector<std::size_t> usage(slots, 0);
  std::size_t identity = 0;
  for (const auto& p : r.permutations) {
    bool id = true;
    for (std::size_t m = 0; m < p.size(); ++m) {
      ++usage[p[m]];
      id = id && p[m] == m;
    }
    identity += id;
  }
  json j{{"checkpoint", a.checkpoint},
         {"scores", scores},
         {"em_rounds", r.rounds},
         {"em_objective", r.em_objective},
         {"train_episodes", r.train.size()},
         {"test_episodes", r.test.size()},
         {"permutations",
          {{"identity_fraction", static_cast<double>(identity) / static_cast<double>(r.permutations.size())},
           {"slot_usage", usage}}}};
  if (!a.out.empty()) write_text(fs::path(a.out) / "probe.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct Bench {
  std::string encoders = "psb,recurrent", steps = "6,12,18,24", out = "bench";
  std::size_t reps = 5, warmup = 2, slots = 4, tokens = 64, dim = 64;
  int workers = 1;
  std::uint64_t seed = 0;
};

int bench(const Bench& a) {
  psb::BenchOptions opt;
  opt.encoders = split_list(a.encoders);
  opt.steps.clear();
  for (const auto& t : split_list(a.steps)) {
    try {
      opt.steps.push_back(std::stoul(t));
    } catch (const std::exception&) {
      throw psb::ConfigError("bad --T entry '" + t + "'");
    }
  }
  if (opt.steps.empty() || opt.encoders.empty()) throw psb::ConfigError("bench: empty sweep");
  opt.reps = a.reps;
  opt.warmup = a.warmup;
  opt.slots = a.slots;
  opt.tokens = a.tokens;
  opt.dim = a.dim;
  opt.workers = a.workers;
  opt.seed = a.seed;
  const fs::path out(a.out);
  write_config(out, {{"bench",
                      {{"encoders", opt.encoders},
                       {"T", opt.steps},
                       {"reps", opt.reps},
                       {"warmup", opt.warmup},
                       {"N", opt.slots},
                       {"L", opt.tokens},
                       {"D", opt.dim},
                       {"workers", opt.workers},
                       {"seed", opt.seed}}},
                     {"hardware", {{"hardware_threads", psb::hardware_threads()}}}});
  const auto report = psb::bench(opt);
  write_text(out / "bench.csv", report.csv());
  write_text(out / "plot.svg", report.svg());
  std::cout << report.csv();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallelizable spatiotemporal binder: data, training, evaluation and benchmarks"};
  app.require_subcommand(1);

  GenData g;
  auto* cg = app.add_subcommand("gen-data", "Generate a synthetic sprite dataset");
  add_common(cg, g.common);
  cg->add_option("--out", g.out, "Dataset file")->required();
  cg->add_option("--episodes", g.episodes, "Number of episodes");
  cg->add_option("--seed", g.seed, "Root seed");
  cg->add_option("--T", g.t, "Frames per episode")->check(CLI::PositiveNumber);
  cg->add_option("--H", g.h, "Frame height");
  cg->add_option("--W", g.w, "Frame width");

  Train t;
  auto* ct = app.add_subcommand("train", "Train the autoencoder");
  add_common(ct, t.common);
  ct->add_option("--data", t.data, "Dataset file")->required()->check(CLI::ExistingFile);
  ct->add_option("--out", t.out, "Run directory")->required();
  ct->add_option("--encoder", t.encoder, "psb or recurrent")->check(CLI::IsMember({"psb", "recurrent"}));
  ct->add_option("--init", t.init, "Slot initialization")->check(CLI::IsMember({"learned", "random"}));
  ct->add_option("--interaction", t.interaction, "Slot interaction")->check(CLI::IsMember({"decoupled", "joint"}));
  ct->add_flag("--no-inverted", t.no_inverted, "Use dot-product bottom-up attention");
  ct->add_option("--steps", t.steps, "Training steps");
  ct->add_option("--resume", t.resume, "Checkpoint directory to resume from")->check(CLI::ExistingDirectory);

  Eval e;
  auto* ce = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(ce, e.common);
  ce->add_option("--checkpoint", e.checkpoint, "Checkpoint directory")->required();
  ce->add_option("--data", e.data, "Dataset file")->required()->check(CLI::ExistingFile);
  ce->add_option("--metrics", e.metrics, "Comma-separated subset of fgari,psnr");
  ce->add_option("--grouping", e.grouping, "per-frame, per-video, per-camera, cross-camera or cross-all");
  ce->add_option("--out", e.out, "Directory for config.json and metrics.json");
  ce->add_flag("--oracle-masks", e.oracle, "Score ground-truth masks instead of predictions");

  Probe p;
  auto* cp = app.add_subcommand("probe", "Permutation-invariant linear probing of slots");
  add_common(cp, p.common);
  cp->add_option("--checkpoint", p.checkpoint, "Checkpoint directory")->required();
  cp->add_option("--data", p.data, "Dataset file")->required()->check(CLI::ExistingFile);
  cp->add_option("--factors", p.factors, "Comma-separated factors");
  cp->add_option("--ridge", p.ridge, "Ridge penalty");
  cp->add_option("--out", p.out, "Directory for config.json and probe.json");

  Bench b;
  auto* cb = app.add_subcommand("bench", "Time encoder training steps against episode length");
  cb->add_option("--encoders", b.encoders, "Comma-separated: psb, psb-joint, recurrent");
  cb->add_option("--T", b.steps, "Comma-separated episode lengths");
  cb->add_option("--reps", b.reps, "Timed repetitions per row");
  cb->add_option("--warmup", b.warmup, "Untimed repetitions per row");
  cb->add_option("--workers", b.workers, "Worker threads")->check(CLI::PositiveNumber);
  cb->add_option("--N", b.slots, "Slots");
  cb->add_option("--L", b.tokens, "Tokens per frame");
  cb->add_option("--D", b.dim, "Model width");
  cb->add_option("--seed", b.seed, "Seed");
  cb->add_option("--out", b.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (cg->parsed()) return gen_data(g);
    if (ct->parsed()) return train(t);
    if (ce->parsed()) return eval(e);
    if (cp->parsed()) return probe(p);
    if (cb->parsed()) return bench(b);
  } catch (const psb::NumericError& err) {
    std::cerr << "numerical abort: " << err.what() << "\n";
    return kNumeric;
  } catch (const psb::CheckpointMismatch& err) {
    std::cerr << "checkpoint mismatch: " << err.what() << "\n";
    return kCheckpoint;
  } catch (const MetricError& err) {
    std::cerr << "metric precondition: " << err.what() << "\n";
    return kMetric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
