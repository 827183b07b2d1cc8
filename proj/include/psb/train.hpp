// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "psb/checkpoint.hpp"
#include "psb/config.hpp"
#include "psb/metrics.hpp"
#include "psb/model.hpp"
#include "psb/optim.hpp"
#include "psb/parallel.hpp"
#include "psb/probe.hpp"
#include "psb/synthdata.hpp"

namespace psb {

struct StepRecord {
  std::uint64_t step = 0;
  double loss = 0, grad_norm = 0, lr = 0, wall_ms = 0;

  nlohmann::json to_json() const {
    return {{"step", step}, {"loss", loss}, {"grad_norm", grad_norm}, {"lr", lr},
            {"wall_ms", wall_ms}};
  }
};

/// Episode indices of the batch used at `step`; a pure function of its
/// arguments, so a resumed run sees the same batches.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step,
                                              std::size_t batch, std::size_t episodes) {
  if (episodes == 0) throw PreconditionError("train: dataset is empty");
  Rng rng(derive_seed(seed, {0xba7c, step}));
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = detail::pick(rng, episodes);
  return out;
}

template <class Real>
class Trainer {
 public:
  Trainer(const RunConfig& cfg, const std::vector<Episode>& data)
      : cfg_(cfg), data_(&data), model_(cfg.model, cfg.seed) {
    adam_.ensure(model_.store());
    for (const auto& ep : data) {
      if (ep.height() != cfg.data.height || ep.width() != cfg.data.width) {
        throw ConfigError("train: dataset frames are " + std::to_string(ep.height()) + "x" +
                          std::to_string(ep.width()) + " but config says " +
                          std::to_string(cfg.data.height) + "x" + std::to_string(cfg.data.width));
      }
    }
  }

  const RunConfig& config() const { return cfg_; }
  AutoEncoder<Real>& model() { return model_; }
  const AutoEncoder<Real>& model() const { return model_; }
  const AdamState& optimizer() const { return adam_; }
  std::uint64_t step() const { return adam_.step; }

  /// Mean loss of the batch at `step` and its gradient, left in the store.
  double accumulate(std::uint64_t step) {
    auto& store = model_.store();
    const std::size_t b = cfg_.train.batch;
    const auto idx = batch_indices(cfg_.seed, step, b, data_->size());
    std::vector<std::vector<Tensor<Real>>> grads(b);
    std::vector<double> losses(b);
    parallel_for(
        b,
        [&](std::size_t i) {
          Tape<Real> tape(&store);
          const auto frames = (*data_)[idx[i]].frames.template cast<Real>();
          auto f = model_.forward(tape, frames, derive_seed(cfg_.seed, {0x5107, step, i}));
          losses[i] = static_cast<double>(f.loss.value()[0]);
          grads[i] = store.zero_grads();
          tape.backward(f.loss, grads[i], Real(1) / static_cast<Real>(b));
        },
        std::size_t{1} << 20);
    store.zero_grad();
    std::size_t p = 0;
    for (auto& param : store) {
      for (std::size_t i = 0; i < b; ++i) {
        const auto& g = grads[i][p];
        for (std::size_t k = 0; k < g.size(); ++k) param.grad[k] += g[k];
      }
      ++p;
    }
    double loss = 0;
    for (double l : losses) loss += l;
    return loss / static_cast<double>(b);
  }

  /// One optimizer step. Throws NumericError on a non-finite loss or
  /// gradient, leaving parameters untouched.
  StepRecord train_step() {
    const auto start = std::chrono::steady_clock::now();
    StepRecord r;
    r.step = adam_.step + 1;
    r.loss = accumulate(adam_.step);
    if (!std::isfinite(r.loss)) throw NumericError("train: non-finite loss at step " + std::to_string(r.step));
    r.grad_norm = cfg_.train.clip > 0 ? clip_grad_norm(model_.store(), cfg_.train.clip)
                                      : global_grad_norm(model_.store());
    if (!std::isfinite(r.grad_norm)) {
      throw NumericError("train: non-finite gradient norm at step " + std::to_string(r.step));
    }
    r.lr = lr_at(r.step, cfg_.train.schedule);
    adamw_update(model_.store(), adam_, r.lr, cfg_.train.adamw);
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return r;
  }

  Checkpoint checkpoint() const { return make_checkpoint(to_json(cfg_), model_.store(), &adam_); }

  void restore(const Checkpoint& ck) { psb::restore(ck, model_.store(), &adam_); }

 private:
  RunConfig cfg_;
  const std::vector<Episode>* data_;
  AutoEncoder<Real> model_;
  AdamState adam_;
};

struct TrainOptions {
  std::filesystem::path out;
  std::optional<std::filesystem::path> resume;
  std::function<void(const StepRecord&)> on_step;
};

inline std::filesystem::path checkpoint_dir(const std::filesystem::path& out, std::uint64_t step) {
  return out / "checkpoints" / ("step-" + std::to_string(step));
}

/// Full training run into `opt.out`: history.jsonl, checkpoints/step-N
/// every `checkpoint_every` steps (including step 0) and final/. On a
/// numerical failure a snapshot of the last good state goes to
/// nan_snapshot/ next to a diagnostic.json, then the error is rethrown.
template <class Real>
std::vector<StepRecord> run_training(const RunConfig& cfg, const std::vector<Episode>& data,
                                     const TrainOptions& opt) {
  Trainer<Real> trainer(cfg, data);
  std::vector<StepRecord> history;
  std::filesystem::create_directories(opt.out);
  const auto history_path = opt.out / "history.jsonl";
  if (opt.resume) {
    trainer.restore(load_checkpoint(*opt.resume));
    // Keep the history up to the resumed step only.
    std::vector<std::string> kept;
    if (std::ifstream in(history_path); in) {
      for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        if (nlohmann::json::parse(line).at("step").get<std::uint64_t>() <= trainer.step()) {
          kept.push_back(line);
        }
      }
    }
    std::ofstream f(history_path, std::ios::trunc);
    for (const auto& line : kept) f << line << "\n";
  } else {
    std::ofstream(history_path, std::ios::trunc);
  }
  std::ofstream log(history_path, std::ios::app);
  const std::size_t every = cfg.train.checkpoint_every;
  if (!opt.resume) save_checkpoint(checkpoint_dir(opt.out, 0), trainer.checkpoint());
  while (trainer.step() < cfg.train.steps) {
    StepRecord r;
    try {
      r = trainer.train_step();
    } catch (const NumericError& e) {
      save_checkpoint(opt.out / "nan_snapshot", trainer.checkpoint());
      nlohmann::json diag{{"step", trainer.step() + 1}, {"error", e.what()}};
      if (!history.empty()) diag["last"] = history.back().to_json();
      std::ofstream(opt.out / "nan_snapshot" / "diagnostic.json") << diag.dump(2) << "\n";
      throw;
    }
    history.push_back(r);
    log << r.to_json().dump() << "\n" << std::flush;
    if (opt.on_step) opt.on_step(r);
    if (every > 0 && r.step % every == 0) {
      save_checkpoint(checkpoint_dir(opt.out, r.step), trainer.checkpoint());
    }
  }
  save_checkpoint(opt.out / "final", trainer.checkpoint());
  return history;
}

struct EvalReport {
  Grouping grouping = Grouping::per_video;
  std::size_t episodes = 0;
  double mse = 0, psnr = 0, fg_ari = 0, fg_ari_baseline = 0;

  nlohmann::json to_json() const {
    return {{"grouping", to_string(grouping)}, {"episodes", episodes}, {"mse", mse},
            {"psnr", psnr}, {"fg_ari", fg_ari}, {"fg_ari_one_cluster_baseline", fg_ari_baseline}};
  }
};

/// Encodes and decodes every episode. Predicted segments are the argmax of
/// the decoder's alpha masks; `oracle` substitutes the ground-truth masks.
template <class Real>
EvalReport evaluate(const AutoEncoder<Real>& model, const std::vector<Episode>& data,
                    Grouping grouping, bool oracle = false, std::uint64_t seed = 0) {
  if (data.empty()) throw PreconditionError("eval: dataset is empty");
  EvalReport rep;
  rep.grouping = grouping;
  rep.episodes = data.size();
  std::vector<double> mse(data.size()), ari(data.size()), base(data.size());
  parallel_for(
      data.size(),
      [&](std::size_t e) {
        const auto& ep = data[e];
        const std::size_t steps = ep.steps(), pixels = ep.height() * ep.width();
        Tape<Real> tape(&model.store());
        const auto frames = ep.frames.template cast<Real>();
        auto f = model.forward(tape, frames, derive_seed(seed, {0xe7a1, e}));
        mse[e] = static_cast<double>(f.loss.value()[0]);
        LabelVolume gt{std::vector<int>(ep.masks.begin(), ep.masks.end()), steps, 1, pixels};
        LabelVolume pred{oracle ? gt.labels : argmax_slots(f.decoded.masks.value()), steps, 1, pixels};
        LabelVolume one{std::vector<int>(steps * pixels, 0), steps, 1, pixels};
        ari[e] = grouped_fg_ari(pred, gt, grouping);
        base[e] = grouped_fg_ari(one, gt, grouping);
      },
      std::size_t{1} << 20);
  for (std::size_t e = 0; e < data.size(); ++e) {
    rep.mse += mse[e];
    rep.fg_ari += ari[e];
    rep.fg_ari_baseline += base[e];
  }
  const auto n = static_cast<double>(data.size());
  rep.mse /= n;
  rep.fg_ari /= n;
  rep.fg_ari_baseline /= n;
  rep.psnr = psnr_from_mse(rep.mse);
  return rep;
}

/// Ground-truth factors of one episode in probe layout. Positions are
/// normalized to [0, 1]; color is the palette RGB; shape and size are
/// categorical.
inline std::vector<FactorData> episode_factors(const Episode& ep) {
  const std::size_t t = ep.steps(), m = ep.objects.size();
  FactorData pos{"position", false, 2, {}}, color{"color", false, 3, {}},
      shape{"shape", true, 3, {}}, size{"size", true, kSpriteRadii.size(), {}};
  for (std::size_t s = 0; s < t; ++s) {
    for (std::size_t i = 0; i < m; ++i) {
      const auto& o = ep.objects[i];
      pos.values.push_back(o.position[s].x / static_cast<double>(ep.width()));
      pos.values.push_back(o.position[s].y / static_cast<double>(ep.height()));
      for (double c : kPalette[o.color]) color.values.push_back(c);
      shape.values.push_back(static_cast<double>(static_cast<int>(o.shape)));
      const auto r = std::find(kSpriteRadii.begin(), kSpriteRadii.end(), o.radius);
      size.values.push_back(static_cast<double>(r - kSpriteRadii.begin()));
    }
  }
  return {pos, color, shape, size};
}

template <class Real>
std::vector<ProbeProblem> probe_problems(const AutoEncoder<Real>& model,
                                         const std::vector<Episode>& data, std::uint64_t seed = 0) {
  std::vector<ProbeProblem> out(data.size());
  parallel_for(
      data.size(),
      [&](std::size_t e) {
        Tape<Real> tape(&model.store());
        auto features = model.embed()(tape, data[e].frames.template cast<Real>());
        out[e].slots = model.encode(tape, features, derive_seed(seed, {0xe7a1, e})).value().template cast<double>();
        out[e].objects = data[e].objects.size();
        out[e].factors = episode_factors(data[e]);
      },
      std::size_t{1} << 20);
  return out;
}

struct StabilityReport {
  std::vector<double> grad_norms;
  double max = 0, median = 0;
  double ratio() const { return median > 0 ? max / median : 0; }
};

/// Trains for `cfg.train.steps` steps and records the global gradient norm
/// of every step.
template <class Real>
StabilityReport stability_probe(const RunConfig& cfg, const std::vector<Episode>& data) {
  Trainer<Real> trainer(cfg, data);
  StabilityReport rep;
  while (trainer.step() < cfg.train.steps) rep.grad_norms.push_back(trainer.train_step().grad_norm);
  if (rep.grad_norms.empty()) return rep;
  auto sorted = rep.grad_norms;
  std::sort(sorted.begin(), sorted.end());
  rep.max = sorted.back();
  const std::size_t n = sorted.size();
  rep.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return rep;
}

}  // namespace psb
