// SPDX-License-Identifier: Apache-2.0
// Acceptance checks. `acceptance N` runs criterion N, `acceptance` runs all.
// Each prints one PASS/FAIL line; the exit code is 0 when every run
// criterion passed, 1 otherwise and 77 when a criterion needs hardware
// this machine does not have.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "psb/psb.hpp"
#include "support.hpp"

using psb::Tape;
using psb::Tensor;

namespace {

constexpr int kSkip = 77;

struct Outcome {
  bool pass = false;
  std::string detail;
  bool hardware_limited = false;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

Tensor<double> features(std::size_t t, std::size_t l, std::size_t d, std::uint64_t seed) {
  psb::Rng rng(seed);
  return psb::normal_tensor<double>({t, l, d}, rng);
}

psb::PsbConfig encoder_config(std::size_t slots, std::size_t dim) {
  psb::PsbConfig cfg;
  cfg.layers = 2;
  cfg.slots = slots;
  cfg.dim = dim;
  cfg.bottom_up_heads = 2;
  cfg.time_heads = 2;
  cfg.object_heads = 2;
  cfg.mlp_hidden = 2 * dim;
  cfg.t_max = 6;
  cfg.window = 6;
  return cfg;
}

Outcome gradient_fidelity() {
  psb::ModelConfig m;
  m.psb = encoder_config(2, 16);
  m.patch = 4;
  m.decoder_hidden = 16;
  const auto t0 = Clock::now();
  psb::AutoEncoder<double> model(m, 3);
  psb::testing::perturb(model.store(), 4, 0.2);
  psb::Rng rng(5);
  const auto frames = psb::uniform_tensor<double>({3, 3, 8, 8}, rng, 0.0, 1.0);
  auto loss = [&](Tape<double>& tape) { return model.forward(tape, frames, 6).loss; };
  const auto report = psb::grad_check(loss, model.store(), 1e-5, 1e-4);
  const double s = seconds_since(t0);
  return {report.max_rel_err < 1e-4 && s < 60,
          "max relative error " + fmt(report.max_rel_err, 3) + " (worst " + report.worst_param() + "), " +
              fmt(s, 3) + " s"};
}

Outcome causality() {
  double psb_worst = 0;
  bool recurrent_exact = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t l = 4, d = 8;
    auto e = features(6, l, d, 1000 + seed);
    auto moved = e;
    psb::Rng rng(2000 + seed);
    auto noise = psb::normal_tensor<double>({l, d}, rng);
    for (std::size_t i = 0; i < noise.size(); ++i) moved[5 * l * d + i] += noise[i];

    psb::ParamStore<double> ps;
    psb::Rng prng(seed);
    psb::PsbEncoder<double> enc(encoder_config(3, d), ps, prng);
    psb::testing::perturb(ps, seed + 100);
    const auto a = enc.encode(ps, e), b = enc.encode(ps, moved);
    for (std::size_t i = 0; i < 5 * 3 * d; ++i) psb_worst = std::max(psb_worst, std::abs(a[i] - b[i]));

    psb::RecurrentConfig rc;
    rc.slots = 3;
    rc.dim = d;
    rc.iterations = 2;
    rc.mlp_hidden = 16;
    rc.heads = 2;
    psb::ParamStore<double> rs;
    psb::Rng rrng(seed);
    psb::RecurrentEncoder<double> rec(rc, rs, rrng);
    psb::testing::perturb(rs, seed + 200);
    const auto ra = rec.encode(rs, e), rb = rec.encode(rs, moved);
    for (std::size_t i = 0; i < 5 * 3 * d; ++i) recurrent_exact = recurrent_exact && ra[i] == rb[i];
  }
  return {psb_worst < 1e-10 && recurrent_exact, "PSB max change at t<=4 " + fmt(psb_worst, 3) +
                                                    ", recurrent " + (recurrent_exact ? "bitwise equal" : "changed")};
}

Outcome inverted_normalization() {
  psb::Rng rng(41);
  auto draw = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  double col_err = 0, row_err = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = draw(1, 4), d = draw(1, 4);
    std::size_t nq = draw(1, 8), nk = draw(1, 10), group = 0;
    std::optional<psb::Mask> mask;
    if (trial % 2) {
      const std::size_t steps = draw(1, 3), per_k = draw(1, 3);
      group = draw(1, 3);
      nq = steps * group;
      nk = steps * per_k;
      mask = psb::expand_time_mask(psb::causal_mask(steps), group, per_k);
    }
    auto q = psb::normal_tensor<double>({h, nq, d}, rng);
    auto k = psb::normal_tensor<double>({h, nk, d}, rng);
    auto v = psb::normal_tensor<double>({h, nk, 2}, rng);
    psb::AttentionWeights<double> w;
    psb::inverted_attention(q, k, v, mask ? &*mask : nullptr, nullptr, group, &w);
    const std::size_t g = group == 0 ? nq : group;
    for (std::size_t g0 = 0; g0 < nq; g0 += g) {
      for (std::size_t j = 0; j < nk; ++j) {
        if (mask && !(*mask)(g0, j)) continue;
        double col = 0;
        for (std::size_t a = 0; a < h; ++a) {
          for (std::size_t i = g0; i < g0 + g; ++i) col += w.pre_renorm->at({0, a, i, j});
        }
        col_err = std::max(col_err, std::abs(col - 1.0));
      }
    }
    for (std::size_t a = 0; a < h; ++a) {
      for (std::size_t i = 0; i < nq; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < nk; ++j) row += w.weights.at({0, a, i, j});
        row_err = std::max(row_err, std::abs(row - 1.0));
      }
    }
  }
  return {col_err <= 1e-12 && row_err <= 1e-12,
          "column mass error " + fmt(col_err, 3) + ", row mass error " + fmt(row_err, 3) + " over 50 shapes"};
}

Outcome equivariance() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t t = 5, n = 4, d = 8;
    auto cfg = encoder_config(n, d);
    psb::ParamStore<double> store;
    psb::Rng prng(20 + seed);
    psb::PsbEncoder<double> enc(cfg, store, prng);
    psb::testing::perturb(store, 120 + seed);
    Tape<double> tape(&store);
    auto e = tape.constant(features(t, 3, d, seed));
    psb::Rng rng(seed);
    auto init = psb::normal_tensor<double>({t, n, d}, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> permuted(init.shape());
    for (std::size_t s = 0; s < t; ++s) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t c = 0; c < d; ++c) permuted.at({s, k, c}) = init.at({s, perm[k], c});
      }
    }
    auto a = enc.encode_from(tape, tape.constant(init), e).value();
    auto b = enc.encode_from(tape, tape.constant(permuted), e).value();
    for (std::size_t s = 0; s < t; ++s) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t c = 0; c < d; ++c) worst = std::max(worst, std::abs(b.at({s, k, c}) - a.at({s, perm[k], c})));
      }
    }
  }
  return {worst <= 1e-12, "max deviation " + fmt(worst, 3) + " over 10 seeds"};
}

Outcome memory_formulas() {
  bool ok = true;
  for (std::size_t n : {2, 4, 8}) {
    for (std::size_t t : {2, 6, 12, 24}) {
      ok = ok && psb::interaction_attention_elements(n, t, psb::Interaction::joint) == (n * t) * (n * t);
      ok = ok && psb::interaction_attention_elements(n, t, psb::Interaction::decoupled) == n * t * t + t * n * n;
    }
  }
  const auto joint = psb::interaction_attention_elements(4, 6, psb::Interaction::joint);
  const auto dec = psb::interaction_attention_elements(4, 6, psb::Interaction::decoupled);
  ok = ok && joint == 576 && dec == 240;
  return {ok, "N=4,T=6: joint " + std::to_string(joint) + ", decoupled " + std::to_string(dec)};
}

Outcome speed_trend() {
  psb::BenchOptions opt;
  opt.encoders = {"psb", "recurrent"};
  opt.steps = {6, 24};
  opt.slots = 4;
  opt.tokens = 64;
  opt.dim = 64;
  opt.workers = 4;
  const auto rep = psb::bench(opt);
  const double r6 = rep.time_of("psb", 6) / rep.time_of("recurrent", 6);
  const double r24 = rep.time_of("psb", 24) / rep.time_of("recurrent", 24);
  const unsigned hw = psb::hardware_threads();
  Outcome o;
  o.pass = r24 < r6 && hw >= 4;
  o.hardware_limited = hw < 4;
  o.detail = "psb/recurrent step time " + fmt(r6) + " at T=6, " + fmt(r24) + " at T=24; 4 workers on " +
             std::to_string(hw) + " hardware thread(s)";
  return o;
}

psb::RunConfig stability_config(std::uint64_t seed, psb::EncoderKind kind) {
  psb::RunConfig cfg;
  cfg.seed = seed;
  cfg.data.steps = 12;
  cfg.data.height = 16;
  cfg.data.width = 16;
  cfg.model.encoder = kind;
  cfg.model.psb = encoder_config(3, 32);
  cfg.model.psb.t_max = 12;
  cfg.model.psb.window = 12;
  cfg.model.decoder_hidden = 32;
  cfg.model.precision = "float32";
  cfg.train.steps = 2000;
  cfg.train.batch = 1;
  cfg.train.clip = 0;
  cfg.train.schedule.peak = 3e-4;
  cfg.train.schedule.warmup = 200;
  return cfg;
}

Outcome stability_trend() {
  double psb_worst = 0, rec_worst = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto pc = stability_config(seed, psb::EncoderKind::psb);
    const auto data = psb::generate_dataset(100 + seed, 64, pc.data);
    const auto p = psb::stability_probe<float>(pc, data);
    const auto r = psb::stability_probe<float>(stability_config(seed, psb::EncoderKind::recurrent), data);
    psb_worst = std::max(psb_worst, p.ratio());
    rec_worst = std::max(rec_worst, r.ratio());
    per_seed += (seed ? " " : "") + fmt(p.ratio(), 3) + "/" + fmt(r.ratio(), 3);
  }
  return {psb_worst < 50, "max/median grad norm, worst seed: PSB " + fmt(psb_worst) + ", recurrent " +
                              fmt(rec_worst) + " (per seed psb/recurrent: " + per_seed + ")"};
}

Outcome metric_oracles() {
  std::size_t pairs = 0;
  double worst = 0;
  for (std::size_t n = 2; n <= 8; ++n) {
    const auto all = psb::testing::canonical_labelings(n, 3);
    for (const auto& a : all) {
      for (const auto& b : all) {
        worst = std::max(worst, std::abs(psb::adjusted_rand_index(a, b) - psb::testing::pair_ari(a, b)));
        // FG-ARI: labels 0 of b act as background.
        std::vector<int> pa, pb;
        for (std::size_t i = 0; i < n; ++i) {
          if (b[i] != 0) {
            pa.push_back(a[i]);
            pb.push_back(b[i]);
          }
        }
        if (pa.size() >= 2) {
          worst = std::max(worst, std::abs(psb::fg_ari(a, b) - psb::testing::pair_ari(pa, pb)));
        }
        ++pairs;
      }
    }
  }
  const double p = psb::psnr_from_mse(0.01);
  return {worst < 1e-12 && p == 20.0,
          std::to_string(pairs) + " labeling pairs, max error " + fmt(worst, 3) + "; PSNR(0.01) = " + fmt(p, 17)};
}

Outcome probing_em() {
  auto planted = psb::testing::planted_problems(200, 4, 3, 7);
  auto r = psb::perm_invariant_probe(planted.problems, {"position", "color", "shape"});
  std::size_t hits = 0;
  for (std::size_t e = 0; e < planted.perms.size(); ++e) hits += r.permutations[e] == planted.perms[e];
  const double frac = static_cast<double>(hits) / static_cast<double>(planted.perms.size());
  double r2 = 0;
  for (const auto& s : r.scores) {
    if (s.factor == "position") r2 = s.value;
  }
  bool monotone = true;
  for (std::size_t i = 1; i < r.em_objective.size(); ++i) {
    monotone = monotone && r.em_objective[i] <= r.em_objective[i - 1] * (1 + 1e-12);
  }
  return {frac >= 0.95 && r2 > 0.99 && monotone, "permutations recovered " + fmt(frac) + ", position R2 " +
                                                     fmt(r2, 6) + ", " + std::to_string(r.rounds) + " EM rounds, " +
                                                     (monotone ? "non-increasing" : "increasing") + " objective"};
}

// Sequential oracle: recomputes each transmittance from scratch.
psb::Color oracle_ray(const psb::Ray& ray) {
  psb::Color out{0, 0, 0};
  const std::size_t m = ray.samples.size();
  auto density = [&](std::size_t i, psb::Color& c) {
    const auto& s = ray.samples[i];
    double sigma = 0, shade = s.rho_static.value_or(1.0);
    psb::Color acc{0, 0, 0};
    for (std::size_t n = 0; n < s.sigmas.size(); ++n) {
      sigma += s.sigmas[n];
      for (int k = 0; k < 3; ++k) acc[k] += s.sigmas[n] * s.colors[n][k];
      if (!s.rho.empty()) shade *= s.rho[n];
    }
    for (int k = 0; k < 3; ++k) c[k] = sigma > 0 ? shade * acc[k] / sigma : 0.0;
    return sigma;
  };
  for (std::size_t i = 0; i < m; ++i) {
    psb::Color c;
    const double sigma = density(i, c);
    double optical = 0;
    for (std::size_t j = 0; j < i; ++j) {
      psb::Color unused;
      optical += density(j, unused) * ray.samples[j].length;
    }
    const double w = std::exp(-optical) * (1 - std::exp(-sigma * ray.samples[i].length));
    for (int k = 0; k < 3; ++k) out[k] += w * c[k];
  }
  if (ray.sky) {
    double optical = 0;
    for (std::size_t j = 0; j < m; ++j) {
      psb::Color unused;
      optical += density(j, unused) * ray.samples[j].length;
    }
    for (int k = 0; k < 3; ++k) out[k] += std::exp(-optical) * (*ray.sky)[k];
  }
  return out;
}

Outcome volume_compositing() {
  psb::Rng rng(17);
  auto unit = [&] { return psb::detail::unit(rng); };
  double worst = 0;
  bool shadeless = true;
  for (int trial = 0; trial < 1000; ++trial) {
    psb::Ray ray;
    if (trial % 2) ray.sky = psb::Color{unit(), unit(), unit()};
    const std::size_t samples = 1 + psb::detail::pick(rng, 8), sources = 1 + psb::detail::pick(rng, 4);
    const bool shadowed = trial % 3 == 0;
    for (std::size_t i = 0; i < samples; ++i) {
      psb::RaySample s;
      for (std::size_t n = 0; n < sources; ++n) {
        s.sigmas.push_back(unit() * 2);
        s.colors.push_back({unit(), unit(), unit()});
        if (shadowed) s.rho.push_back(unit());
      }
      if (shadowed) s.rho_static = unit();
      s.length = 0.05 + unit();
      ray.samples.push_back(s);
    }
    const auto got = psb::render_ray(ray).color;
    const auto want = oracle_ray(ray);
    for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(got[k] - want[k]));

    if (!shadowed) {
      auto lit = ray;
      for (auto& s : lit.samples) {
        s.rho.assign(s.sigmas.size(), 1.0);
        s.rho_static = 1.0;
      }
      shadeless = shadeless && psb::render_ray(lit).color == got;
    }
  }
  psb::Ray empty;
  empty.sky = psb::Color{0.3, 0.6, 0.9};
  for (int i = 0; i < 4; ++i) {
    psb::RaySample s;
    s.sigmas = {0.0, 0.0};
    s.colors = {{1, 0, 0}, {0, 1, 0}};
    empty.samples.push_back(s);
  }
  const bool sky = psb::render_ray(empty).color == *empty.sky;
  return {worst <= 1e-12 && sky && shadeless, "max oracle error " + fmt(worst, 3) + " on 1000 rays; zero density " +
                                                  (sky ? "returns" : "misses") + " the sky color; unit shadows " +
                                                  (shadeless ? "bitwise shadeless" : "differ")};
}

Outcome sliding_consistency() {
  const std::size_t steps = 24, w = 6, l = 4, d = 8, n = 3;
  auto cfg = encoder_config(n, d);
  cfg.window = w;
  psb::ParamStore<double> store;
  psb::Rng prng(33);
  psb::PsbEncoder<double> enc(cfg, store, prng);
  psb::testing::perturb(store, 133);
  const auto e = features(steps, l, d, 34);
  Tape<double> tape(&store);
  const auto slid = enc.encode_sliding(tape, tape.constant(e)).value();
  double worst = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t s = t + 1 >= w ? t + 1 - w : 0, len = t + 1 - s;
    Tensor<double> window({len, l, d},
                          std::vector<double>(e.data().begin() + s * l * d, e.data().begin() + (t + 1) * l * d));
    const auto alone = enc.encode(store, window);
    for (std::size_t i = 0; i < n * d; ++i) {
      worst = std::max(worst, std::abs(slid[t * n * d + i] - alone[(len - 1) * n * d + i]));
    }
  }
  return {worst <= 1e-10, "max deviation " + fmt(worst, 3) + " over 24 steps"};
}

Outcome learning_smoke() {
  psb::RunConfig cfg;
  cfg.model.psb.dim = 64;
  cfg.model.psb.slots = 4;
  cfg.model.psb.mlp_hidden = 256;
  cfg.model.decoder_hidden = 64;
  cfg.model.precision = "float32";
  cfg.train.steps = 5000;
  cfg.train.batch = 4;
  cfg.train.clip = 1.0;
  cfg.train.schedule.peak = 6e-4;
  cfg.train.schedule.warmup = 300;
  const auto t0 = Clock::now();
  const auto data = psb::generate_dataset(11, 500, cfg.data);
  psb::Trainer<float> trainer(cfg, data);
  const auto before = psb::evaluate(trainer.model(), data, psb::Grouping::per_video);
  while (trainer.step() < cfg.train.steps) trainer.train_step();
  const auto after = psb::evaluate(trainer.model(), data, psb::Grouping::per_video);
  const double s = seconds_since(t0);
  const double margin = after.fg_ari - after.fg_ari_baseline;
  return {after.mse <= 0.3 * before.mse && margin >= 0.1 && s < 1800,
          "MSE " + fmt(before.mse) + " -> " + fmt(after.mse) + " (ratio " + fmt(after.mse / before.mse, 3) +
              "), FG-ARI " + fmt(after.fg_ari, 3) + " vs baseline " + fmt(after.fg_ari_baseline, 3) + ", " +
              fmt(s / 60, 3) + " min"};
}

const std::vector<std::pair<std::string, std::function<Outcome()>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Outcome()>>> all{
      {"gradient fidelity", gradient_fidelity},
      {"causality", causality},
      {"inverted-attention normalization", inverted_normalization},
      {"slot permutation equivariance", equivariance},
      {"attention memory formulas", memory_formulas},
      {"speed trend", speed_trend},
      {"stability trend", stability_trend},
      {"metric oracles", metric_oracles},
      {"probing EM", probing_em},
      {"volume compositing", volume_compositing},
      {"desk-scale learning", learning_smoke},
      {"sliding-window consistency", sliding_consistency},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) which.push_back(std::atoi(argv[i]));
  if (which.empty()) {
    for (int i = 1; i <= 12; ++i) which.push_back(i);
  }
  bool failed = false, limited = false;
  for (int id : which) {
    if (id < 1 || id > 12) {
      std::cerr << "unknown criterion " << id << "\n";
      return 2;
    }
    const auto& [name, run] = criteria()[id - 1];
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << "criterion " << id << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << ": " << o.detail
              << std::endl;
    if (!o.pass) (o.hardware_limited ? limited : failed) = true;
  }
  if (failed) return 1;
  return limited ? kSkip : 0;
}
