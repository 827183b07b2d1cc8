// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "psb/config.hpp"
#include "psb/ops.hpp"
#include "psb/optim.hpp"
#include "psb/parallel.hpp"
#include "psb/psb_encoder.hpp"
#include "psb/random.hpp"
#include "psb/recurrent.hpp"

namespace psb {

/// Encoder variants understood by the benchmark: "psb", "psb-joint" and
/// "recurrent".
struct BenchRow {
  std::string encoder;
  std::size_t steps = 0, slots = 0, tokens = 0, dim = 0;
  int workers = 1;
  double mean_s = 0, std_s = 0;
  std::uint64_t joint_elements = 0, decoupled_elements = 0;
  double peak_grad_norm = 0;
};

struct BenchOptions {
  std::vector<std::string> encoders{"psb", "recurrent"};
  std::vector<std::size_t> steps{6, 12, 18, 24};
  std::size_t slots = 4, tokens = 64, dim = 64;
  std::size_t reps = 5, warmup = 2;
  int workers = 1;
  std::uint64_t seed = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;

  std::string csv() const {
    std::ostringstream os;
    os << "encoder,T,N,L,D,workers,mean_step_s,std_step_s,joint_attention_elements,"
          "decoupled_attention_elements,peak_grad_norm\n";
    os << std::setprecision(9);
    for (const auto& r : rows) {
      os << r.encoder << ',' << r.steps << ',' << r.slots << ',' << r.tokens << ',' << r.dim << ','
         << r.workers << ',' << r.mean_s << ',' << r.std_s << ',' << r.joint_elements << ','
         << r.decoupled_elements << ',' << r.peak_grad_norm << '\n';
    }
    return os.str();
  }

  /// Mean step time of `encoder` at `steps`, or a negative value if absent.
  double time_of(const std::string& encoder, std::size_t steps) const {
    for (const auto& r : rows) {
      if (r.encoder == encoder && r.steps == steps) return r.mean_s;
    }
    return -1;
  }

  /// Step time against T, one polyline per encoder.
  std::string svg() const {
    const double w = 640, h = 400, left = 70, right = 150, top = 30, bottom = 50;
    std::map<std::string, std::vector<std::pair<double, double>>> lines;
    double tmax = 1, ymax = 0;
    for (const auto& r : rows) {
      lines[r.encoder].emplace_back(static_cast<double>(r.steps), r.mean_s);
      tmax = std::max(tmax, static_cast<double>(r.steps));
      ymax = std::max(ymax, r.mean_s);
    }
    if (ymax <= 0) ymax = 1;
    ymax *= 1.1;
    auto px = [&](double t) { return left + t / tmax * (w - left - right); };
    auto py = [&](double s) { return h - bottom - s / ymax * (h - top - bottom); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << px(tmax) << "\" y2=\""
       << py(0) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << left << "\" y2=\""
       << top << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double s = ymax * i / 4;
      os << "<text x=\"" << left - 6 << "\" y=\"" << py(s) + 4 << "\" text-anchor=\"end\">"
         << std::setprecision(3) << s << std::setprecision(2) << "</text>\n";
    }
    std::vector<double> ticks;
    for (const auto& r : rows) ticks.push_back(static_cast<double>(r.steps));
    std::sort(ticks.begin(), ticks.end());
    ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
    for (double t : ticks) {
      os << "<text x=\"" << px(t) << "\" y=\"" << py(0) + 18 << "\" text-anchor=\"middle\">"
         << static_cast<long long>(t) << "</text>\n";
    }
    os << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 10
       << "\" text-anchor=\"middle\">episode length T</text>\n";
    os << "<text x=\"16\" y=\"" << (top + h - bottom) / 2 << "\" text-anchor=\"middle\" "
       << "transform=\"rotate(-90 16 " << (top + h - bottom) / 2 << ")\">seconds per step</text>\n";
    std::size_t k = 0;
    for (auto& [name, pts] : lines) {
      std::sort(pts.begin(), pts.end());
      const char* c = colors[k % 5];
      os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
      for (const auto& [t, s] : pts) os << px(t) << ',' << py(s) << ' ';
      os << "\"/>\n";
      for (const auto& [t, s] : pts) {
        os << "<circle cx=\"" << px(t) << "\" cy=\"" << py(s) << "\" r=\"3\" fill=\"" << c << "\"/>\n";
      }
      const double ly = top + 18.0 * static_cast<double>(k);
      os << "<line x1=\"" << w - right + 15 << "\" y1=\"" << ly << "\" x2=\"" << w - right + 35
         << "\" y2=\"" << ly << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
      os << "<text x=\"" << w - right + 40 << "\" y=\"" << ly + 4 << "\">" << name << "</text>\n";
      ++k;
    }
    os << "</svg>\n";
    return os.str();
  }
};

namespace detail {

template <class Real>
struct BenchEncoder {
  ParamStore<Real> store;
  std::optional<PsbEncoder<Real>> psb;
  std::optional<RecurrentEncoder<Real>> recurrent;

  BenchEncoder(const std::string& variant, const BenchOptions& opt, std::size_t steps) {
    Rng rng(derive_seed(opt.seed, {0xbe7c}));
    if (variant == "recurrent") {
      RecurrentConfig c;
      c.slots = opt.slots;
      c.dim = opt.dim;
      c.mlp_hidden = 4 * opt.dim;
      recurrent.emplace(c, store, rng);
      return;
    }
    if (variant != "psb" && variant != "psb-joint") {
      throw ConfigError("bench: unknown encoder '" + variant + "'");
    }
    PsbConfig c;
    c.slots = opt.slots;
    c.dim = opt.dim;
    c.mlp_hidden = 4 * opt.dim;
    c.t_max = std::max(c.t_max, steps);
    c.interaction = variant == "psb" ? Interaction::decoupled : Interaction::joint;
    psb.emplace(c, store, rng);
  }

  Var<Real> encode(Tape<Real>& tape, Var<Real> e) const {
    return psb ? psb->encode(tape, e, 0) : recurrent->encode(tape, e);
  }
};

}  // namespace detail

/// Times forward and backward of each encoder on random features
/// [T, L, D]; the loss is the mean squared slot value.
template <class Real = double>
BenchReport bench(const BenchOptions& opt) {
  if (opt.reps < 5 || opt.warmup < 2) {
    throw ConfigError("bench: need at least 5 timed repetitions after 2 warm-up runs");
  }
  WorkerScope scope(opt.workers);
  BenchReport rep;
  for (const auto& variant : opt.encoders) {
    for (std::size_t steps : opt.steps) {
      detail::BenchEncoder<Real> enc(variant, opt, steps);
      Rng rng(derive_seed(opt.seed, {0xfea7, steps}));
      const auto features = normal_tensor<Real>({steps, opt.tokens, opt.dim}, rng);
      BenchRow row;
      row.encoder = variant;
      row.steps = steps;
      row.slots = opt.slots;
      row.tokens = opt.tokens;
      row.dim = opt.dim;
      row.workers = opt.workers;
      row.joint_elements = interaction_attention_elements(opt.slots, steps, Interaction::joint);
      row.decoupled_elements = interaction_attention_elements(opt.slots, steps, Interaction::decoupled);
      std::vector<double> times;
      for (std::size_t r = 0; r < opt.warmup + opt.reps; ++r) {
        enc.store.zero_grad();
        const auto start = std::chrono::steady_clock::now();
        Tape<Real> tape(&enc.store);
        auto slots = enc.encode(tape, tape.constant(features));
        auto loss = mean(mul(slots, slots));
        tape.backward(loss, enc.store);
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (r >= opt.warmup) {
          times.push_back(s);
          row.peak_grad_norm = std::max(row.peak_grad_norm, global_grad_norm(enc.store));
        }
      }
      double m = 0;
      for (double t : times) m += t;
      m /= static_cast<double>(times.size());
      double v = 0;
      for (double t : times) v += (t - m) * (t - m);
      row.mean_s = m;
      row.std_s = std::sqrt(v / static_cast<double>(times.size() - 1));
      rep.rows.push_back(row);
    }
  }
  return rep;
}

}  // namespace psb
