// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "psb/attention.hpp"
#include "psb/modules.hpp"
#include "psb/ops.hpp"
#include "psb/random.hpp"

namespace psb {

enum class InitMode { learned, random };
enum class Interaction { decoupled, joint };

inline std::string to_string(InitMode m) { return m == InitMode::learned ? "learned" : "random"; }
inline std::string to_string(Interaction i) {
  return i == Interaction::decoupled ? "decoupled" : "joint";
}

struct PsbConfig {
  std::size_t layers = 3;
  std::size_t slots = 4;
  std::size_t dim = 192;
  std::size_t bottom_up_heads = 1;
  std::size_t time_heads = 4;
  std::size_t object_heads = 4;
  std::size_t mlp_hidden = 768;
  InitMode init = InitMode::learned;
  bool causal = true;
  bool inverted = true;
  Interaction interaction = Interaction::decoupled;
  std::size_t t_max = 6;   // relative-offset horizon, also the max encode length
  std::size_t window = 6;  // sliding-window length for longer sequences
};

/// Attention-matrix entries of one slot-interaction step: (NT)^2 when all
/// slots interact jointly, N*T^2 + T*N^2 for the decoupled time/object axes.
inline std::uint64_t interaction_attention_elements(std::size_t slots, std::size_t steps,
                                                    Interaction mode) {
  const std::uint64_t n = slots, t = steps;
  return mode == Interaction::joint ? (n * t) * (n * t) : n * t * t + t * n * n;
}

/// The Parallelizable Spatiotemporal Binder: M residual blocks refining
/// T x N slots against T x L features, every time-step in parallel.
template <class Real>
class PsbEncoder {
 public:
  struct Block {
    LayerNormRef ln_slots_ca, ln_feat_ca;
    AttentionRef cross;
    ParamId rel_cross;
    LayerNormRef ln_time, ln_object, ln_joint;
    AttentionRef time, object, joint;
    ParamId rel_time, rel_joint;
    LayerNormRef ln_mlp;
    MlpRef mlp;
  };

  PsbEncoder(const PsbConfig& cfg, ParamStore<Real>& store, Rng& rng,
             const std::string& prefix = "psb")
      : cfg_(cfg) {
    validate();
    const std::size_t d = cfg.dim, n = cfg.slots;
    if (cfg.init == InitMode::learned) {
      init_slots_ = store.add(prefix + ".init.slots", normal_tensor<Real>({n, d}, rng), false);
    } else {
      init_mean_ = store.add(prefix + ".init.mean", normal_tensor<Real>({d}, rng), false);
      init_log_std_ = store.add(prefix + ".init.log_std", Tensor<Real>({d}), false);
    }
    const std::size_t width = 2 * cfg.t_max - 1;
    for (std::size_t m = 0; m < cfg.layers; ++m) {
      const std::string b = prefix + ".block" + std::to_string(m);
      Block blk;
      blk.ln_slots_ca = make_layer_norm(store, b + ".ca.ln_q", d);
      blk.ln_feat_ca = make_layer_norm(store, b + ".ca.ln_kv", d);
      blk.cross = make_attention(store, b + ".ca", d, cfg.bottom_up_heads, rng, InitStyle::zero);
      blk.rel_cross = store.add(b + ".ca.rel_bias", Tensor<Real>({cfg.bottom_up_heads, width}));
      if (cfg.interaction == Interaction::decoupled) {
        blk.ln_time = make_layer_norm(store, b + ".sa_time.ln", d);
        blk.time = make_attention(store, b + ".sa_time", d, cfg.time_heads, rng, InitStyle::zero);
        blk.rel_time = store.add(b + ".sa_time.rel_bias", Tensor<Real>({cfg.time_heads, width}));
        blk.ln_object = make_layer_norm(store, b + ".sa_object.ln", d);
        blk.object =
            make_attention(store, b + ".sa_object", d, cfg.object_heads, rng, InitStyle::zero);
      } else {
        blk.ln_joint = make_layer_norm(store, b + ".sa_joint.ln", d);
        blk.joint = make_attention(store, b + ".sa_joint", d, cfg.time_heads, rng, InitStyle::zero);
        blk.rel_joint =
            store.add(b + ".sa_joint.rel_bias", Tensor<Real>({cfg.time_heads, width}));
      }
      blk.ln_mlp = make_layer_norm(store, b + ".mlp.ln", d);
      blk.mlp = make_mlp(store, b + ".mlp", d, cfg.mlp_hidden, d, rng, InitStyle::zero);
      blocks_.push_back(blk);
    }
  }

  const PsbConfig& config() const { return cfg_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::optional<ParamId> learned_init() const { return init_slots_; }
  std::optional<ParamId> init_mean() const { return init_mean_; }
  std::optional<ParamId> init_log_std() const { return init_log_std_; }

  /// Initial slots [T, N, D], shared by every time-step. Random mode draws
  /// N vectors once from N(mean, exp(log_std)) using `seed`.
  Var<Real> init_slots(Tape<Real>& tape, std::size_t steps, std::uint64_t seed) const {
    if (cfg_.init == InitMode::learned) return repeat0(tape.param(*init_slots_), steps);
    Rng rng(derive_seed(seed, {0x51075}));
    auto eps = tape.constant(normal_tensor<Real>({cfg_.slots, cfg_.dim}, rng));
    auto std_dev = repeat0(exp(tape.param(*init_log_std_)), cfg_.slots);
    auto mean = repeat0(tape.param(*init_mean_), cfg_.slots);
    return repeat0(add(mean, mul(std_dev, eps)), steps);
  }

  /// Bottom-up step: slots of each time-step attend to the features of all
  /// visible time-steps; slots of one time-step compete for every feature.
  Var<Real> cross_attention(Tape<Real>& tape, const Block& blk, Var<Real> s, Var<Real> e,
                            long long t0 = 0,
                            AttentionWeights<Real>* inspect = nullptr) const {
    const std::size_t t = s.dim(0), n = s.dim(1), d = s.dim(2), l = e.dim(1);
    const std::size_t h = blk.cross.heads;
    auto xq = reshape(apply(tape, blk.ln_slots_ca, s), {1, t * n, d});
    auto xkv = reshape(apply(tape, blk.ln_feat_ca, e), {1, t * l, d});
    auto q = project_heads(xq, tape.param(blk.cross.w_q), h, false);
    auto k = project_heads(xkv, tape.param(blk.cross.w_k), h, false);
    auto v = project_heads(xkv, tape.param(blk.cross.w_v), h, false);
    auto bias = expand_blocks(rel_bias_lookup(tape.param(blk.rel_cross), t, t, t0, t0), n, l);
    auto mask = cfg_.causal ? time_mask(t, n, l) : nullptr;
    auto kind = cfg_.inverted ? AttentionKind::inverted : AttentionKind::dot;
    auto o = attention(q, k, v, kind, mask, bias, n, inspect);
    return reshape(apply(tape, blk.cross.out, merge_heads(o, false)), {t, n, d});
  }

  /// Slots sharing an index attend across time (causal, relative bias).
  Var<Real> time_attention(Tape<Real>& tape, const Block& blk, Var<Real> s,
                           long long t0 = 0) const {
    const std::size_t t = s.dim(0);
    const std::size_t h = blk.time.heads;
    auto x = apply(tape, blk.ln_time, s);
    auto q = project_heads(x, tape.param(blk.time.w_q), h, true);
    auto k = project_heads(x, tape.param(blk.time.w_k), h, true);
    auto v = project_heads(x, tape.param(blk.time.w_v), h, true);
    auto bias = rel_bias_lookup(tape.param(blk.rel_time), t, t, t0, t0);
    auto mask = cfg_.causal ? time_mask(t, 1, 1) : nullptr;
    auto o = attention(q, k, v, AttentionKind::dot, mask, bias);
    return apply(tape, blk.time.out, merge_heads(o, true));
  }

  /// Slots of one time-step attend to each other (no mask, no bias).
  Var<Real> object_attention(Tape<Real>& tape, const Block& blk, Var<Real> s) const {
    const std::size_t h = blk.object.heads;
    auto x = apply(tape, blk.ln_object, s);
    auto q = project_heads(x, tape.param(blk.object.w_q), h, false);
    auto k = project_heads(x, tape.param(blk.object.w_k), h, false);
    auto v = project_heads(x, tape.param(blk.object.w_v), h, false);
    auto o = attention(q, k, v, AttentionKind::dot);
    return apply(tape, blk.object.out, merge_heads(o, false));
  }

  /// Ablation: one self-attention over all T*N slot tokens. Token (t,n) sees
  /// (t',n') iff t' <= t when causal; bias by t - t'.
  Var<Real> joint_attention(Tape<Real>& tape, const Block& blk, Var<Real> s,
                            long long t0 = 0) const {
    const std::size_t t = s.dim(0), n = s.dim(1), d = s.dim(2);
    const std::size_t h = blk.joint.heads;
    auto x = reshape(apply(tape, blk.ln_joint, s), {1, t * n, d});
    auto q = project_heads(x, tape.param(blk.joint.w_q), h, false);
    auto k = project_heads(x, tape.param(blk.joint.w_k), h, false);
    auto v = project_heads(x, tape.param(blk.joint.w_v), h, false);
    auto bias = expand_blocks(rel_bias_lookup(tape.param(blk.rel_joint), t, t, t0, t0), n, n);
    auto mask = cfg_.causal ? time_mask(t, n, n) : nullptr;
    auto o = attention(q, k, v, AttentionKind::dot, mask, bias);
    return reshape(apply(tape, blk.joint.out, merge_heads(o, false)), {t, n, d});
  }

  /// One PSB block; every sub-step is pre-normalized and residual.
  Var<Real> block(Tape<Real>& tape, std::size_t layer, Var<Real> s, Var<Real> e,
                  long long t0 = 0) const {
    const Block& blk = blocks_.at(layer);
    s = add(s, cross_attention(tape, blk, s, e, t0));
    if (cfg_.interaction == Interaction::decoupled) {
      s = add(s, time_attention(tape, blk, s, t0));
      s = add(s, object_attention(tape, blk, s));
    } else {
      s = add(s, joint_attention(tape, blk, s, t0));
    }
    return add(s, apply(tape, blk.mlp, apply(tape, blk.ln_mlp, s)));
  }

  /// Runs the stack from explicit initial slots.
  Var<Real> encode_from(Tape<Real>& tape, Var<Real> init, Var<Real> e, long long t0 = 0) const {
    check_features(e);
    if (init.shape() != Shape{e.dim(0), cfg_.slots, cfg_.dim}) {
      throw ShapeError("encode: initial slots " + to_string(init.shape()));
    }
    Var<Real> s = init;
    for (std::size_t m = 0; m < blocks_.size(); ++m) s = block(tape, m, s, e, t0);
    return s;
  }

  /// Features [T, L, D] -> slots [T, N, D]. `t0` is the absolute position of
  /// the first frame; only position differences reach the computation.
  Var<Real> encode(Tape<Real>& tape, Var<Real> e, std::uint64_t seed = 0,
                   long long t0 = 0) const {
    check_features(e);
    return encode_from(tape, init_slots(tape, e.dim(0), seed), e, t0);
  }

  /// Slots at t are the last-step slots of encoding frames
  /// [max(0, t-W+1), t]. Requires causal masking.
  Var<Real> encode_sliding(Tape<Real>& tape, Var<Real> e, std::uint64_t seed = 0) const {
    if (!cfg_.causal) throw std::invalid_argument("encode_sliding requires causal masking");
    const std::size_t steps = e.dim(0), w = cfg_.window;
    if (w == 0 || w > cfg_.t_max) throw std::invalid_argument("encode_sliding: bad window");
    std::vector<Var<Real>> per_step;
    per_step.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t start = t + 1 >= w ? t + 1 - w : 0;
      auto window = slice0(e, start, t - start + 1);
      auto s = encode(tape, window, seed);
      per_step.push_back(slice0(s, t - start, 1));
    }
    return concat0(per_step);
  }

  /// Convenience: encode a plain tensor without recording gradients.
  Tensor<Real> encode(const ParamStore<Real>& store, const Tensor<Real>& e,
                      std::uint64_t seed = 0, long long t0 = 0) const {
    Tape<Real> tape(&store);
    return encode(tape, tape.constant(e), seed, t0).value();
  }

 private:
  void validate() const {
    if (cfg_.slots == 0 || cfg_.dim < 2 || cfg_.t_max == 0) {
      throw std::invalid_argument("PsbConfig: slots, dim and t_max must be positive");
    }
    for (auto h : {cfg_.bottom_up_heads, cfg_.time_heads, cfg_.object_heads}) {
      if (h == 0 || cfg_.dim % h != 0) {
        throw std::invalid_argument("PsbConfig: dim must be divisible by every head count");
      }
    }
  }

  void check_features(Var<Real> e) const {
    if (e.value().rank() != 3 || e.dim(2) != cfg_.dim) {
      throw ShapeError("encode: features must be [T, L, " + std::to_string(cfg_.dim) + "], got " +
                       to_string(e.shape()));
    }
    if (e.dim(0) > cfg_.t_max) {
      throw std::invalid_argument("encode: T=" + std::to_string(e.dim(0)) +
                                  " exceeds t_max=" + std::to_string(cfg_.t_max) +
                                  " (use encode_sliding)");
    }
  }

  std::shared_ptr<const Mask> time_mask(std::size_t t, std::size_t rows,
                                        std::size_t cols) const {
    auto key = std::make_tuple(t, rows, cols);
    std::lock_guard lock(masks_->mutex);
    auto it = masks_->entries.find(key);
    if (it != masks_->entries.end()) return it->second;
    auto m = std::make_shared<const Mask>(expand_time_mask(causal_mask(t), rows, cols));
    masks_->entries.emplace(key, m);
    return m;
  }

  PsbConfig cfg_;
  std::optional<ParamId> init_slots_, init_mean_, init_log_std_;
  std::vector<Block> blocks_;
  struct MaskCache {
    std::mutex mutex;
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::shared_ptr<const Mask>>
        entries;
  };
  std::shared_ptr<MaskCache> masks_ = std::make_shared<MaskCache>();
};

}  // namespace psb
