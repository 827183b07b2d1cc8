// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "psb/errors.hpp"
#include "psb/modules.hpp"
#include "psb/ops.hpp"

namespace psb {

/// Pixel-center coordinates in [-1, 1]: rows (y, x) for an h x w grid.
template <class Real>
Tensor<Real> grid_coords(std::size_t h, std::size_t w) {
  Tensor<Real> out({h * w, 2});
  auto axis = [](std::size_t i, std::size_t n) {
    return static_cast<Real>((2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n) - 1.0);
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      out[(y * w + x) * 2] = axis(y, h);
      out[(y * w + x) * 2 + 1] = axis(x, w);
    }
  }
  return out;
}

/// Frames [T, C, H, W] -> non-overlapping patches [T*L, C*P*P], patches in
/// row-major grid order, each flattened as (c, dy, dx).
template <class Real>
Tensor<Real> extract_patches(const Tensor<Real>& frames, std::size_t patch) {
  if (frames.rank() != 4) throw ShapeError("extract_patches: expected [T,C,H,W]");
  const std::size_t t = frames.dim(0), c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("extract_patches: " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch, width = c * patch * patch;
  Tensor<Real> out({t * gh * gw, width});
  for (std::size_t tt = 0; tt < t; ++tt) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        Real* row = out.data().data() + ((tt * gh + py) * gw + px) * width;
        for (std::size_t cc = 0; cc < c; ++cc) {
          for (std::size_t dy = 0; dy < patch; ++dy) {
            for (std::size_t dx = 0; dx < patch; ++dx) {
              *row++ = frames[((tt * c + cc) * h + py * patch + dy) * w + px * patch + dx];
            }
          }
        }
      }
    }
  }
  return out;
}

/// Frames [T, 3, H, W] -> per-pixel colors [T, H*W, 3].
template <class Real>
Tensor<Real> frames_to_pixels(const Tensor<Real>& frames) {
  if (frames.rank() != 4) throw ShapeError("frames_to_pixels: expected [T,C,H,W]");
  const std::size_t t = frames.dim(0), c = frames.dim(1), p = frames.dim(2) * frames.dim(3);
  Tensor<Real> out({t, p, c});
  for (std::size_t tt = 0; tt < t; ++tt) {
    for (std::size_t cc = 0; cc < c; ++cc) {
      for (std::size_t i = 0; i < p; ++i) out[(tt * p + i) * c + cc] = frames[(tt * c + cc) * p + i];
    }
  }
  return out;
}

/// Per-pixel colors [T, H*W, 3] -> frames [T, 3, H, W].
template <class Real>
Tensor<Real> pixels_to_frames(const Tensor<Real>& pixels, std::size_t h, std::size_t w) {
  const std::size_t t = pixels.dim(0), p = pixels.dim(1), c = pixels.dim(2);
  if (p != h * w) throw ShapeError("pixels_to_frames: pixel count mismatch");
  Tensor<Real> out({t, c, h, w});
  for (std::size_t tt = 0; tt < t; ++tt) {
    for (std::size_t cc = 0; cc < c; ++cc) {
      for (std::size_t i = 0; i < p; ++i) out[(tt * c + cc) * p + i] = pixels[(tt * p + i) * c + cc];
    }
  }
  return out;
}

struct PatchEmbedConfig {
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t dim = 64;
};

/// Linear patch embedding plus a projected patch-center coordinate, then
/// LayerNorm and a two-layer GELU MLP.
template <class Real>
class PatchEmbed {
 public:
  PatchEmbed(const PatchEmbedConfig& cfg, ParamStore<Real>& store, Rng& rng,
             const std::string& prefix = "embed")
      : cfg_(cfg) {
    const std::size_t in = cfg.channels * cfg.patch * cfg.patch;
    proj_ = make_linear(store, prefix + ".proj", in, cfg.dim, true, rng);
    pos_ = make_linear(store, prefix + ".pos", 2, cfg.dim, true, rng);
    ln_ = make_layer_norm(store, prefix + ".ln", cfg.dim);
    mlp_ = make_mlp(store, prefix + ".mlp", cfg.dim, cfg.dim, cfg.dim, rng);
  }

  const PatchEmbedConfig& config() const { return cfg_; }
  const LinearRef& projection() const { return proj_; }
  const LinearRef& position() const { return pos_; }

  std::size_t tokens(std::size_t h, std::size_t w) const {
    return (h / cfg_.patch) * (w / cfg_.patch);
  }

  /// Frames [T, C, H, W] -> features [T, L, D].
  Var<Real> operator()(Tape<Real>& tape, const Tensor<Real>& frames) const {
    if (frames.rank() != 4 || frames.dim(1) != cfg_.channels) {
      throw ShapeError("patch_embed: expected [T," + std::to_string(cfg_.channels) +
                       ",H,W], got " + to_string(frames.shape()));
    }
    const std::size_t t = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
    auto patches = tape.constant(extract_patches(frames, cfg_.patch));
    const std::size_t l = tokens(h, w);
    auto centers = tape.constant(grid_coords<Real>(h / cfg_.patch, w / cfg_.patch));
    auto x = reshape(apply(tape, proj_, patches), {t, l, cfg_.dim});
    auto pe = apply(tape, pos_, centers);
    x = add(x, repeat0(pe, t));
    return apply(tape, mlp_, apply(tape, ln_, x));
  }

 private:
  PatchEmbedConfig cfg_;
  LinearRef proj_, pos_;
  LayerNormRef ln_;
  MlpRef mlp_;
};

struct DecoderConfig {
  std::size_t dim = 64;     // slot width
  std::size_t hidden = 64;  // per-position MLP width
};

/// Decoder outputs with pixels flattened and channels last: rgb [T,N,P,3],
/// logits and masks [T,N,P], mixture [T,P,3].
template <class Real>
struct DecoderVars {
  Var<Real> rgb, logits, masks, mixture;
};

/// One decoded frame in image layout.
template <class Real>
struct DecoderOutput {
  Tensor<Real> rgb_per_slot;  // [N, 3, H, W]
  Tensor<Real> alpha_logits;  // [N, 1, H, W]
  Tensor<Real> mixture;       // [3, H, W]
  Tensor<Real> masks;         // [N, H, W]
};

/// Spatial broadcast decoder with a per-position MLP in place of the CNN.
/// Each normalized slot is tiled over the grid, a projected coordinate
/// embedding is added, and a shared MLP emits RGB plus an alpha logit.
/// Masks are a softmax over slots and mix the per-slot images.
template <class Real>
class BroadcastDecoder {
 public:
  BroadcastDecoder(const DecoderConfig& cfg, ParamStore<Real>& store, Rng& rng,
                   const std::string& prefix = "decoder")
      : cfg_(cfg) {
    ln_ = make_layer_norm(store, prefix + ".slot_ln", cfg.dim);
    pos_ = make_linear(store, prefix + ".pos", 2, cfg.dim, true, rng);
    fc1_ = make_linear(store, prefix + ".fc1", cfg.dim, cfg.hidden, true, rng);
    fc2_ = make_linear(store, prefix + ".fc2", cfg.hidden, cfg.hidden, true, rng);
    fc3_ = make_linear(store, prefix + ".fc3", cfg.hidden, 4, true, rng);
  }

  const DecoderConfig& config() const { return cfg_; }
  const LinearRef& position() const { return pos_; }

  /// Slots [T, N, D] -> decoder outputs on an h x w grid.
  DecoderVars<Real> decode(Tape<Real>& tape, Var<Real> slots, std::size_t h,
                           std::size_t w) const {
    if (slots.value().rank() != 3 || slots.dim(2) != cfg_.dim) {
      throw ShapeError("broadcast_decode: slots must be [T,N," + std::to_string(cfg_.dim) +
                       "], got " + to_string(slots.shape()));
    }
    const std::size_t t = slots.dim(0), n = slots.dim(1), p = h * w;
    auto s = reshape(apply(tape, ln_, slots), {t * n, cfg_.dim});
    auto a = apply(tape, fc1_, s);
    // fc1(slot + pe) = fc1(slot) + W1 pe: the grid term is shared by all slots.
    auto pe = apply(tape, pos_, tape.constant(grid_coords<Real>(h, w)));
    auto b = linear(pe, tape.param(fc1_.w));
    auto hid = gelu(outer_add(a, b));
    hid = gelu(apply(tape, fc2_, hid));
    auto out = reshape(apply(tape, fc3_, hid), {t, n, p, 4});
    DecoderVars<Real> dv{narrow_last(out, 0, 3), reshape(narrow_last(out, 3, 1), {t, n, p}),
                         out, out};
    dv.masks = softmax(dv.logits, 1);
    dv.mixture = weighted_sum_slots(dv.rgb, dv.masks);
    return dv;
  }

  /// Decodes one time-step's slots [N, D] into image-layout outputs.
  DecoderOutput<Real> decode_frame(const ParamStore<Real>& store, const Tensor<Real>& slots,
                                   std::size_t h, std::size_t w) const {
    Tape<Real> tape(&store);
    const std::size_t n = slots.dim(0), p = h * w;
    auto dv = decode(tape, tape.constant(slots.reshaped({1, n, slots.dim(1)})), h, w);
    DecoderOutput<Real> out;
    out.rgb_per_slot = pixels_to_frames(dv.rgb.value().reshaped({n, p, 3}), h, w);
    out.alpha_logits = dv.logits.value().reshaped({n, 1, h, w});
    out.mixture = pixels_to_frames(dv.mixture.value(), h, w).reshaped({3, h, w});
    out.masks = dv.masks.value().reshaped({n, h, w});
    return out;
  }

 private:
  DecoderConfig cfg_;
  LayerNormRef ln_;
  LinearRef pos_, fc1_, fc2_, fc3_;
};

/// Mean squared error over all elements.
template <class Real>
Var<Real> recon_loss(Var<Real> pred, const Tensor<Real>& target) {
  return mse(pred, target);
}

template <class Real>
Real recon_loss(const Tensor<Real>& pred, const Tensor<Real>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("recon_loss: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  }
  Real s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Real d = pred[i] - target[i];
    s += d * d;
  }
  return s / static_cast<Real>(pred.size());
}

/// Per-pixel argmax over slots of decoder masks [T, N, P] -> labels [T, P].
template <class Real>
std::vector<int> argmax_slots(const Tensor<Real>& masks) {
  const std::size_t t = masks.dim(0), n = masks.dim(1), p = masks.dim(2);
  std::vector<int> labels(t * p, 0);
  for (std::size_t tt = 0; tt < t; ++tt) {
    for (std::size_t i = 0; i < p; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < n; ++k) {
        if (masks[(tt * n + k) * p + i] > masks[(tt * n + best) * p + i]) best = k;
      }
      labels[tt * p + i] = static_cast<int>(best);
    }
  }
  return labels;
}

}  // namespace psb
