// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "psb/autoenc.hpp"
#include "psb/compositing.hpp"
#include "psb/model.hpp"
#include "support.hpp"

using psb::Color;
using psb::Tape;
using psb::Tensor;

namespace {

psb::ModelConfig tiny_model(std::size_t slots = 2, std::size_t dim = 16) {
  psb::ModelConfig m;
  m.psb.layers = 2;
  m.psb.slots = slots;
  m.psb.dim = dim;
  m.psb.bottom_up_heads = 2;
  m.psb.time_heads = 2;
  m.psb.object_heads = 2;
  m.psb.mlp_hidden = 2 * dim;
  m.psb.t_max = 6;
  m.psb.window = 6;
  m.patch = 4;
  m.decoder_hidden = 16;
  return m;
}

Tensor<double> random_frames(std::size_t t, std::size_t h, std::size_t w, std::uint64_t seed) {
  psb::Rng rng(seed);
  return psb::uniform_tensor<double>({t, 3, h, w}, rng, 0.0, 1.0);
}

struct Decoder {
  psb::ParamStore<double> store;
  std::optional<psb::BroadcastDecoder<double>> dec;
  explicit Decoder(std::size_t dim, std::uint64_t seed = 1) {
    psb::Rng rng(seed);
    dec.emplace(psb::DecoderConfig{dim, 12}, store, rng);
  }
};

}  // namespace

TEST_CASE("patch layout helpers", "[autoenc]") {
  auto frames = random_frames(2, 8, 12, 1);
  auto patches = psb::extract_patches(frames, 4);
  CHECK(patches.shape() == psb::Shape{2 * 6, 48});
  // Patch (t=1, gy=1, gx=2), channel 2, offset (3, 1).
  CHECK(patches[(1 * 6 + 1 * 3 + 2) * 48 + 2 * 16 + 3 * 4 + 1] ==
        frames[((1 * 3 + 2) * 8 + 7) * 12 + 9]);
  auto pixels = psb::frames_to_pixels(frames);
  CHECK(pixels.shape() == psb::Shape{2, 96, 3});
  CHECK(psb::max_abs_diff(psb::pixels_to_frames(pixels, 8, 12), frames) == 0.0);
  CHECK_THROWS_AS(psb::extract_patches(frames, 5), psb::ShapeError);

  auto g = psb::grid_coords<double>(2, 4);
  CHECK(g[0] == -0.5);
  CHECK(g[1] == -0.75);
  CHECK(g[(1 * 4 + 3) * 2] == 0.5);
  CHECK(g[(1 * 4 + 3) * 2 + 1] == 0.75);
}

TEST_CASE("patch embed token counts", "[autoenc]") {
  psb::ParamStore<double> store;
  psb::Rng rng(2);
  psb::PatchEmbed<double> embed({3, 4, 8}, store, rng);
  CHECK(embed.tokens(32, 32) == 64);
  Tape<double> tape(&store);
  CHECK(embed(tape, random_frames(3, 4, 4, 3)).shape() == psb::Shape{3, 1, 8});
  CHECK(embed(tape, random_frames(2, 32, 32, 3)).shape() == psb::Shape{2, 64, 8});
}

TEST_CASE("zero image with zero position weights uses the bias pathway only", "[autoenc]") {
  psb::ParamStore<double> store;
  psb::Rng rng(4);
  psb::PatchEmbed<double> embed({3, 4, 8}, store, rng);
  psb::testing::perturb(store, 5);
  for (auto& v : store[embed.position().w].value.data()) v = 0;
  Tape<double> tape(&store);
  auto out = embed(tape, Tensor<double>({2, 3, 8, 8})).value();
  // Every token of every frame is the embedding of proj.b + pos.b.
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == out[i % 8]);
  auto other = embed(tape, random_frames(1, 8, 8, 6)).value();
  double moved = 0;
  for (std::size_t i = 0; i < other.size(); ++i) moved = std::max(moved, std::abs(other[i] - out[i]));
  CHECK(moved > 1e-3);
}

TEST_CASE("decoder masks form a simplex and mixture stays in the hull", "[autoenc]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Decoder d(6, seed);
    psb::testing::perturb(d.store, seed + 10, 0.5);
    psb::Rng rng(seed + 20);
    auto slots = psb::normal_tensor<double>({2, 3, 6}, rng);
    Tape<double> tape(&d.store);
    auto out = d.dec->decode(tape, tape.constant(slots), 4, 5);
    const auto& masks = out.masks.value();
    const auto& rgb = out.rgb.value();
    const auto& mix = out.mixture.value();
    CHECK(masks.shape() == psb::Shape{2, 3, 20});
    CHECK(rgb.shape() == psb::Shape{2, 3, 20, 3});
    CHECK(mix.shape() == psb::Shape{2, 20, 3});
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t p = 0; p < 20; ++p) {
        double total = 0;
        for (std::size_t n = 0; n < 3; ++n) {
          const double m = masks[(t * 3 + n) * 20 + p];
          CHECK(m >= 0);
          total += m;
        }
        CHECK(std::abs(total - 1) < 1e-12);
        for (std::size_t c = 0; c < 3; ++c) {
          double lo = 1e300, hi = -1e300, direct = 0;
          for (std::size_t n = 0; n < 3; ++n) {
            const double v = rgb[((t * 3 + n) * 20 + p) * 3 + c];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            direct += masks[(t * 3 + n) * 20 + p] * v;
          }
          const double m = mix[(t * 20 + p) * 3 + c];
          CHECK(m >= lo - 1e-12);
          CHECK(m <= hi + 1e-12);
          CHECK(std::abs(m - direct) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("decoder degenerate slot sets", "[autoenc]") {
  Decoder d(6, 3);
  psb::testing::perturb(d.store, 4, 0.5);
  psb::Rng rng(7);
  auto one = psb::normal_tensor<double>({1, 6}, rng);
  auto single = d.dec->decode_frame(d.store, one, 3, 3);
  for (auto m : single.masks.data()) CHECK(m == 1.0);
  CHECK(psb::max_abs_diff(single.mixture, single.rgb_per_slot.reshaped({3, 3, 3})) == 0.0);

  Tensor<double> twins({2, 6});
  for (std::size_t i = 0; i < 6; ++i) twins[i] = twins[6 + i] = one[i];
  auto pair = d.dec->decode_frame(d.store, twins, 3, 3);
  for (auto m : pair.masks.data()) CHECK(std::abs(m - 0.5) < 1e-12);
  CHECK(pair.alpha_logits.shape() == psb::Shape{2, 1, 3, 3});
}

TEST_CASE("reconstruction loss closed forms", "[autoenc]") {
  auto a = random_frames(1, 4, 4, 8);
  auto b = a;
  CHECK(psb::recon_loss(a, b) == 0.0);
  for (auto& v : b.data()) v += 0.1;
  CHECK(psb::recon_loss(a, b) == Catch::Approx(0.01).epsilon(1e-12));
  auto c = random_frames(1, 4, 4, 9);
  CHECK(psb::recon_loss(a, c) == psb::recon_loss(c, a));
  CHECK_THROWS_AS(psb::recon_loss(a, random_frames(2, 4, 4, 1)), psb::ShapeError);
}

TEST_CASE("argmax over slot masks", "[autoenc]") {
  Tensor<double> masks({1, 3, 2}, std::vector<double>{0.2, 0.5, 0.7, 0.1, 0.1, 0.4});
  CHECK(psb::argmax_slots(masks) == std::vector<int>{1, 0});
}

TEST_CASE("end-to-end autoencoder gradients match finite differences", "[autoenc]") {
  for (auto init : {psb::InitMode::learned, psb::InitMode::random}) {
    auto cfg = tiny_model();
    cfg.psb.init = init;
    psb::AutoEncoder<double> model(cfg, 3);
    psb::testing::perturb(model.store(), 4, 0.2);
    const auto frames = random_frames(2, 8, 8, 5);
    auto loss = [&](Tape<double>& tape) { return model.forward(tape, frames, 6).loss; };
    auto report = psb::grad_check(loss, model.store(), 1e-5, 1e-4);
    INFO(report.worst_param() << " " << report.max_rel_err);
    CHECK(report.passed());
  }
}

TEST_CASE("autoencoder with the recurrent encoder", "[autoenc]") {
  auto cfg = tiny_model(3, 8);
  cfg.encoder = psb::EncoderKind::recurrent;
  psb::AutoEncoder<double> model(cfg, 1);
  CHECK(model.recurrent() != nullptr);
  CHECK(model.psb() == nullptr);
  Tape<double> tape(&model.store());
  auto f = model.forward(tape, random_frames(3, 8, 8, 2), 0);
  CHECK(f.slots.shape() == psb::Shape{3, 3, 8});
  CHECK(f.decoded.mixture.shape() == psb::Shape{3, 64, 3});
}

TEST_CASE("sinusoidal scalar features", "[compositing]") {
  auto zero = psb::vectorize_scalar(0.0);
  CHECK(zero.size() == 16);
  for (std::size_t i = 0; i < 16; ++i) CHECK(zero[i] == (i % 2 ? 1.0 : 0.0));
  auto top = psb::vectorize_scalar(2.5, 8, 2.5);
  CHECK(std::abs(top[0]) < 1e-15);
  CHECK(top[1] == -1.0);
  CHECK_THROWS_AS(psb::vectorize_scalar(0.1, 7), psb::PreconditionError);
}

TEST_CASE("density-weighted color compositing", "[compositing]") {
  const Color red{1, 0, 0}, blue{0, 0, 1}, green{0, 1, 0};
  auto only = psb::composite_slots({0.0, 2.0, 0.0}, {red, blue, green});
  CHECK(only.sigma == 2.0);
  CHECK(only.color == blue);
  auto even = psb::composite_slots({1.5, 1.5}, {red, blue});
  CHECK(even.color == Color{0.5, 0, 0.5});
  auto mixed = psb::composite_slots({1.0, 3.0}, {red, blue});
  CHECK(mixed.color == Color{0.25, 0, 0.75});
  auto empty = psb::composite_slots({0.0, 0.0}, {red, blue});
  CHECK(empty.color == Color{0, 0, 0});
  auto with_static = psb::composite_slots({1.0}, {red}, psb::DensityColor{1.0, green});
  CHECK(with_static.sigma == 2.0);
  CHECK(with_static.color == Color{0.5, 0.5, 0});
  CHECK_THROWS_AS(psb::composite_slots({-1.0}, {red}), psb::PreconditionError);

  psb::Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(4);
    std::vector<Color> c(4);
    for (int n = 0; n < 4; ++n) {
      s[n] = psb::detail::unit(rng) * 3;
      c[n] = {psb::detail::unit(rng), psb::detail::unit(rng), psb::detail::unit(rng)};
    }
    auto a = psb::composite_slots(s, c);
    std::vector<double> s2{s[2], s[0], s[3], s[1]};
    std::vector<Color> c2{c[2], c[0], c[3], c[1]};
    auto b = psb::composite_slots(s2, c2);
    CHECK(std::abs(a.sigma - b.sigma) < 1e-14);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(a.color[k] - b.color[k]) < 1e-14);
  }
}

TEST_CASE("ray rendering edge cases", "[compositing]") {
  const Color sky{0.2, 0.4, 0.9}, red{1, 0, 0}, blue{0, 0, 1};
  psb::Ray clear;
  clear.sky = sky;
  for (int i = 0; i < 5; ++i) clear.samples.push_back({{0.0, 0.0}, {red, blue}});
  auto out = psb::render_ray(clear);
  CHECK(out.color == sky);
  CHECK(out.residual == 1.0);

  psb::Ray opaque;
  opaque.samples.push_back({{50.0}, {red}});
  opaque.samples.push_back({{1.0}, {blue}});
  auto front = psb::render_ray(opaque);
  CHECK(front.color[0] == Catch::Approx(1.0).epsilon(1e-15));
  CHECK(front.color[2] < 1e-20);

  psb::Ray bad;
  bad.samples.push_back({{1.0}, {red}, std::nullopt, 0.0});
  CHECK_THROWS_AS(psb::render_ray(bad), psb::PreconditionError);
}

TEST_CASE("ray weights and residual sum to one", "[compositing]") {
  psb::Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    psb::Ray ray;
    if (trial % 2) ray.sky = Color{psb::detail::unit(rng), psb::detail::unit(rng), psb::detail::unit(rng)};
    const int samples = 1 + static_cast<int>(psb::detail::pick(rng, 6));
    for (int i = 0; i < samples; ++i) {
      psb::RaySample s;
      for (int n = 0; n < 3; ++n) {
        s.sigmas.push_back(psb::detail::unit(rng) * 2);
        s.colors.push_back({psb::detail::unit(rng), psb::detail::unit(rng), psb::detail::unit(rng)});
      }
      s.length = 0.1 + psb::detail::unit(rng);
      ray.samples.push_back(s);
    }
    auto out = psb::render_ray(ray);
    double total = out.residual;
    for (double w : out.weights) total += w;
    CHECK(std::abs(total - 1) < 1e-12);
    for (double c : out.color) {
      CHECK(c >= 0);
      CHECK(c <= 1 + 1e-12);
    }
  }
}
