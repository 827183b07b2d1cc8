// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "json.hpp"
#include "psb/errors.hpp"
#include "psb/random.hpp"
#include "psb/tensor.hpp"

namespace psb {

enum class SpriteShape : int { square = 0, circle = 1, triangle = 2 };

inline const char* to_string(SpriteShape s) {
  switch (s) {
    case SpriteShape::square: return "square";
    case SpriteShape::circle: return "circle";
    case SpriteShape::triangle: return "triangle";
  }
  return "?";
}

/// Eight colors with dyadic components; black is reserved for background.
inline constexpr std::array<std::array<float, 3>, 8> kPalette{{
    {1.0f, 0.0f, 0.0f},
    {0.0f, 1.0f, 0.0f},
    {0.0f, 0.0f, 1.0f},
    {1.0f, 1.0f, 0.0f},
    {1.0f, 0.0f, 1.0f},
    {0.0f, 1.0f, 1.0f},
    {1.0f, 1.0f, 1.0f},
    {0.5f, 0.5f, 0.5f},
}};

inline constexpr std::array<int, 3> kSpriteRadii{3, 4, 5};

struct Vec2 {
  double x = 0, y = 0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

/// Ground-truth factors of one object over an episode.
struct ObjectTrack {
  SpriteShape shape = SpriteShape::square;
  int color = 0;   // palette index
  int radius = 3;  // pixels
  std::vector<Vec2> position;  // per time-step, pixel units (x right, y down)
  std::vector<Vec2> velocity;  // per time-step, pixels per frame
  friend bool operator==(const ObjectTrack&, const ObjectTrack&) = default;
};

struct Episode {
  Tensor<float> frames;              // [T, 3, H, W], values in [0, 1]
  std::vector<std::uint16_t> masks;  // [T, H, W]; 0 background, i = objects[i-1]
  std::vector<ObjectTrack> objects;

  std::size_t steps() const { return frames.dim(0); }
  std::size_t height() const { return frames.dim(2); }
  std::size_t width() const { return frames.dim(3); }
  friend bool operator==(const Episode&, const Episode&) = default;
};

struct SynthConfig {
  std::size_t steps = 6;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t min_objects = 2;
  std::size_t max_objects = 3;
  double min_speed = 0.5;
  double max_speed = 2.0;
};

namespace detail {

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double unit(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t pick(Rng& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(n)));
}

inline bool covers(const ObjectTrack& o, const Vec2& c, double px, double py) {
  const double dx = px - c.x, dy = py - c.y, r = o.radius;
  switch (o.shape) {
    case SpriteShape::square: return std::abs(dx) < r && std::abs(dy) < r;
    case SpriteShape::circle: return dx * dx + dy * dy < r * r;
    case SpriteShape::triangle: return dy > -r && dy < r && std::abs(dx) < (dy + r) / 2;
  }
  return false;
}

/// Advances one axis by v and reflects elastically off [lo, hi].
inline void reflect(double& p, double& v, double lo, double hi) {
  p += v;
  for (int i = 0; i < 8 && (p < lo || p > hi); ++i) {
    if (p < lo) p = 2 * lo - p;
    if (p > hi) p = 2 * hi - p;
    v = -v;
  }
}

}  // namespace detail

/// Trajectory of a sprite of radius r under elastic wall reflection.
inline void integrate_track(ObjectTrack& o, Vec2 start, Vec2 vel, std::size_t steps,
                            std::size_t h, std::size_t w) {
  o.position.assign(1, start);
  o.velocity.assign(1, vel);
  const double r = o.radius;
  for (std::size_t t = 1; t < steps; ++t) {
    Vec2 p = o.position.back(), v = o.velocity.back();
    detail::reflect(p.x, v.x, r, static_cast<double>(w) - r);
    detail::reflect(p.y, v.y, r, static_cast<double>(h) - r);
    o.position.push_back(p);
    o.velocity.push_back(v);
  }
}

/// Draws frames and masks from object tracks. Pixel centers sit at
/// (x + 0.5, y + 0.5); objects are painted in id order so higher ids occlude.
inline void render_episode(Episode& ep, std::size_t steps, std::size_t h, std::size_t w) {
  ep.frames = Tensor<float>({steps, 3, h, w});
  ep.masks.assign(steps * h * w, 0);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t id = 1; id <= ep.objects.size(); ++id) {
      const auto& o = ep.objects[id - 1];
      const Vec2 c = o.position.at(t);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          if (!detail::covers(o, c, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
            continue;
          }
          ep.masks[(t * h + y) * w + x] = static_cast<std::uint16_t>(id);
          for (std::size_t ch = 0; ch < 3; ++ch) {
            ep.frames[((t * 3 + ch) * h + y) * w + x] = kPalette[o.color][ch];
          }
        }
      }
    }
  }
}

/// Pure function of (seed, config).
inline Episode generate_episode(std::uint64_t seed, const SynthConfig& cfg) {
  if (cfg.height < 16 || cfg.width < 16 || cfg.steps == 0) {
    throw PreconditionError("generate_episode: need H, W >= 16 and T >= 1");
  }
  if (cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects) {
    throw PreconditionError("generate_episode: bad object count range");
  }
  Rng rng(derive_seed(seed, {0x5e7}));
  Episode ep;
  const std::size_t m = cfg.min_objects + detail::pick(rng, cfg.max_objects - cfg.min_objects + 1);
  for (std::size_t i = 0; i < m; ++i) {
    ObjectTrack o;
    o.shape = static_cast<SpriteShape>(detail::pick(rng, 3));
    o.color = static_cast<int>(detail::pick(rng, kPalette.size()));
    o.radius = kSpriteRadii[detail::pick(rng, kSpriteRadii.size())];
    const double r = o.radius;
    Vec2 p{r + detail::unit(rng) * (static_cast<double>(cfg.width) - 2 * r),
           r + detail::unit(rng) * (static_cast<double>(cfg.height) - 2 * r)};
    const double speed = cfg.min_speed + detail::unit(rng) * (cfg.max_speed - cfg.min_speed);
    const double angle = 2 * std::numbers::pi * detail::unit(rng);
    integrate_track(o, p, {speed * std::cos(angle), speed * std::sin(angle)}, cfg.steps,
                    cfg.height, cfg.width);
    ep.objects.push_back(std::move(o));
  }
  render_episode(ep, cfg.steps, cfg.height, cfg.width);
  return ep;
}

/// Episode i uses seed derive_seed(root, {i}).
inline std::vector<Episode> generate_dataset(std::uint64_t root, std::size_t count,
                                             const SynthConfig& cfg) {
  std::vector<Episode> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = generate_episode(derive_seed(root, {i}), cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file
//
//   "PSBD" | u32 version | u32 episode count
//   per episode:
//     u32 factor JSON length | factor JSON bytes
//     u32 T | u32 H | u32 W
//     f32 frames [T,3,H,W] | u16 masks [T,H,W]
//
// All integers and floats little-endian.

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr char kDatasetMagic[4] = {'P', 'S', 'B', 'D'};

inline nlohmann::json factors_to_json(const std::vector<ObjectTrack>& objects) {
  auto arr = nlohmann::json::array();
  for (const auto& o : objects) {
    nlohmann::json j;
    j["shape"] = to_string(o.shape);
    j["color"] = o.color;
    j["radius"] = o.radius;
    auto pos = nlohmann::json::array(), vel = nlohmann::json::array();
    for (const auto& p : o.position) pos.push_back({p.x, p.y});
    for (const auto& v : o.velocity) vel.push_back({v.x, v.y});
    j["position"] = pos;
    j["velocity"] = vel;
    arr.push_back(j);
  }
  return arr;
}

inline std::vector<ObjectTrack> factors_from_json(const nlohmann::json& arr) {
  std::vector<ObjectTrack> out;
  for (const auto& j : arr) {
    ObjectTrack o;
    const auto shape = j.at("shape").get<std::string>();
    if (shape == "square") o.shape = SpriteShape::square;
    else if (shape == "circle") o.shape = SpriteShape::circle;
    else if (shape == "triangle") o.shape = SpriteShape::triangle;
    else throw FormatError("dataset: unknown shape '" + shape + "'");
    o.color = j.at("color").get<int>();
    o.radius = j.at("radius").get<int>();
    for (const auto& p : j.at("position")) o.position.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    for (const auto& v : j.at("velocity")) o.velocity.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
    out.push_back(std::move(o));
  }
  return out;
}

namespace detail {

template <class T>
void put_le(std::string& buf, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    char bytes[sizeof(T)];
    std::memcpy(bytes, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    std::memcpy(&value, bytes, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n) {
      throw TruncatedError(std::string("dataset: truncated while reading ") + what);
    }
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_dataset(const std::vector<Episode>& episodes) {
  std::string buf(kDatasetMagic, 4);
  detail::put_le<std::uint32_t>(buf, kDatasetVersion);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(episodes.size()));
  for (const auto& ep : episodes) {
    const std::string factors = factors_to_json(ep.objects).dump();
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(factors.size()));
    buf += factors;
    const std::size_t t = ep.steps(), h = ep.height(), w = ep.width();
    if (ep.frames.shape() != Shape{t, 3, h, w} || ep.masks.size() != t * h * w) {
      throw ShapeError("write_dataset: inconsistent episode shapes");
    }
    for (auto d : {t, h, w}) detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    for (float v : ep.frames.data()) detail::put_le<float>(buf, v);
    for (auto m : ep.masks) detail::put_le<std::uint16_t>(buf, m);
  }
  return buf;
}

inline std::vector<Episode> deserialize_dataset(std::string bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) {
    throw HeaderError("dataset: bad magic (expected PSBD)");
  }
  detail::Reader in(std::move(bytes));
  in.take(4, "magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kDatasetVersion) {
    throw VersionError("dataset: version " + std::to_string(version) + ", expected " +
                       std::to_string(kDatasetVersion));
  }
  const auto count = in.get<std::uint32_t>("episode count");
  std::vector<Episode> out;
  out.reserve(std::min<std::size_t>(count, 1u << 16));
  for (std::uint32_t e = 0; e < count; ++e) {
    Episode ep;
    const auto len = in.get<std::uint32_t>("factor length");
    const auto text = in.take(len, "factors");
    try {
      ep.objects = factors_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::exception& err) {
      throw FormatError(std::string("dataset: bad factor block: ") + err.what());
    }
    const std::size_t t = in.get<std::uint32_t>("T"), h = in.get<std::uint32_t>("H"),
                      w = in.get<std::uint32_t>("W");
    if (t == 0 || h == 0 || w == 0) throw FormatError("dataset: zero extent");
    if (in.remaining() < t * h * w * (3 * sizeof(float) + sizeof(std::uint16_t))) {
      throw TruncatedError("dataset: truncated payload in episode " + std::to_string(e));
    }
    ep.frames = Tensor<float>({t, 3, h, w});
    for (auto& v : ep.frames.data()) v = in.get<float>("frames");
    ep.masks.resize(t * h * w);
    for (auto& m : ep.masks) m = in.get<std::uint16_t>("masks");
    out.push_back(std::move(ep));
  }
  if (in.remaining() != 0) throw FormatError("dataset: trailing bytes after last episode");
  return out;
}

inline void write_dataset(const std::string& path, const std::vector<Episode>& episodes) {
  const auto bytes = serialize_dataset(episodes);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_dataset: cannot open " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write_dataset: write failed for " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::vector<Episode> read_dataset(const std::string& path) {
  return deserialize_dataset(read_file(path));
}

inline std::uint32_t crc32_of(const std::string& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace psb
