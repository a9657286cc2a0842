#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "attgf/dataset.hpp"
#include "attgf/errors.hpp"

namespace attgf {

namespace fs = std::filesystem;

namespace {

struct Ellipse {
  double cx, cy, rx, ry;
  bool contains(double x, double y) const {
    double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
  }
};

using Rgb = std::array<double, 3>;

Rgb random_color(std::mt19937_64& rng, Rgb lo, Rgb hi) {
  Rgb c;
  for (int k = 0; k < 3; ++k) c[k] = std::uniform_real_distribution<double>(lo[k], hi[k])(rng);
  return c;
}

Rgb blend(Rgb a, Rgb b, double t) {
  return {a[0] * (1 - t) + b[0] * t, a[1] * (1 - t) + b[1] * t, a[2] * (1 - t) + b[2] * t};
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

std::vector<double> to_planes(const Image& im) {
  std::vector<double> v(im.pixels.begin(), im.pixels.end());
  return v;
}

Image from_planes(const Image& like, const std::vector<double>& v) {
  Image out(like.width, like.height, like.channels);
  for (std::size_t i = 0; i < v.size(); ++i) out.pixels[i] = to_byte(v[i]);
  return out;
}

Image gaussian_blur(const Image& im, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (auto& k : kernel) k /= total;
  const int w = im.width, h = im.height, ch = im.channels;
  std::vector<double> src = to_planes(im), tmp(src.size()), dst(src.size());
  auto idx = [&](int y, int x, int c) { return (static_cast<std::size_t>(y) * w + x) * ch + c; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * src[idx(y, std::clamp(x + i, 0, w - 1), c)];
        tmp[idx(y, x, c)] = acc;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp[idx(std::clamp(y + i, 0, h - 1), x, c)];
        dst[idx(y, x, c)] = acc;
      }
  return from_planes(im, dst);
}

Image add_noise(const Image& im, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  std::vector<double> v = to_planes(im);
  for (auto& x : v) x += n(rng);
  return from_planes(im, v);
}

// 8x8 DCT quantization with the usual luminance table scaled by `scale`.
Image block_quantize(const Image& im, double scale) {
  static constexpr int kTable[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,
                                     58, 60, 55, 14, 13,  16,  24,  40,  57, 69, 56, 14, 17,
                                     22, 29, 51, 87, 80,  62,  18,  22,  37, 56, 68, 109, 103,
                                     77, 24, 35, 55, 64,  81,  104, 113, 92, 49, 64, 78,  87,
                                     103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
  double basis[8][8];
  for (int u = 0; u < 8; ++u)
    for (int x = 0; x < 8; ++x)
      basis[u][x] = (u == 0 ? std::sqrt(0.125) : 0.5) * std::cos((2 * x + 1) * u * std::numbers::pi / 16);
  std::vector<double> v = to_planes(im);
  const int w = im.width, h = im.height, ch = im.channels;
  auto idx = [&](int y, int x, int c) { return (static_cast<std::size_t>(y) * w + x) * ch + c; };
  for (int by = 0; by < h; by += 8)
    for (int bx = 0; bx < w; bx += 8)
      for (int c = 0; c < ch; ++c) {
        double block[8][8], coef[8][8];
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            block[y][x] = v[idx(std::min(by + y, h - 1), std::min(bx + x, w - 1), c)] - 128.0;
        for (int u = 0; u < 8; ++u)
          for (int k = 0; k < 8; ++k) {
            double acc = 0;
            for (int y = 0; y < 8; ++y)
              for (int x = 0; x < 8; ++x) acc += basis[u][y] * basis[k][x] * block[y][x];
            double step = std::max(1.0, kTable[u * 8 + k] * scale);
            coef[u][k] = std::round(acc / step) * step;
          }
        for (int y = 0; y < 8 && by + y < h; ++y)
          for (int x = 0; x < 8 && bx + x < w; ++x) {
            double acc = 0;
            for (int u = 0; u < 8; ++u)
              for (int k = 0; k < 8; ++k) acc += basis[u][y] * basis[k][x] * coef[u][k];
            v[idx(by + y, bx + x, c)] = acc + 128.0;
          }
      }
  return from_planes(im, v);
}

}  // namespace

SynthFace render_face(std::uint64_t seed, int size) {
  if (size < 8) throw ConfigError("synthetic images must be at least 8 pixels wide");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto jitter = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  Rgb bg0 = random_color(rng, {40, 40, 40}, {220, 220, 220});
  Rgb bg1 = random_color(rng, {40, 40, 40}, {220, 220, 220});
  Rgb skin = blend({250, 215, 185}, {120, 75, 50}, u(rng));
  Rgb hair = blend({25, 18, 12}, {170, 120, 60}, u(rng));
  Rgb iris = random_color(rng, {20, 20, 20}, {90, 110, 140});
  Rgb lips = random_color(rng, {150, 40, 50}, {220, 110, 120});

  const double cx = jitter(0.45, 0.55), cy = jitter(0.52, 0.6);
  Ellipse face{cx, cy, jitter(0.26, 0.32), jitter(0.33, 0.39)};
  Ellipse hair_region{cx, cy - jitter(0.08, 0.12), face.rx * 1.15, face.ry * 1.05};
  const double eye_dx = jitter(0.1, 0.13), eye_y = cy - jitter(0.05, 0.1);
  Ellipse eyes[2] = {{cx - eye_dx, eye_y, jitter(0.045, 0.06), jitter(0.025, 0.035)},
                     {cx + eye_dx, eye_y, jitter(0.045, 0.06), jitter(0.025, 0.035)}};
  Ellipse mouth{cx, cy + jitter(0.15, 0.2), jitter(0.08, 0.12), jitter(0.025, 0.04)};
  const double stripe = jitter(0.12, 0.2) * size, phase = jitter(0, 6.3);

  SynthFace out{Image(size, size, 3), Image(size, size, 1)};
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      const double x = (px + 0.5) / size, y = (py + 0.5) / size;
      Rgb color;
      std::uint8_t label = 0;
      for (int k = 0; k < 3; ++k) color[k] = bg0[k] * (1 - y) + bg1[k] * y;
      if (hair_region.contains(x, y)) {
        // Strands give the hair a fine texture.
        double s = 0.5 + 0.5 * std::sin(px * std::numbers::pi * 2 / std::max(2.0, stripe * 0.3) + phase);
        for (int k = 0; k < 3; ++k) color[k] = hair[k] * (0.6 + 0.8 * s);
        label = 2;
      }
      if (face.contains(x, y) && y > hair_region.cy - hair_region.ry * 0.35) {
        color = skin;
        label = 1;
      }
      for (const auto& e : eyes) {
        if (e.contains(x, y)) {
          Ellipse pupil{e.cx, e.cy, e.rx * 0.45, e.ry * 0.9};
          color = pupil.contains(x, y) ? iris : Rgb{235, 235, 235};
          label = 3;
        }
      }
      if (mouth.contains(x, y)) {
        color = lips;
        label = 4;
      }
      for (int k = 0; k < 3; ++k) out.image.at(py, px, k) = to_byte(color[k]);
      out.labels.at(py, px, 0) = label;
    }
  }
  return out;
}

Image degrade(const Image& image, Degradation kind, double severity, std::uint64_t seed) {
  if (!(severity >= 0.0 && severity <= 1.0)) throw PreconditionError("severity must lie in [0, 1]");
  if (severity == 0.0) return image;
  switch (kind) {
    case Degradation::blur:
      return gaussian_blur(image, 2.5 * severity);
    case Degradation::noise:
      return add_noise(image, 50.0 * severity, seed);
    case Degradation::block:
      return block_quantize(image, 0.1 + 4.0 * severity);
    case Degradation::downsample: {
      const double factor = 1.0 + 3.0 * severity;
      int w = std::max(2, static_cast<int>(std::lround(image.width / factor)));
      int h = std::max(2, static_cast<int>(std::lround(image.height / factor)));
      return resize_bilinear(resize_bilinear(image, w, h), image.width, image.height);
    }
  }
  throw PreconditionError("unknown degradation");
}

std::vector<ScoredImage> synth_corpus(const SynthConfig& config, const fs::path& out_dir) {
  if (config.n_per_domain < 1) throw ConfigError("n_per_domain must be positive");
  if (config.degradations.empty()) throw ConfigError("at least one degradation is required");
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "segs");
  std::vector<ScoredImage> items;
  const int n = config.n_per_domain;
  for (std::size_t d = 0; d < config.degradations.size(); ++d) {
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                      static_cast<std::uint32_t>(d)};
    std::mt19937_64 rng(seq);
    // Stratified severities spread each domain evenly over [0, 1].
    std::vector<int> strata(n);
    for (int i = 0; i < n; ++i) strata[i] = i;
    std::shuffle(strata.begin(), strata.end(), rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
      const std::int64_t id = static_cast<std::int64_t>(d) * n + i;
      const double severity = (strata[i] + u(rng)) / n;
      const std::uint64_t face_seed = rng();
      const std::uint64_t noise_seed = rng();
      SynthFace face = render_face(face_seed, config.image_size);
      Image degraded = degrade(face.image, config.degradations[d], severity, noise_seed);

      char name[64];
      std::snprintf(name, sizeof(name), "d%zu_%06lld", d, static_cast<long long>(id));
      ScoredImage item;
      item.stable_id = id;
      item.domain_id = static_cast<int>(d);
      item.image_path = out_dir / "images" / (std::string(name) + ".ppm");
      item.seg_path = out_dir / "segs" / (std::string(name) + ".pgm");
      item.pseudo_mos = -severity;
      write_pnm(item.image_path, degraded);
      write_pnm(item.seg_path, face.labels);
      items.push_back(std::move(item));
    }
  }
  write_manifest(out_dir / "manifest.csv", items);
  return items;
}

}  // namespace attgf
