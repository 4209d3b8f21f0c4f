#pragma once

// Deterministic synthetic fundus images: bright disc field of view on black,
// smooth illumination gradient, dark curvilinear vessel strokes, and dark
// Gaussian lesion blobs at recorded centroids.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "macnn/dataset_io.hpp"

namespace macnn {

struct SyntheticConfig {
  std::uint64_t seed = 1;
  std::size_t n_images = 20;
  std::size_t image_size = 200;
  std::size_t n_ma_min = 8;
  std::size_t n_ma_max = 15;
  double contrast_min = 0.3;
  double contrast_max = 0.6;
};

inline constexpr int kSyntheticBorder = 55;       // minimum centroid distance to the image border
inline constexpr int kSyntheticSeparation = 15;   // minimum distance between centroids

struct Disc {
  double cx, cy, radius;
  bool contains(double x, double y) const { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius; }
};

/// Field-of-view disc used by the generator for a square image of side `size`.
inline Disc synthetic_disc(std::size_t size) {
  const double c = (double(size) - 1) / 2;
  return {c, c, 0.48 * double(size)};
}

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

inline std::mt19937_64 image_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  return std::mt19937_64(seq);
}

}  // namespace detail

inline std::string synthetic_image_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%03zu", index);
  return buf;
}

/// Generates one image and its annotations. Deterministic in (config.seed, index).
inline std::pair<ImageRecord, AnnotationSet> generate_synthetic_image(const SyntheticConfig& config,
                                                                      std::size_t index) {
  const std::size_t size = config.image_size;
  auto rng = detail::image_rng(config.seed, index);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const Disc disc = synthetic_disc(size);

  // Darkening layer: multiplicative attenuation per pixel, applied to G fully,
  // B at 0.8 and R at 0.5 of the depth.
  std::vector<double> attenuation(size * size, 1.0);

  const int n_vessels = 3 + static_cast<int>(rng() % 3);
  for (int v = 0; v < n_vessels; ++v) {
    const double angle = uniform(0, 2 * std::numbers::pi);
    const double start_r = uniform(0, disc.radius);
    const double ax = disc.cx + start_r * std::cos(angle), ay = disc.cy + start_r * std::sin(angle);
    const double heading = uniform(0, 2 * std::numbers::pi);
    const double length = uniform(0.6, 1.5) * disc.radius;
    const double bx = ax + length * std::cos(heading), by = ay + length * std::sin(heading);
    const double bend = uniform(-0.3, 0.3) * length;
    const double mx = (ax + bx) / 2 - bend * std::sin(heading), my = (ay + by) / 2 + bend * std::cos(heading);
    const double sigma = uniform(0.75, 1.75);
    const double depth = uniform(0.2, 0.4);
    constexpr int kSegments = 48;
    std::array<std::pair<double, double>, kSegments + 1> curve;
    for (int s = 0; s <= kSegments; ++s) {
      const double t = double(s) / kSegments;
      curve[s] = {(1 - t) * (1 - t) * ax + 2 * (1 - t) * t * mx + t * t * bx,
                  (1 - t) * (1 - t) * ay + 2 * (1 - t) * t * my + t * t * by};
    }
    const double reach = 4 * sigma;
    // Profile of the minimum distance to the polyline.
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double best = reach + 1;
        for (int s = 0; s < kSegments && best > 0; ++s) {
          const auto [x0, y0] = curve[s];
          const auto [x1, y1] = curve[s + 1];
          if (double(x) < std::min(x0, x1) - reach || double(x) > std::max(x0, x1) + reach ||
              double(y) < std::min(y0, y1) - reach || double(y) > std::max(y0, y1) + reach)
            continue;
          best = std::min(best, detail::segment_distance(double(x), double(y), x0, y0, x1, y1));
        }
        if (best <= reach) attenuation[y * size + x] *= 1 - depth * std::exp(-best * best / (2 * sigma * sigma));
      }
  }

  AnnotationSet truth{synthetic_image_id(index), {}};
  const std::size_t span = config.n_ma_max - config.n_ma_min + 1;
  const std::size_t n_ma = config.n_ma_min + static_cast<std::size_t>(rng() % span);
  if (n_ma > 0 && size < 2 * kSyntheticBorder + 1) {
    fail(ErrorKind::generation, "image_size " + std::to_string(size) + " leaves no room for lesions");
  }
  std::uniform_int_distribution<int> coord(kSyntheticBorder, static_cast<int>(size) - 1 - kSyntheticBorder);
  int attempts = 0;
  while (truth.centroids.size() < n_ma) {
    if (++attempts > 20000) {
      fail(ErrorKind::generation, "cannot place " + std::to_string(n_ma) + " lesions in a " + std::to_string(size) +
                                      "px image with the required spacing");
    }
    const Point p{coord(rng), coord(rng)};
    if (!Disc{disc.cx, disc.cy, disc.radius - 8}.contains(p.x, p.y)) continue;
    bool clear = true;
    for (const Point& q : truth.centroids)
      clear = clear && squared_distance(p, q) >= long(kSyntheticSeparation) * kSyntheticSeparation;
    if (!clear) continue;
    truth.centroids.push_back(p);
    const double radius = uniform(2.0, 5.0);
    const double sigma = radius / 2;
    const double contrast = uniform(config.contrast_min, config.contrast_max);
    const long reach = long(std::ceil(4 * sigma));
    for (long y = p.y - reach; y <= p.y + reach; ++y)
      for (long x = p.x - reach; x <= p.x + reach; ++x) {
        const double d2 = double((x - p.x) * (x - p.x) + (y - p.y) * (y - p.y));
        attenuation[y * size + x] *= 1 - contrast * std::exp(-d2 / (2 * sigma * sigma));
      }
  }

  const double gx = uniform(-1, 1), gy = uniform(-1, 1);
  const std::array<double, 3> base = {uniform(0.65, 0.8), uniform(0.32, 0.45), uniform(0.15, 0.25)};
  const std::array<double, 3> channel_depth = {0.5, 1.0, 0.8};
  std::normal_distribution<double> noise(0.0, 0.01);
  ImageRecord record{truth.image_id, Tensor({3, size, size}), {}};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const bool inside = disc.contains(double(x), double(y));
      const double dx = (double(x) - disc.cx) / disc.radius, dy = (double(y) - disc.cy) / disc.radius;
      const double illumination = 1 + 0.15 * (gx * dx + gy * dy) - 0.2 * (dx * dx + dy * dy);
      const double a = attenuation[y * size + x];
      for (std::size_t c = 0; c < 3; ++c) {
        const double n = noise(rng);
        double v = 0;
        if (inside) v = base[c] * illumination * (1 - channel_depth[c] * (1 - a)) + n;
        record.pixels(c, y, x) = static_cast<real_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
      }
    }
  record.fov_mask = compute_fov_mask(record.pixels);
  return {std::move(record), std::move(truth)};
}

inline Dataset generate_synthetic(const SyntheticConfig& config) {
  if (config.n_images < 1) fail(ErrorKind::generation, "n_images must be at least 1");
  if (config.image_size < 101) fail(ErrorKind::generation, "image_size must be at least 101");
  if (config.n_ma_min > config.n_ma_max) fail(ErrorKind::generation, "lesion count range is empty");
  if (!(config.contrast_min >= 0 && config.contrast_min <= config.contrast_max && config.contrast_max <= 1)) {
    fail(ErrorKind::generation, "contrast range must satisfy 0 <= min <= max <= 1");
  }
  Dataset data;
  for (std::size_t i = 0; i < config.n_images; ++i) {
    auto [image, truth] = generate_synthetic_image(config, i);
    data.images.push_back(std::move(image));
    data.annotations.push_back(std::move(truth));
  }
  return data;
}

}  // namespace macnn
