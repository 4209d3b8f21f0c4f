#pragma once

// Probability maps: every valid center is scored by the softmax MA output of
// the network on its 101x101 patch.
//
// The dense path computes exactly the same numbers as patch-by-patch
// evaluation but shares the convolution work between overlapping patches.
// Convolutions run once over the image; each 2x2 pooling splits the current
// map into its four pooling phases (the phase a patch uses depends on its
// origin modulo the accumulated stride). At the first fully connected layer
// every center gathers its feature block from the phase map matching its
// origin and the classifier tail runs per center. Every output element is
// produced by the same arithmetic in the same order as in the per-patch
// forward pass, so the two paths agree bit for bit.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "macnn/network.hpp"
#include "macnn/parallel.hpp"
#include "macnn/patcher.hpp"

namespace macnn {

struct InferOptions {
  std::size_t stride = 1;
  std::size_t threads = 1;
  std::size_t tile_rows = 128;  // center rows per tile; tiling never changes the result
};

/// FOV pixels whose 101x101 window lies inside the image.
inline Mask valid_centers(const PreprocessedImage& image) {
  Mask mask(image.width(), image.height(), 0);
  for (std::size_t y = 0; y < image.height(); ++y)
    for (std::size_t x = 0; x < image.width(); ++x)
      mask.at(x, y) = image.fov_mask.at(x, y) && center_in_margin(image.width(), image.height(), {int(x), int(y)});
  return mask;
}

/// Grid points actually scored for a given stride (anchored at the first valid row/column).
inline bool on_stride_grid(Point p, std::size_t stride) {
  return (p.x - kPatchMargin) % long(stride) == 0 && (p.y - kPatchMargin) % long(stride) == 0;
}

namespace detail {

inline void check_inference_input(const NetworkSpec& spec, const PreprocessedImage& image, std::size_t stride) {
  if (spec.input_shape != Shape{3, kPatchSize, kPatchSize}) {
    fail(ErrorKind::spec, "inference needs a network with a 3x101x101 input, got " + shape_string(spec.input_shape));
  }
  if (stride < 1) fail(ErrorKind::config, "infer.stride must be at least 1");
  if (image.width() < std::size_t(kPatchSize) || image.height() < std::size_t(kPatchSize)) {
    fail(ErrorKind::size, "image '" + image.image_id + "' (" + std::to_string(image.width()) + "x" +
                              std::to_string(image.height()) + ") is smaller than a 101x101 patch");
  }
}

/// Fills unscored valid pixels with the score of the nearest scored pixel
/// (ties: smaller y, then smaller x).
inline void nearest_fill(ProbabilityMap& map, const Mask& scored) {
  const long w = long(map.width()), h = long(map.height());
  const Raster<real_t> source = map.scores;
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      if (!map.valid_mask.at(x, y) || scored.at(x, y)) continue;
      long best_d = std::numeric_limits<long>::max();
      real_t best = 0;
      for (long r = long(map.stride);; r *= 2) {
        for (long yy = std::max(0L, y - r); yy <= std::min(h - 1, y + r); ++yy)
          for (long xx = std::max(0L, x - r); xx <= std::min(w - 1, x + r); ++xx) {
            if (!scored.at(xx, yy)) continue;
            const long d = (xx - x) * (xx - x) + (yy - y) * (yy - y);
            if (d < best_d) {
              best_d = d;
              best = source.at(xx, yy);
            }
          }
        // A hit within distance r is final: anything outside the window is farther.
        if (best_d <= r * r || (r > w && r > h)) break;
      }
      map.scores.at(x, y) = best_d == std::numeric_limits<long>::max() ? real_t(0) : best;
    }
}

/// Runs the classifier tail (layers from `first` on) on one feature block.
inline real_t classifier_tail(const NetworkSpec& spec, const std::vector<Tensor>& weights, std::size_t first,
                              std::size_t param, Tensor x) {
  for (std::size_t i = first; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::fully_connected:
        x = fully_connected_forward(x, weights[param], weights[param + 1]);
        param += 2;
        break;
      case LayerKind::maxout_fc: x = maxout_pairs(x).output; break;
      case LayerKind::leaky_relu: x = leaky_relu(x, static_cast<real_t>(l.value)); break;
      case LayerKind::softmax: x = softmax2(x); break;
      case LayerKind::dropout: break;
      default: fail(ErrorKind::spec, "spatial layer after the first fully connected layer");
    }
  }
  return x[1];
}

/// One pooling phase of a [C,H,W] map: out(c,r,s) = max of the 2x2 block at (a+2r, b+2s).
inline Tensor pool_phase(const Tensor& in, std::size_t a, std::size_t b) {
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t oh = (H - a) / 2, ow = (W - b) / 2;
  Tensor out({C, oh, ow});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t s = 0; s < ow; ++s) {
        const std::size_t y = a + 2 * r, x = b + 2 * s;
        // Same comparison order as maxpool2_forward.
        real_t best = in(c, y, x);
        if (in(c, y, x + 1) > best) best = in(c, y, x + 1);
        if (in(c, y + 1, x) > best) best = in(c, y + 1, x);
        if (in(c, y + 1, x + 1) > best) best = in(c, y + 1, x + 1);
        out(c, r, s) = best;
      }
  return out;
}

struct PhaseMap {
  Tensor map;
  std::size_t stride = 1;  // input pixels per map element
  std::size_t oy = 0, ox = 0;  // input offset of element (0,0)
};

/// Scores `centers` (patch origins relative to `crop`) by the dense method.
inline std::vector<real_t> dense_scores(const NetworkSpec& spec, const std::vector<Tensor>& weights, const Tensor& crop,
                                        const std::vector<Point>& origins, std::size_t threads) {
  std::vector<PhaseMap> maps;
  maps.push_back({crop, 1, 0, 0});
  std::size_t param = 0, i = 0;
  Shape patch_shape = spec.input_shape;
  const auto shapes = infer_shapes(spec);
  for (; i < spec.layers.size() && spec.layers[i].kind != LayerKind::fully_connected; ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv: {
        const Tensor& k = weights[param];
        const Tensor& b = weights[param + 1];
        param += 2;
        std::vector<PhaseMap> next(maps.size());
        std::vector<char> keep(maps.size(), 0);
        parallel_for(maps.size(), threads, [&](std::size_t m) {
          if (maps[m].map.dim(1) < l.kernel || maps[m].map.dim(2) < l.kernel) return;
          next[m] = {conv2d_forward(maps[m].map, k, b), maps[m].stride, maps[m].oy, maps[m].ox};
          keep[m] = 1;
        });
        std::vector<PhaseMap> kept;
        for (std::size_t m = 0; m < next.size(); ++m)
          if (keep[m]) kept.push_back(std::move(next[m]));
        maps = std::move(kept);
        break;
      }
      case LayerKind::leaky_relu:
        parallel_for(maps.size(), threads, [&](std::size_t m) {
          maps[m].map = leaky_relu(maps[m].map, static_cast<real_t>(l.value));
        });
        break;
      case LayerKind::maxpool2: {
        std::vector<PhaseMap> next(maps.size() * 4);
        std::vector<char> keep(next.size(), 0);
        parallel_for(next.size(), threads, [&](std::size_t n) {
          const PhaseMap& src = maps[n / 4];
          const std::size_t a = (n % 4) / 2, b = n % 2;
          if (src.map.dim(1) < a + 2 || src.map.dim(2) < b + 2) return;
          next[n] = {pool_phase(src.map, a, b), src.stride * 2, src.oy + src.stride * a, src.ox + src.stride * b};
          keep[n] = 1;
        });
        std::vector<PhaseMap> kept;
        for (std::size_t n = 0; n < next.size(); ++n)
          if (keep[n]) kept.push_back(std::move(next[n]));
        maps = std::move(kept);
        break;
      }
      case LayerKind::dropout: break;
      default: fail(ErrorKind::spec, "unsupported layer before the classifier: " + std::string(to_string(l.kind)));
    }
    patch_shape = shapes[i];
  }
  if (i == spec.layers.size()) fail(ErrorKind::spec, "network has no fully connected layer");
  const std::size_t C = patch_shape[0], ph = patch_shape[1], pw = patch_shape[2];

  std::vector<real_t> scores(origins.size());
  parallel_for(origins.size(), threads, [&](std::size_t n) {
    const Point o = origins[n];
    const PhaseMap* leaf = nullptr;
    for (const auto& m : maps)
      if ((std::size_t(o.y) - m.oy) % m.stride == 0 && (std::size_t(o.x) - m.ox) % m.stride == 0 &&
          std::size_t(o.y) >= m.oy && std::size_t(o.x) >= m.ox) {
        leaf = &m;
        break;
      }
    if (!leaf) fail(ErrorKind::shape, "dense inference: no phase map for a patch origin");
    const std::size_t r0 = (o.y - leaf->oy) / leaf->stride, c0 = (o.x - leaf->ox) / leaf->stride;
    if (r0 + ph > leaf->map.dim(1) || c0 + pw > leaf->map.dim(2)) {
      fail(ErrorKind::shape, "dense inference: phase map too small for a patch");
    }
    Tensor feature({C, ph, pw});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t u = 0; u < ph; ++u)
        for (std::size_t v = 0; v < pw; ++v) feature(c, u, v) = leaf->map(c, r0 + u, c0 + v);
    scores[n] = classifier_tail(spec, weights, i, param, std::move(feature));
  });
  return scores;
}

}  // namespace detail

/// Dense probability map. Stride > 1 scores only the stride grid and fills
/// the remaining valid pixels from the nearest scored pixel.
inline ProbabilityMap infer_map(const Checkpoint& ckpt, const PreprocessedImage& image, const InferOptions& opt = {}) {
  detail::check_inference_input(ckpt.spec, image, opt.stride);
  check_weights(ckpt.spec, ckpt.weights);
  const std::size_t w = image.width(), h = image.height();
  ProbabilityMap map{image.image_id, Raster<real_t>(w, h, 0), opt.stride, valid_centers(image)};
  Mask scored(w, h, 0);
  const std::size_t first_row = kPatchMargin, end_row = h - kPatchMargin;
  const std::size_t band = std::max<std::size_t>(1, opt.tile_rows);
  for (std::size_t ty = first_row; ty < end_row; ty += band) {
    const std::size_t ty_end = std::min(end_row, ty + band);
    std::vector<Point> centers, origins;
    for (std::size_t y = ty; y < ty_end; ++y)
      for (std::size_t x = kPatchMargin; x + kPatchMargin < w; ++x) {
        const Point p{int(x), int(y)};
        if (map.valid_mask.at(x, y) && on_stride_grid(p, opt.stride)) centers.push_back(p);
      }
    if (centers.empty()) continue;
    // Crop rows [ty-50, ty_end-1+50], all columns; origins are relative to the crop.
    const std::size_t crop_y0 = ty - kPatchMargin, crop_h = ty_end - ty + kPatchSize - 1;
    Tensor crop({3, crop_h, w});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < crop_h; ++y)
        std::copy_n(&image.residual(c, crop_y0 + y, 0), w, &crop(c, y, 0));
    for (const Point& p : centers) origins.push_back({p.x - kPatchMargin, int(p.y - kPatchMargin - crop_y0)});
    const auto scores = detail::dense_scores(ckpt.spec, ckpt.weights, crop, origins, opt.threads);
    for (std::size_t n = 0; n < centers.size(); ++n) {
      map.scores.at(centers[n].x, centers[n].y) = scores[n];
      scored.at(centers[n].x, centers[n].y) = 1;
    }
  }
  if (opt.stride > 1) detail::nearest_fill(map, scored);
  return map;
}

/// Reference path: one forward pass per patch.
inline ProbabilityMap infer_map_reference(const Checkpoint& ckpt, const PreprocessedImage& image,
                                          const InferOptions& opt = {}) {
  detail::check_inference_input(ckpt.spec, image, opt.stride);
  const std::size_t w = image.width(), h = image.height();
  ProbabilityMap map{image.image_id, Raster<real_t>(w, h, 0), opt.stride, valid_centers(image)};
  Mask scored(w, h, 0);
  std::vector<Point> centers;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (map.valid_mask.at(x, y) && on_stride_grid({int(x), int(y)}, opt.stride)) centers.push_back({int(x), int(y)});
  parallel_for(centers.size(), opt.threads, [&](std::size_t n) {
    Tensor patch({3, kPatchSize, kPatchSize});
    copy_patch(image, centers[n], AugmentOp::identity, patch.data().data());
    map.scores.at(centers[n].x, centers[n].y) = predict(ckpt.spec, ckpt.weights, patch);
  });
  for (const Point& p : centers) scored.at(p.x, p.y) = 1;
  if (opt.stride > 1) detail::nearest_fill(map, scored);
  return map;
}

/// Test-time cascade: keep final scores only where the basic map reaches the threshold.
inline ProbabilityMap cascade(const ProbabilityMap& final_map, const ProbabilityMap& basic_map, double threshold) {
  if (final_map.width() != basic_map.width() || final_map.height() != basic_map.height()) {
    fail(ErrorKind::validation, "cascade: basic and final maps for '" + final_map.image_id + "' differ in size");
  }
  ProbabilityMap out = final_map;
  for (std::size_t n = 0; n < out.scores.size(); ++n)
    if (!(basic_map.scores[n] >= threshold)) out.scores[n] = 0;
  return out;
}

}  // namespace macnn
