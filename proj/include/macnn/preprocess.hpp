#pragma once

// Background estimation by a large median filter and its subtraction.

#include <algorithm>
#include <string>
#include <vector>

#include "macnn/parallel.hpp"
#include "macnn/raster.hpp"

namespace macnn {

inline constexpr std::size_t kDefaultMedianWindow = 30;

struct PreprocessedImage {
  std::string image_id;
  Tensor residual;  // [3,H,W], values in [-1, 1]
  Mask fov_mask;

  std::size_t width() const { return residual.dim(2); }
  std::size_t height() const { return residual.dim(1); }
};

namespace detail {

/// Mirror index without repeating the edge sample (d c b | a b c d | c b a).
inline std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

}  // namespace detail

/// Per-channel k x k median with reflect padding. The window spans
/// ceil(k/2)-1 pixels above/left of the center and the rest below/right.
/// Even windows use the mean of the two middle order statistics.
inline Tensor median_background(const Tensor& pixels, std::size_t k = kDefaultMedianWindow,
                                std::size_t threads = 1) {
  if (pixels.rank() != 3) fail(ErrorKind::shape, "median_background expects [C,H,W], got " + shape_string(pixels.shape()));
  if (k < 1) fail(ErrorKind::validation, "median window must be at least 1");
  const std::size_t channels = pixels.dim(0), height = pixels.dim(1), width = pixels.dim(2);
  const long before = static_cast<long>((k + 1) / 2) - 1;
  const std::size_t count = k * k;
  Tensor background(pixels.shape());

  // Reflected column indices are shared by every row.
  std::vector<std::size_t> col_index(width + k);
  for (std::size_t x = 0; x < width + k - 1; ++x)
    col_index[x] = detail::reflect_index(long(x) - before, long(width));

  parallel_for(channels * height, threads, [&](std::size_t job) {
    const std::size_t c = job / height, y = job % height;
    std::vector<real_t> window(count);
    std::vector<const real_t*> rows(k);
    for (std::size_t u = 0; u < k; ++u)
      rows[u] = &pixels(c, detail::reflect_index(long(y) + long(u) - before, long(height)), 0);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t n = 0;
      for (std::size_t u = 0; u < k; ++u)
        for (std::size_t v = 0; v < k; ++v) window[n++] = rows[u][col_index[x + v]];
      const auto mid = window.begin() + count / 2;
      std::nth_element(window.begin(), mid, window.end());
      real_t value = *mid;
      if (count % 2 == 0) {
        const real_t lower = *std::max_element(window.begin(), mid);
        value = (lower + value) / 2;
      }
      background(c, y, x) = value;
    }
  });
  return background;
}

/// residual = pixels - background, clamped to [-1, 1].
inline PreprocessedImage subtract_background(const ImageRecord& image, const Tensor& background) {
  require_shape(background.shape(), image.pixels.shape(), "subtract_background background");
  PreprocessedImage out{image.image_id, image.pixels, image.fov_mask};
  for (std::size_t n = 0; n < out.residual.size(); ++n)
    out.residual[n] = std::clamp<real_t>(out.residual[n] - background[n], -1, 1);
  return out;
}

inline PreprocessedImage preprocess(const ImageRecord& image, std::size_t k = kDefaultMedianWindow,
                                    std::size_t threads = 1) {
  return subtract_background(image, median_background(image.pixels, k, threads));
}

}  // namespace macnn
