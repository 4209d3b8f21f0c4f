#pragma once

// Test-only reference implementations. These are written independently of
// the library's optimized paths: plain loops, no shared helpers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <tuple>
#include <vector>

#include "macnn/evaluation.hpp"
#include "macnn/network.hpp"
#include "macnn/tensor.hpp"

namespace macnn::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<real_t>(dist(rng));
  return t;
}

/// out[o,i,j] = bias[o] + sum_{c,u,v} in[c,i+u,j+v] * k[o,c,u,v], scalar loops.
inline Tensor brute_conv2d(const Tensor& in, const Tensor& k, const Tensor& bias) {
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = H - kh + 1, Wo = W - kw + 1;
  Tensor out({O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        long double s = bias[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v)
              s += static_cast<long double>(in[(c * H + i + u) * W + j + v]) *
                   k[((o * C + c) * kh + u) * kw + v];
        out[(o * Ho + i) * Wo + j] = static_cast<real_t>(s);
      }
  return out;
}

/// Central finite-difference gradient of a scalar function with respect to
/// every element of `x` (x is perturbed in place and restored).
inline Tensor finite_difference(Tensor& x, const std::function<double()>& loss, double eps = 1e-4) {
  Tensor grad(x.shape());
  for (std::size_t n = 0; n < x.size(); ++n) {
    const real_t saved = x[n];
    x[n] = static_cast<real_t>(saved + eps);
    const double up = loss();
    x[n] = static_cast<real_t>(saved - eps);
    const double down = loss();
    x[n] = saved;
    grad[n] = static_cast<real_t>((up - down) / (2 * eps));
  }
  return grad;
}

/// ||a - b|| / max(||a||, ||b||), with 0 when both vanish.
inline double relative_error(std::span<const real_t> a, std::span<const real_t> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    diff += (double(a[n]) - b[n]) * (double(a[n]) - b[n]);
    na += double(a[n]) * a[n];
    nb += double(b[n]) * b[n];
  }
  const double scale = std::sqrt(std::max(na, nb));
  if (scale == 0) return 0;
  return std::sqrt(diff) / scale;
}

inline double weighted_sum(const Tensor& t, const Tensor& weights) {
  double s = 0;
  for (std::size_t n = 0; n < t.size(); ++n) s += double(t[n]) * weights[n];
  return s;
}

/// Sorted-window median with reflect (mirror, edge not repeated) padding and
/// ceil(k/2)-1 pixels before the center.
inline double brute_median_at(const Tensor& img, std::size_t c, long y, long x, long k) {
  const long H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  auto reflect = [](long i, long n) {
    if (n == 1) return 0L;
    const long period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };
  const long before = (k + 1) / 2 - 1;
  std::vector<double> window;
  for (long dy = -before; dy < k - before; ++dy)
    for (long dx = -before; dx < k - before; ++dx)
      window.push_back(img(c, reflect(y + dy, H), reflect(x + dx, W)));
  std::sort(window.begin(), window.end());
  const std::size_t m = window.size();
  return m % 2 ? window[m / 2] : (window[m / 2 - 1] + window[m / 2]) / 2;
}

/// Greedy matching written out the slow way: per candidate, rank the free
/// centroids by (distance, index) and take the first one inside the radius.
inline MatchStats brute_match(std::vector<Candidate> kept, const std::vector<Point>& centroids, long radius) {
  std::stable_sort(kept.begin(), kept.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(b.score, a.position.y, a.position.x) < std::tie(a.score, b.position.y, b.position.x);
  });
  std::vector<std::size_t> free(centroids.size());
  for (std::size_t k = 0; k < free.size(); ++k) free[k] = k;
  MatchStats s;
  for (const auto& c : kept) {
    std::vector<std::pair<long, std::size_t>> ranked;
    for (std::size_t k : free) {
      const long dx = c.position.x - centroids[k].x, dy = c.position.y - centroids[k].y;
      ranked.push_back({dx * dx + dy * dy, k});
    }
    std::sort(ranked.begin(), ranked.end());
    if (!ranked.empty() && ranked[0].first <= radius * radius) {
      ++s.tp;
      free.erase(std::find(free.begin(), free.end(), ranked[0].second));
    } else {
      ++s.fp;
    }
  }
  s.fn = free.size();
  return s;
}

/// Re-runs the matching from scratch at every distinct score threshold.
inline FrocCurve brute_froc(const std::vector<ImageResult>& images, long radius) {
  std::vector<real_t> thresholds;
  for (const auto& im : images)
    for (const auto& c : im.candidates) thresholds.push_back(c.score);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  FrocCurve curve;
  if (thresholds.empty()) curve.points.push_back({1.0, 0.0, 0.0});
  for (real_t t : thresholds) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& im : images) {
      std::vector<Candidate> kept;
      for (const auto& c : im.candidates)
        if (c.score >= t) kept.push_back(c);
      const MatchStats s = brute_match(kept, im.centroids, radius);
      tp += s.tp;
      fp += s.fp;
      fn += s.fn;
    }
    curve.points.push_back({double(t), double(fp) / double(images.size()), double(tp) / double(tp + fn)});
  }
  return curve;
}

/// Same layer kinds as the basic network on a 21x21 input.
inline NetworkSpec shrunken_spec() {
  NetworkSpec spec{"shrunken", {}, {3, 21, 21}};
  for (auto [c, k] : {std::pair{4u, 4u}, {4u, 3u}, {4u, 2u}}) {
    spec.layers.push_back(LayerSpec::conv(c, k));
    spec.layers.push_back(LayerSpec::leaky(0.01));
    spec.layers.push_back(LayerSpec::pool());
    spec.layers.push_back(LayerSpec::drop(0.25));
  }
  spec.layers.push_back(LayerSpec::fc(8));
  spec.layers.push_back(LayerSpec::maxout());
  spec.layers.push_back(LayerSpec::fc(6));
  spec.layers.push_back(LayerSpec::fc(2));
  spec.layers.push_back(LayerSpec::softmax());
  return spec;
}

/// Random evaluation inputs: up to 5 images, up to 20 candidates each, coarse
/// scores that tie within and across images, at least one lesion overall.
inline std::vector<ImageResult> micro_set(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n_img(1, 5), n_cand(0, 20), n_truth(0, 6), coord(0, 30), score(1, 8);
  std::vector<ImageResult> images(std::size_t(n_img(rng)));
  for (auto& im : images) {
    for (int k = n_truth(rng); k > 0; --k) im.centroids.push_back({coord(rng), coord(rng)});
    for (int k = n_cand(rng); k > 0; --k)
      im.candidates.push_back({"i", {coord(rng), coord(rng)}, real_t(score(rng)) / 8});
  }
  if (std::all_of(images.begin(), images.end(), [](const auto& im) { return im.centroids.empty(); })) {
    images[0].centroids.push_back({coord(rng), coord(rng)});
  }
  return images;
}

}  // namespace macnn::testing
