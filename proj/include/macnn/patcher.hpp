#pragma once

// 101x101 training patches: extraction, right-angle augmentation, and the two
// sampling regimes (balanced for the basic net, map-driven hard negatives for
// the final net).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "macnn/preprocess.hpp"
#include "macnn/probability_map.hpp"

namespace macnn {

inline constexpr int kPatchSize = 101;
inline constexpr int kPatchMargin = 50;
inline constexpr long kLabelRadius = 5;    // MA iff the center is within 5 px of a centroid
inline constexpr long kNegativeGuard = 6;  // sampled negatives keep at least 6 px from every centroid

enum class AugmentOp : std::uint8_t { identity, flip_h, flip_v, rot90, rot180, rot270 };

inline constexpr std::array<AugmentOp, 5> kAugmentOps = {AugmentOp::flip_h, AugmentOp::flip_v, AugmentOp::rot90,
                                                         AugmentOp::rot180, AugmentOp::rot270};

constexpr std::string_view to_string(AugmentOp op) {
  switch (op) {
    case AugmentOp::identity: return "identity";
    case AugmentOp::flip_h: return "flip_h";
    case AugmentOp::flip_v: return "flip_v";
    case AugmentOp::rot90: return "rot90";
    case AugmentOp::rot180: return "rot180";
    case AugmentOp::rot270: return "rot270";
  }
  return "identity";
}

inline AugmentOp parse_augment_op(std::string_view text) {
  for (auto op : {AugmentOp::identity, AugmentOp::flip_h, AugmentOp::flip_v, AugmentOp::rot90, AugmentOp::rot180,
                  AugmentOp::rot270})
    if (to_string(op) == text) return op;
  fail(ErrorKind::parse, "unknown augmentation op '" + std::string(text) + "'");
}

struct Patch {
  std::string source_id;
  Point center;
  Tensor data;  // [3,101,101]
  bool ma = false;
};

/// Lightweight patch descriptor: pixel data is re-derived from the image on use.
struct PatchRef {
  std::size_t image = 0;  // index into the image list
  Point center;
  bool ma = false;
  AugmentOp op = AugmentOp::identity;
  friend bool operator==(const PatchRef&, const PatchRef&) = default;
};

struct SamplePlan {
  std::size_t epoch_size = 0;
  double ma_fraction = 0.5;
  double stage2_threshold = 0.5;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (epoch_size < 1) fail(ErrorKind::config, "patch.epoch_size must be at least 1");
    if (!(ma_fraction > 0 && ma_fraction < 1)) fail(ErrorKind::config, "patch.ma_fraction must lie in (0, 1)");
    if (!(stage2_threshold >= 0 && stage2_threshold <= 1)) {
      fail(ErrorKind::config, "stage2.threshold must lie in [0, 1]");
    }
  }
  std::size_t ma_count() const { return static_cast<std::size_t>(std::llround(double(epoch_size) * ma_fraction)); }
};

inline bool center_in_margin(std::size_t width, std::size_t height, Point p) {
  return p.x >= kPatchMargin && p.y >= kPatchMargin && p.x + kPatchMargin < long(width) &&
         p.y + kPatchMargin < long(height);
}

inline bool is_ma_center(const AnnotationSet& truth, Point p) {
  for (const Point& c : truth.centroids)
    if (squared_distance(p, c) <= kLabelRadius * kLabelRadius) return true;
  return false;
}

/// Source coordinates inside the window for output position (i, j) under op.
inline std::pair<int, int> augment_source(AugmentOp op, int i, int j, int n = kPatchSize) {
  switch (op) {
    case AugmentOp::identity: return {i, j};
    case AugmentOp::flip_h: return {i, n - 1 - j};
    case AugmentOp::flip_v: return {n - 1 - i, j};
    case AugmentOp::rot90: return {j, n - 1 - i};
    case AugmentOp::rot180: return {n - 1 - i, n - 1 - j};
    case AugmentOp::rot270: return {n - 1 - j, i};
  }
  return {i, j};
}

/// Writes the (augmented) 3x101x101 window centered at `center` into out.
inline void copy_patch(const PreprocessedImage& image, Point center, AugmentOp op, real_t* out) {
  if (!center_in_margin(image.width(), image.height(), center)) {
    fail(ErrorKind::bounds, "patch center (" + std::to_string(center.x) + "," + std::to_string(center.y) +
                                ") is closer than " + std::to_string(kPatchMargin) + " px to the border of '" +
                                image.image_id + "'");
  }
  const std::size_t y0 = center.y - kPatchMargin, x0 = center.x - kPatchMargin;
  for (std::size_t c = 0; c < 3; ++c) {
    real_t* plane = out + c * kPatchSize * kPatchSize;
    if (op == AugmentOp::identity) {
      for (int i = 0; i < kPatchSize; ++i) {
        const real_t* src = &image.residual(c, y0 + i, x0);
        std::copy(src, src + kPatchSize, plane + i * kPatchSize);
      }
      continue;
    }
    for (int i = 0; i < kPatchSize; ++i)
      for (int j = 0; j < kPatchSize; ++j) {
        const auto [si, sj] = augment_source(op, i, j);
        plane[i * kPatchSize + j] = image.residual(c, y0 + si, x0 + sj);
      }
  }
}

inline Patch extract_patch(const PreprocessedImage& image, Point center, const AnnotationSet& truth) {
  Patch patch{image.image_id, center, Tensor({3, kPatchSize, kPatchSize}), is_ma_center(truth, center)};
  copy_patch(image, center, AugmentOp::identity, patch.data.data().data());
  return patch;
}

inline Patch augment(const Patch& patch, AugmentOp op) {
  require_shape(patch.data.shape(), {3, kPatchSize, kPatchSize}, "augment patch");
  Patch out{patch.source_id, patch.center, Tensor(patch.data.shape()), patch.ma};
  for (std::size_t c = 0; c < 3; ++c)
    for (int i = 0; i < kPatchSize; ++i)
      for (int j = 0; j < kPatchSize; ++j) {
        const auto [si, sj] = augment_source(op, i, j);
        out.data(c, i, j) = patch.data(c, si, sj);
      }
  return out;
}

inline Patch materialize(const PatchRef& ref, const std::vector<PreprocessedImage>& images) {
  const PreprocessedImage& image = images.at(ref.image);
  Patch patch{image.image_id, ref.center, Tensor({3, kPatchSize, kPatchSize}), ref.ma};
  copy_patch(image, ref.center, ref.op, patch.data.data().data());
  return patch;
}

inline std::vector<Patch> materialize(const std::vector<PatchRef>& refs, const std::vector<PreprocessedImage>& images) {
  std::vector<Patch> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.push_back(materialize(r, images));
  return out;
}

namespace detail {

inline void check_aligned(const std::vector<PreprocessedImage>& images, const std::vector<AnnotationSet>& truths) {
  if (images.size() != truths.size()) fail(ErrorKind::dataset, "images and annotation sets differ in count");
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i].image_id != truths[i].image_id) {
      fail(ErrorKind::dataset, "annotation set '" + truths[i].image_id + "' paired with image '" +
                                   images[i].image_id + "'");
    }
}

/// FOV pixels with a full window that keep kNegativeGuard px from every centroid.
inline Mask negative_eligibility(const PreprocessedImage& image, const AnnotationSet& truth) {
  const std::size_t w = image.width(), h = image.height();
  Mask mask(w, h, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Point p{int(x), int(y)};
      if (!image.fov_mask.at(x, y) || !center_in_margin(w, h, p)) continue;
      bool clear = true;
      for (const Point& c : truth.centroids) clear = clear && squared_distance(p, c) >= kNegativeGuard * kNegativeGuard;
      mask.at(x, y) = clear;
    }
  return mask;
}

/// Uniform draws over the union of set pixels of several masks.
class MaskUnionSampler {
 public:
  explicit MaskUnionSampler(std::vector<Mask> masks) : masks_(std::move(masks)) {
    for (const Mask& m : masks_) {
      std::vector<std::size_t> rows(m.height() + 1, 0);
      for (std::size_t y = 0; y < m.height(); ++y) {
        std::size_t n = 0;
        for (std::size_t x = 0; x < m.width(); ++x) n += m.at(x, y) != 0;
        rows[y + 1] = rows[y] + n;
      }
      image_offsets_.push_back(total_);
      total_ += rows.back();
      row_prefix_.push_back(std::move(rows));
    }
  }

  std::size_t total() const { return total_; }

  std::pair<std::size_t, Point> at(std::size_t k) const {
    const std::size_t i =
        std::size_t(std::upper_bound(image_offsets_.begin(), image_offsets_.end(), k) - image_offsets_.begin()) - 1;
    std::size_t local = k - image_offsets_[i];
    const auto& rows = row_prefix_[i];
    const std::size_t y = std::size_t(std::upper_bound(rows.begin(), rows.end(), local) - rows.begin()) - 1;
    local -= rows[y];
    const Mask& m = masks_[i];
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.at(x, y) && local-- == 0) return {i, Point{int(x), int(y)}};
    fail(ErrorKind::dataset, "mask sampler index out of range");
  }

  template <class Rng>
  std::pair<std::size_t, Point> draw(Rng& rng) const {
    return at(std::uniform_int_distribution<std::size_t>(0, total_ - 1)(rng));
  }

 private:
  std::vector<Mask> masks_;
  std::vector<std::vector<std::size_t>> row_prefix_;
  std::vector<std::size_t> image_offsets_;
  std::size_t total_ = 0;
};

/// All centroid-centered windows first (shuffled), then augmented copies in
/// shuffled order, then augmented draws with replacement.
inline std::vector<PatchRef> draw_positives(const std::vector<PreprocessedImage>& images,
                                            const std::vector<AnnotationSet>& truths, std::size_t count,
                                            std::mt19937_64& rng) {
  std::vector<PatchRef> pool;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (const Point& c : truths[i].centroids)
      if (center_in_margin(images[i].width(), images[i].height(), c)) pool.push_back({i, c, true});
  if (pool.empty()) fail(ErrorKind::dataset, "no annotated centroid has a full 101x101 window");

  std::shuffle(pool.begin(), pool.end(), rng);
  if (count <= pool.size()) {
    pool.resize(count);
    return pool;
  }
  std::vector<PatchRef> out = pool;
  std::vector<PatchRef> augmented;
  for (const auto& r : pool)
    for (auto op : kAugmentOps) augmented.push_back({r.image, r.center, true, op});
  std::shuffle(augmented.begin(), augmented.end(), rng);
  for (std::size_t k = 0; k < augmented.size() && out.size() < count; ++k) out.push_back(augmented[k]);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1), pick_op(0, kAugmentOps.size() - 1);
  while (out.size() < count) {
    const PatchRef& r = pool[pick(rng)];
    out.push_back({r.image, r.center, true, kAugmentOps[pick_op(rng)]});
  }
  return out;
}

inline void draw_uniform_negatives(const std::vector<PreprocessedImage>& images,
                                   const std::vector<AnnotationSet>& truths, std::size_t count,
                                   std::mt19937_64& rng, std::vector<PatchRef>& out) {
  if (count == 0) return;
  std::vector<Mask> masks;
  for (std::size_t i = 0; i < images.size(); ++i) masks.push_back(negative_eligibility(images[i], truths[i]));
  const MaskUnionSampler sampler(std::move(masks));
  if (sampler.total() == 0) fail(ErrorKind::dataset, "no eligible non-MA location for negative patches");
  for (std::size_t k = 0; k < count; ++k) {
    const auto [i, p] = sampler.draw(rng);
    out.push_back({i, p, false});
  }
}

}  // namespace detail

/// Stage-1 epoch: round(epoch_size * ma_fraction) MA patches, the rest uniform
/// non-MA. Positives come first in the returned list.
inline std::vector<PatchRef> sample_balanced(const std::vector<PreprocessedImage>& images,
                                             const std::vector<AnnotationSet>& truths, const SamplePlan& plan) {
  plan.validate();
  detail::check_aligned(images, truths);
  std::mt19937_64 rng(plan.rng_seed);
  const std::size_t n_ma = plan.ma_count();
  std::vector<PatchRef> out = detail::draw_positives(images, truths, n_ma, rng);
  detail::draw_uniform_negatives(images, truths, plan.epoch_size - n_ma, rng, out);
  return out;
}

/// Pixels scored at or above the stage-2 threshold that are valid negatives.
inline std::vector<Mask> hard_negative_masks(const std::vector<PreprocessedImage>& images,
                                             const std::vector<AnnotationSet>& truths,
                                             const std::vector<ProbabilityMap>& maps, double threshold) {
  if (maps.empty()) fail(ErrorKind::pipeline_order, "stage-2 sampling needs stage-1 probability maps");
  if (maps.size() != images.size()) fail(ErrorKind::pipeline_order, "probability maps do not cover every image");
  std::vector<Mask> masks;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ProbabilityMap& map = maps[i];
    if (map.image_id != images[i].image_id) {
      fail(ErrorKind::pipeline_order, "no probability map for image '" + images[i].image_id + "'");
    }
    if (map.width() != images[i].width() || map.height() != images[i].height()) {
      fail(ErrorKind::validation, "probability map size differs from image '" + images[i].image_id + "'");
    }
    Mask m = detail::negative_eligibility(images[i], truths[i]);
    for (std::size_t n = 0; n < m.size(); ++n) m[n] = m[n] && map.valid_mask[n] && map.scores[n] >= threshold;
    masks.push_back(std::move(m));
  }
  return masks;
}

/// Stage-2 epoch: positives as in stage 1; negatives drawn without
/// replacement from the hard-negative set. When that set is smaller than
/// needed, all of it is used and the remainder is uniform non-MA; with an
/// empty set the result equals sample_balanced for the same plan.
inline std::vector<PatchRef> sample_stage2(const std::vector<PreprocessedImage>& images,
                                           const std::vector<AnnotationSet>& truths,
                                           const std::vector<ProbabilityMap>& maps, const SamplePlan& plan) {
  plan.validate();
  detail::check_aligned(images, truths);
  const detail::MaskUnionSampler hard(hard_negative_masks(images, truths, maps, plan.stage2_threshold));
  std::mt19937_64 rng(plan.rng_seed);
  const std::size_t n_ma = plan.ma_count(), n_neg = plan.epoch_size - n_ma;
  std::vector<PatchRef> out = detail::draw_positives(images, truths, n_ma, rng);
  if (hard.total() >= n_neg) {
    // Partial Fisher-Yates over the index space; only displaced slots are stored.
    std::unordered_map<std::size_t, std::size_t> displaced;
    auto value = [&](std::size_t k) {
      const auto it = displaced.find(k);
      return it == displaced.end() ? k : it->second;
    };
    for (std::size_t k = 0; k < n_neg; ++k) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(k, hard.total() - 1)(rng);
      const std::size_t vj = value(j);
      displaced[j] = value(k);
      const auto [i, p] = hard.at(vj);
      out.push_back({i, p, false});
    }
    return out;
  }
  for (std::size_t k = 0; k < hard.total(); ++k) {
    const auto [i, p] = hard.at(k);
    out.push_back({i, p, false});
  }
  detail::draw_uniform_negatives(images, truths, n_neg - hard.total(), rng, out);
  return out;
}

/// Checks every type invariant of a descriptor against its image and truth.
inline void validate_patch_ref(const PatchRef& ref, const std::vector<PreprocessedImage>& images,
                               const std::vector<AnnotationSet>& truths) {
  if (ref.image >= images.size()) fail(ErrorKind::validation, "patch refers to a missing image");
  const auto& image = images[ref.image];
  if (!center_in_margin(image.width(), image.height(), ref.center)) {
    fail(ErrorKind::bounds, "patch window leaves image '" + image.image_id + "'");
  }
  if (ref.ma != is_ma_center(truths[ref.image], ref.center)) {
    fail(ErrorKind::validation, "patch label disagrees with ground truth in '" + image.image_id + "'");
  }
}

// Patch cache: CSV records `source_id,x,y,label,op`; pixels are never stored.

inline void write_patch_cache(std::ostream& out, const std::vector<PatchRef>& refs,
                              const std::vector<PreprocessedImage>& images) {
  out << "source_id,x,y,label,op\n";
  for (const auto& r : refs)
    out << images.at(r.image).image_id << ',' << r.center.x << ',' << r.center.y << ',' << (r.ma ? "MA" : "non-MA")
        << ',' << to_string(r.op) << '\n';
}

inline std::vector<PatchRef> read_patch_cache(std::istream& in, const std::vector<PreprocessedImage>& images,
                                              const std::vector<AnnotationSet>& truths,
                                              const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line) || line != "source_id,x,y,label,op") {
    fail(ErrorKind::format, source + ": missing patch-cache header");
  }
  std::vector<PatchRef> refs;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    const std::string where = source + ":" + std::to_string(line_no);
    if (fields.size() != 5) fail(ErrorKind::parse, where + ": expected 5 fields");
    PatchRef ref;
    const auto it = std::find_if(images.begin(), images.end(), [&](const auto& im) { return im.image_id == fields[0]; });
    if (it == images.end()) fail(ErrorKind::validation, where + ": unknown image '" + fields[0] + "'");
    ref.image = std::size_t(it - images.begin());
    try {
      std::size_t used = 0;
      ref.center.x = std::stoi(fields[1], &used);
      if (used != fields[1].size()) throw std::invalid_argument("x");
      ref.center.y = std::stoi(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("y");
    } catch (const std::exception&) {
      fail(ErrorKind::parse, where + ": bad coordinate");
    }
    if (fields[3] != "MA" && fields[3] != "non-MA") fail(ErrorKind::parse, where + ": bad label '" + fields[3] + "'");
    ref.ma = fields[3] == "MA";
    try {
      ref.op = parse_augment_op(fields[4]);
    } catch (const Error&) {
      fail(ErrorKind::parse, where + ": unknown op '" + fields[4] + "'");
    }
    validate_patch_ref(ref, images, truths);
    refs.push_back(ref);
  }
  return refs;
}

}  // namespace macnn
