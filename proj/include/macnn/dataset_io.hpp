#pragma once

// Fundus image ingestion, centroid annotations, FOV masks.
//
// Annotation CSV:  header `image_id,x,y`, one row per centroid, integer pixel
// coordinates with x = column, y = row, origin top-left.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "macnn/image_codec.hpp"
#include "macnn/raster.hpp"

namespace macnn {

inline constexpr double kDefaultFovThreshold = 0.03;

// ---------------------------------------------------------------------------
// Connected components

namespace detail {

/// Labels 8- or 4-connected components of `mask` (non-zero pixels). Returns
/// the label raster (0 = background, labels from 1 in row-major discovery
/// order) and the component count.
inline std::pair<Raster<int>, int> label_components(const Mask& mask, bool eight_connected) {
  Raster<int> labels(mask.width(), mask.height(), 0);
  int count = 0;
  std::vector<std::pair<long, long>> stack;
  for (std::size_t y = 0; y < mask.height(); ++y) {
    for (std::size_t x = 0; x < mask.width(); ++x) {
      if (!mask.at(x, y) || labels.at(x, y)) continue;
      ++count;
      labels.at(x, y) = count;
      stack.assign(1, {static_cast<long>(x), static_cast<long>(y)});
      while (!stack.empty()) {
        const auto [cx, cy] = stack.back();
        stack.pop_back();
        for (long dy = -1; dy <= 1; ++dy) {
          for (long dx = -1; dx <= 1; ++dx) {
            if ((dx == 0 && dy == 0) || (!eight_connected && dx != 0 && dy != 0)) continue;
            const long nx = cx + dx, ny = cy + dy;
            if (!mask.contains(nx, ny) || !mask.at(nx, ny) || labels.at(nx, ny)) continue;
            labels.at(nx, ny) = count;
            stack.emplace_back(nx, ny);
          }
        }
      }
    }
  }
  return {std::move(labels), count};
}

}  // namespace detail

/// One centroid per 8-connected component, at the rounded pixel-mean position.
/// Components are reported in row-major order of their first pixel.
inline std::vector<Point> mask_to_centroids(const Mask& mask) {
  const auto [labels, count] = detail::label_components(mask, true);
  std::vector<double> sx(count + 1, 0.0), sy(count + 1, 0.0), n(count + 1, 0.0);
  for (std::size_t y = 0; y < mask.height(); ++y)
    for (std::size_t x = 0; x < mask.width(); ++x) {
      const int l = labels.at(x, y);
      if (!l) continue;
      sx[l] += double(x);
      sy[l] += double(y);
      n[l] += 1;
    }
  std::vector<Point> centroids;
  centroids.reserve(count);
  for (int l = 1; l <= count; ++l)
    centroids.push_back({static_cast<int>(std::lround(sx[l] / n[l])), static_cast<int>(std::lround(sy[l] / n[l]))});
  return centroids;
}

/// Green channel > threshold after 5x5 mean smoothing (window clipped at the
/// image border), largest 8-connected component kept, holes filled.
inline Mask compute_fov_mask(const Tensor& pixels, double threshold = kDefaultFovThreshold) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) {
    fail(ErrorKind::shape, "compute_fov_mask expects [3,H,W] pixels, got " + shape_string(pixels.shape()));
  }
  const std::size_t height = pixels.dim(1), width = pixels.dim(2);
  Mask raw(width, height, 0);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double sum = 0;
      int count = 0;
      for (long dy = -2; dy <= 2; ++dy)
        for (long dx = -2; dx <= 2; ++dx) {
          const long yy = long(y) + dy, xx = long(x) + dx;
          if (!raw.contains(xx, yy)) continue;
          sum += pixels(1, yy, xx);
          ++count;
        }
      raw.at(x, y) = sum / count > threshold;
    }
  }

  const auto [labels, count] = detail::label_components(raw, true);
  Mask fov(width, height, 0);
  if (count == 0) return fov;
  std::vector<std::size_t> area(count + 1, 0);
  for (std::size_t n = 0; n < labels.size(); ++n) area[labels[n]]++;
  int largest = 1;
  for (int l = 2; l <= count; ++l)
    if (area[l] > area[largest]) largest = l;
  for (std::size_t n = 0; n < labels.size(); ++n) fov[n] = labels[n] == largest;

  // Holes: background components (4-connected) that do not touch the border.
  Mask background(width, height, 0);
  for (std::size_t n = 0; n < fov.size(); ++n) background[n] = !fov[n];
  const auto [bg_labels, bg_count] = detail::label_components(background, false);
  std::vector<bool> touches_border(bg_count + 1, false);
  for (std::size_t x = 0; x < width; ++x) {
    touches_border[bg_labels.at(x, 0)] = true;
    touches_border[bg_labels.at(x, height - 1)] = true;
  }
  for (std::size_t y = 0; y < height; ++y) {
    touches_border[bg_labels.at(0, y)] = true;
    touches_border[bg_labels.at(width - 1, y)] = true;
  }
  for (std::size_t n = 0; n < fov.size(); ++n)
    if (bg_labels[n] && !touches_border[bg_labels[n]]) fov[n] = 1;
  return fov;
}

// ---------------------------------------------------------------------------
// Images

/// 8-bit samples to [0,1] reals: value / 255.
inline Tensor pixels_from_rgb8(const RawImage& raw) {
  Tensor pixels({3, raw.height, raw.width});
  for (std::size_t y = 0; y < raw.height; ++y)
    for (std::size_t x = 0; x < raw.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        pixels(c, y, x) = static_cast<real_t>(raw.samples[(y * raw.width + x) * 3 + c] / 255.0);
  return pixels;
}

inline RawImage rgb8_from_pixels(const Tensor& pixels) {
  RawImage raw{pixels.dim(2), pixels.dim(1), 3, 8, {}};
  raw.samples.resize(raw.width * raw.height * 3);
  for (std::size_t y = 0; y < raw.height; ++y)
    for (std::size_t x = 0; x < raw.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(double(pixels(c, y, x)), 0.0, 1.0);
        raw.samples[(y * raw.width + x) * 3 + c] = static_cast<std::uint16_t>(std::lround(v * 255.0));
      }
  return raw;
}

/// Loads an 8-bit RGB PNG or JPEG. image_id is the file stem.
inline ImageRecord load_image(const std::filesystem::path& path, double fov_threshold = kDefaultFovThreshold) {
  if (!std::filesystem::is_regular_file(path)) fail(ErrorKind::io, "no such image file '" + path.string() + "'");
  const RawImage raw = has_png_signature(path) ? read_png(path) : read_jpeg(path);
  if (raw.channels != 3) fail(ErrorKind::format, "'" + path.string() + "' is not an RGB image");
  if (raw.bit_depth != 8) fail(ErrorKind::format, "'" + path.string() + "' is not an 8-bit image");
  ImageRecord record{path.stem().string(), pixels_from_rgb8(raw), {}};
  record.fov_mask = compute_fov_mask(record.pixels, fov_threshold);
  return record;
}

/// Writes pixels as an 8-bit RGB PNG (values rounded to the nearest 1/255).
inline void save_image(const std::filesystem::path& path, const Tensor& pixels) {
  write_png(path, rgb8_from_pixels(pixels));
}

inline void save_mask(const std::filesystem::path& path, const Mask& mask) {
  RawImage raw{mask.width(), mask.height(), 1, 8, {}};
  raw.samples.reserve(mask.size());
  for (auto v : mask.values()) raw.samples.push_back(v ? 255 : 0);
  write_png(path, raw);
}

inline Mask load_mask(const std::filesystem::path& path) {
  const RawImage raw = read_png(path);
  if (raw.channels != 1) fail(ErrorKind::format, "mask '" + path.string() + "' must be single-channel");
  Mask mask(raw.width, raw.height, 0);
  for (std::size_t n = 0; n < mask.size(); ++n) mask[n] = raw.samples[n] != 0;
  return mask;
}

// ---------------------------------------------------------------------------
// Annotations

/// Parses the centroid CSV. Sets are returned sorted by image_id, each
/// with centroids in file order. Duplicate (image_id, x, y) rows are rejected.
inline std::vector<AnnotationSet> parse_annotations(std::istream& in, const std::string& source = "<stream>") {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) return {};
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "image_id,x,y") {
    fail(ErrorKind::parse, source + ":1: expected header 'image_id,x,y', got '" + line + "'");
  }
  std::map<std::string, AnnotationSet> sets;
  std::set<std::tuple<std::string, int, int>> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 3 || fields[0].empty()) fail(ErrorKind::parse, where + ": expected 'image_id,x,y'");
    int coords[2];
    for (int k = 0; k < 2; ++k) {
      std::size_t used = 0;
      try {
        coords[k] = std::stoi(fields[1 + k], &used);
      } catch (const std::exception&) {
        used = std::string::npos;
      }
      if (used != fields[1 + k].size()) fail(ErrorKind::parse, where + ": '" + fields[1 + k] + "' is not an integer");
    }
    if (coords[0] < 0 || coords[1] < 0) {
      fail(ErrorKind::validation, where + ": centroid (" + fields[1] + "," + fields[2] + ") outside image bounds");
    }
    if (!seen.emplace(fields[0], coords[0], coords[1]).second) {
      fail(ErrorKind::validation, where + ": duplicate centroid for image '" + fields[0] + "'");
    }
    auto& set = sets[fields[0]];
    set.image_id = fields[0];
    set.centroids.push_back({coords[0], coords[1]});
  }
  std::vector<AnnotationSet> out;
  for (auto& [id, set] : sets) out.push_back(std::move(set));
  return out;
}

inline std::vector<AnnotationSet> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open annotations '" + path.string() + "'");
  return parse_annotations(in, path.string());
}

inline void write_annotations(std::ostream& out, const std::vector<AnnotationSet>& sets) {
  out << "image_id,x,y\n";
  for (const auto& set : sets)
    for (const auto& p : set.centroids) out << set.image_id << ',' << p.x << ',' << p.y << '\n';
}

inline void save_annotations(const std::filesystem::path& path, const std::vector<AnnotationSet>& sets) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write annotations '" + path.string() + "'");
  write_annotations(out, sets);
}

/// Checks centroids are unique, inside the image and inside the FOV mask.
inline void validate_annotations(const AnnotationSet& set, const ImageRecord& image) {
  if (set.image_id != image.image_id) {
    fail(ErrorKind::validation, "annotation set '" + set.image_id + "' paired with image '" + image.image_id + "'");
  }
  std::set<Point> unique;
  for (const Point& p : set.centroids) {
    const std::string where = "image '" + set.image_id + "' centroid (" + std::to_string(p.x) + "," +
                              std::to_string(p.y) + ")";
    if (!image.fov_mask.contains(p.x, p.y)) fail(ErrorKind::validation, where + " outside image bounds");
    if (!image.fov_mask.at(p.x, p.y)) fail(ErrorKind::validation, where + " outside the field of view");
    if (!unique.insert(p).second) fail(ErrorKind::validation, where + " is duplicated");
  }
}

/// A dataset directory: `images/` holding PNG/JPEG files and `annotations.csv`.
struct Dataset {
  std::vector<ImageRecord> images;
  std::vector<AnnotationSet> annotations;  // aligned with images; empty sets for lesion-free images
};

inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(ErrorKind::io, "no such image directory '" + dir.string() + "'");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline Dataset load_dataset(const std::filesystem::path& dir, double fov_threshold = kDefaultFovThreshold) {
  Dataset data;
  for (const auto& file : list_images(dir / "images")) data.images.push_back(load_image(file, fov_threshold));
  if (data.images.empty()) fail(ErrorKind::dataset, "no images found in '" + (dir / "images").string() + "'");
  std::map<std::string, AnnotationSet> by_id;
  const auto csv = dir / "annotations.csv";
  if (std::filesystem::exists(csv)) {
    for (auto& set : load_annotations(csv)) by_id[set.image_id] = std::move(set);
  }
  for (const auto& image : data.images) {
    auto it = by_id.find(image.image_id);
    AnnotationSet set{image.image_id, {}};
    if (it != by_id.end()) {
      set = std::move(it->second);
      by_id.erase(it);
    }
    validate_annotations(set, image);
    data.annotations.push_back(std::move(set));
  }
  if (!by_id.empty()) {
    fail(ErrorKind::validation, "annotations reference unknown image '" + by_id.begin()->first + "'");
  }
  return data;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir / "images");
  for (const auto& image : data.images) save_image(dir / "images" / (image.image_id + ".png"), image.pixels);
  save_annotations(dir / "annotations.csv", data.annotations);
}

}  // namespace macnn
