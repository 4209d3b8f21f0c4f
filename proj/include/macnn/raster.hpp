#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "macnn/tensor.hpp"

namespace macnn {

/// Integer pixel position: x = column, y = row, origin top-left.
struct Point {
  int x = 0;
  int y = 0;
  friend auto operator<=>(const Point&, const Point&) = default;
};

inline long squared_distance(Point a, Point b) {
  const long dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}

/// Row-major 2-D grid.
template <class T>
class Raster {
 public:
  Raster() = default;
  Raster(std::size_t width, std::size_t height, T fill = T{})
      : width_(width), height_(height), data_(width * height, fill) {}

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& at(std::size_t x, std::size_t y) noexcept { return data_[y * width_ + x]; }
  const T& at(std::size_t x, std::size_t y) const noexcept { return data_[y * width_ + x]; }
  T& operator[](std::size_t n) noexcept { return data_[n]; }
  const T& operator[](std::size_t n) const noexcept { return data_[n]; }

  bool contains(long x, long y) const noexcept {
    return x >= 0 && y >= 0 && x < static_cast<long>(width_) && y < static_cast<long>(height_);
  }

  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<T> data_;
};

/// Boolean raster stored as bytes (0 = false, 1 = true).
using Mask = Raster<std::uint8_t>;

inline std::size_t count_set(const Mask& mask) {
  std::size_t n = 0;
  for (auto v : mask.values()) n += v != 0;
  return n;
}

/// One fundus image. pixels is [3, H, W] (R, G, B) with values in [0, 1].
struct ImageRecord {
  std::string image_id;
  Tensor pixels;
  Mask fov_mask;

  std::size_t width() const { return pixels.dim(2); }
  std::size_t height() const { return pixels.dim(1); }
};

/// Ground-truth lesion centroids for one image.
struct AnnotationSet {
  std::string image_id;
  std::vector<Point> centroids;
  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

}  // namespace macnn
