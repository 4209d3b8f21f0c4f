#pragma once

// Disk smoothing of probability maps and local-maximum candidate extraction.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "macnn/probability_map.hpp"

namespace macnn {

inline constexpr std::size_t kDefaultPostRadius = 5;
inline constexpr double kDefaultScoreFloor = 1e-3;

struct Candidate {
  std::string image_id;
  Point position;
  real_t score = 0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

/// Offsets (dx, dy) with dx² + dy² <= radius², row-major.
inline std::vector<Point> disk_offsets(std::size_t radius) {
  const int r = static_cast<int>(radius);
  std::vector<Point> out;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * r) out.push_back({dx, dy});
  return out;
}

namespace detail {

inline bool map_valid(const ProbabilityMap& map, long x, long y) {
  return map.valid_mask.size() == 0 || map.valid_mask.at(std::size_t(x), std::size_t(y));
}

inline void check_map_mask(const ProbabilityMap& map, const char* what) {
  if (map.valid_mask.size() != 0 &&
      (map.valid_mask.width() != map.width() || map.valid_mask.height() != map.height())) {
    fail(ErrorKind::shape, std::string(what) + ": valid mask size does not match the map");
  }
}

}  // namespace detail

/// Mean over the in-mask part of a flat disk. Pixels outside the mask stay 0.
/// An empty valid_mask counts every pixel as valid.
inline ProbabilityMap disk_smooth(const ProbabilityMap& map, std::size_t radius = kDefaultPostRadius) {
  if (radius < 1) fail(ErrorKind::validation, "disk_smooth: radius must be at least 1");
  detail::check_map_mask(map, "disk_smooth");
  const auto offsets = disk_offsets(radius);
  ProbabilityMap out{map.image_id, Raster<real_t>(map.width(), map.height(), 0), map.stride, map.valid_mask};
  const long w = long(map.width()), h = long(map.height());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      if (!detail::map_valid(map, x, y)) continue;
      real_t sum = 0;
      std::size_t count = 0;
      for (const Point& d : offsets) {
        const long xx = x + d.x, yy = y + d.y;
        if (xx < 0 || yy < 0 || xx >= w || yy >= h || !detail::map_valid(map, xx, yy)) continue;
        sum += map.scores.at(std::size_t(xx), std::size_t(yy));
        ++count;
      }
      out.scores.at(std::size_t(x), std::size_t(y)) = sum / real_t(count);
    }
  return out;
}

/// A valid pixel is a maximum when no pixel within `radius` is larger and its
/// value exceeds `floor`. Maxima closer than `radius` to each other carry equal
/// values; each such group yields one candidate at its rounded centroid, or at
/// the member nearest to it when the centroid falls outside the group.
/// Output order: score descending, then y, then x.
inline std::vector<Candidate> extract_candidates(const ProbabilityMap& smoothed,
                                                 std::size_t radius = kDefaultPostRadius,
                                                 double floor = kDefaultScoreFloor) {
  detail::check_map_mask(smoothed, "extract_candidates");
  const auto offsets = disk_offsets(radius);
  const long w = long(smoothed.width()), h = long(smoothed.height());
  const auto& s = smoothed.scores;

  std::vector<std::size_t> maxima;
  Raster<int> index(smoothed.width(), smoothed.height(), -1);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      if (!detail::map_valid(smoothed, x, y)) continue;
      const real_t v = s.at(std::size_t(x), std::size_t(y));
      if (!(v > floor)) continue;
      bool is_max = true;
      for (const Point& d : offsets) {
        const long xx = x + d.x, yy = y + d.y;
        if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
        if (s.at(std::size_t(xx), std::size_t(yy)) > v) {
          is_max = false;
          break;
        }
      }
      if (!is_max) continue;
      index.at(std::size_t(x), std::size_t(y)) = int(maxima.size());
      maxima.push_back(std::size_t(y * w + x));
    }

  std::vector<std::size_t> parent(maxima.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (std::size_t m = 0; m < maxima.size(); ++m) {
    const long x = long(maxima[m] % std::size_t(w)), y = long(maxima[m] / std::size_t(w));
    for (const Point& d : offsets) {
      const long xx = x + d.x, yy = y + d.y;
      if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
      const int other = index.at(std::size_t(xx), std::size_t(yy));
      if (other < 0 || std::size_t(other) >= m) continue;
      const std::size_t a = find(m), b = find(std::size_t(other));
      if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
  }

  std::vector<std::vector<std::size_t>> groups(maxima.size());
  for (std::size_t m = 0; m < maxima.size(); ++m) groups[find(m)].push_back(maxima[m]);

  std::vector<Candidate> out;
  for (const auto& group : groups) {
    if (group.empty()) continue;
    double sx = 0, sy = 0;
    for (std::size_t p : group) {
      sx += double(p % std::size_t(w));
      sy += double(p / std::size_t(w));
    }
    const Point centroid{int(std::lround(sx / double(group.size()))), int(std::lround(sy / double(group.size())))};
    Point best{int(group[0] % std::size_t(w)), int(group[0] / std::size_t(w))};
    for (std::size_t p : group) {
      const Point q{int(p % std::size_t(w)), int(p / std::size_t(w))};
      if (squared_distance(q, centroid) < squared_distance(best, centroid)) best = q;
    }
    out.push_back({smoothed.image_id, best, s.at(std::size_t(best.x), std::size_t(best.y))});
  }
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.position.y != b.position.y) return a.position.y < b.position.y;
    return a.position.x < b.position.x;
  });
  return out;
}

inline std::vector<Candidate> postprocess(const ProbabilityMap& map, std::size_t radius = kDefaultPostRadius,
                                          std::size_t nms_radius = kDefaultPostRadius,
                                          double floor = kDefaultScoreFloor) {
  return extract_candidates(disk_smooth(map, radius), nms_radius, floor);
}

namespace detail {

inline std::string format_score(real_t v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, double(v), std::chars_format::fixed, 6);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline void write_candidates(std::ostream& out, const std::vector<Candidate>& candidates) {
  out << "image_id,x,y,score\n";
  for (const auto& c : candidates) {
    out << c.image_id << ',' << c.position.x << ',' << c.position.y << ',' << detail::format_score(c.score) << '\n';
  }
}

inline void save_candidates(const std::filesystem::path& path, const std::vector<Candidate>& candidates) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  write_candidates(out, candidates);
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

inline std::vector<Candidate> parse_candidates(std::istream& in, const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line) || line != "image_id,x,y,score") {
    fail(ErrorKind::format, source + ": expected header 'image_id,x,y,score'");
  }
  std::vector<Candidate> out;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1)
      f.push_back(line.substr(start, pos - start));
    f.push_back(line.substr(start));
    if (f.size() != 4 || f[0].empty()) fail(ErrorKind::format, where + ": expected 4 fields");
    Candidate c{f[0], {}, 0};
    double score = 0;
    auto num = [&](const std::string& t, auto& v) {
      const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
      if (res.ec != std::errc{} || res.ptr != t.data() + t.size()) fail(ErrorKind::parse, where + ": bad number '" + t + "'");
    };
    num(f[1], c.position.x);
    num(f[2], c.position.y);
    num(f[3], score);
    if (!(score >= 0 && score <= 1)) fail(ErrorKind::validation, where + ": score out of [0,1]");
    c.score = real_t(score);
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<Candidate> load_candidates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  return parse_candidates(in, path.string());
}

}  // namespace macnn
