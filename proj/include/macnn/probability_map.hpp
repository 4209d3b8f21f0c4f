#pragma once

// Per-pixel MA probability raster and its on-disk forms.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>

#include "macnn/dataset_io.hpp"

namespace macnn {

struct ProbabilityMap {
  std::string image_id;
  Raster<real_t> scores;  // 0 outside valid_mask
  std::size_t stride = 1;
  Mask valid_mask;

  std::size_t width() const { return scores.width(); }
  std::size_t height() const { return scores.height(); }
};

namespace detail {

inline std::string format_real(real_t v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// Text form: header `PMAP 1 <w> <h> <stride>` then one line of W values per row.
/// Values use the shortest round-trip representation.
inline void write_pmap(std::ostream& out, const ProbabilityMap& map) {
  out << "PMAP 1 " << map.width() << ' ' << map.height() << ' ' << map.stride << '\n';
  std::string line;
  for (std::size_t y = 0; y < map.height(); ++y) {
    line.clear();
    for (std::size_t x = 0; x < map.width(); ++x) {
      if (x) line += ' ';
      line += detail::format_real(map.scores.at(x, y));
    }
    line += '\n';
    out << line;
  }
}

/// Reads the score raster. The valid mask is not part of the text form and is
/// left empty; callers that need it load the companion mask image.
inline ProbabilityMap read_pmap(std::istream& in, const std::string& source = "<stream>") {
  std::string magic;
  int version = 0;
  long width = 0, height = 0, stride = 0;
  if (!(in >> magic >> version >> width >> height >> stride) || magic != "PMAP") {
    fail(ErrorKind::format, source + ": missing PMAP header");
  }
  if (version != 1) fail(ErrorKind::format, source + ": unsupported PMAP version " + std::to_string(version));
  if (width < 1 || height < 1 || stride < 1) fail(ErrorKind::format, source + ": bad PMAP dimensions");
  ProbabilityMap map{"", Raster<real_t>(std::size_t(width), std::size_t(height)), std::size_t(stride), {}};
  std::string token;
  for (std::size_t n = 0; n < map.scores.size(); ++n) {
    if (!(in >> token)) fail(ErrorKind::format, source + ": truncated PMAP data");
    real_t v{};
    const auto res = std::from_chars(token.data(), token.data() + token.size(), v);
    if (res.ec != std::errc{} || res.ptr != token.data() + token.size()) {
      fail(ErrorKind::parse, source + ": bad value '" + token + "' at row " + std::to_string(n / width + 1));
    }
    if (!(v >= 0 && v <= 1)) fail(ErrorKind::validation, source + ": score out of [0,1]: " + token);
    map.scores[n] = v;
  }
  if (in >> token) fail(ErrorKind::format, source + ": trailing data after PMAP raster");
  return map;
}

/// Writes `<dir>/<id>.pmap` and the companion `<dir>/<id>.valid.png`.
inline void save_probability_map(const std::filesystem::path& dir, const ProbabilityMap& map) {
  std::filesystem::create_directories(dir);
  const auto path = dir / (map.image_id + ".pmap");
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  write_pmap(out, map);
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
  save_mask(dir / (map.image_id + ".valid.png"), map.valid_mask);
}

inline ProbabilityMap load_probability_map(const std::filesystem::path& dir, const std::string& image_id) {
  const auto path = dir / (image_id + ".pmap");
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  ProbabilityMap map = read_pmap(in, path.string());
  map.image_id = image_id;
  map.valid_mask = load_mask(dir / (image_id + ".valid.png"));
  if (map.valid_mask.width() != map.width() || map.valid_mask.height() != map.height()) {
    fail(ErrorKind::format, path.string() + ": valid mask size does not match the map");
  }
  return map;
}

/// 16-bit binary PGM, value = round(score * 65535).
inline void export_pgm(const std::filesystem::path& path, const ProbabilityMap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << "P5\n" << map.width() << ' ' << map.height() << "\n65535\n";
  for (std::size_t n = 0; n < map.scores.size(); ++n) {
    const auto v = static_cast<unsigned>(std::lround(std::clamp<real_t>(map.scores[n], 0, 1) * 65535));
    const char bytes[2] = {static_cast<char>(v >> 8), static_cast<char>(v & 0xff)};
    out.write(bytes, 2);
  }
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

}  // namespace macnn
