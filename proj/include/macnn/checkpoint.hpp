#pragma once

// Checkpoint container:
//
//   MACNN1
//   digest <sha256 of spec text>
//   spec <byte count>
//   <spec text>
//   meta <epoch> <seed> <history length>
//   <history: (loss, accuracy) pairs as little-endian float64>
//   tensors <count>            then per tensor: "<name> <rank> <dims...>\n" + LE float64 data
//   velocity <count>           same layout, names prefixed with "v:"
//   end

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "macnn/network.hpp"

namespace macnn {

inline constexpr std::string_view kCheckpointMagic = "MACNN1";

namespace detail {

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char bytes[8];
  std::memcpy(bytes, &bits, 8);
  out.append(bytes, 8);
}

inline double get_f64(std::istream& in, const std::string& source) {
  char bytes[8];
  if (!in.read(bytes, 8)) fail(ErrorKind::checkpoint, source + ": truncated data");
  std::uint64_t bits;
  std::memcpy(&bits, bytes, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

inline void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  out += name + ' ' + std::to_string(t.rank());
  for (auto d : t.shape()) out += ' ' + std::to_string(d);
  out += '\n';
  for (auto v : t.data()) put_f64(out, double(v));
}

inline std::string header_line(std::istream& in, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::checkpoint, source + ": truncated header");
  return line;
}

inline Tensor get_tensor(std::istream& in, const std::string& expected_name, const std::string& source) {
  std::istringstream ls(header_line(in, source));
  std::string name;
  std::size_t rank = 0;
  if (!(ls >> name >> rank) || name != expected_name) {
    fail(ErrorKind::checkpoint, source + ": expected tensor '" + expected_name + "'");
  }
  Shape shape(rank);
  for (auto& d : shape)
    if (!(ls >> d)) fail(ErrorKind::checkpoint, source + ": bad shape for '" + name + "'");
  Tensor t(shape);
  for (auto& v : t.data()) v = static_cast<real_t>(get_f64(in, source));
  return t;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  check_weights(ckpt.spec, ckpt.weights);
  check_weights(ckpt.spec, ckpt.velocity);
  if (ckpt.meta.loss_history.size() != ckpt.meta.accuracy_history.size()) {
    fail(ErrorKind::checkpoint, "loss and accuracy histories differ in length");
  }
  const std::string text = spec_text(ckpt.spec);
  std::string out;
  out += std::string(kCheckpointMagic) + '\n';
  out += "digest " + sha256_hex(text) + '\n';
  out += "spec " + std::to_string(text.size()) + '\n' + text;
  out += "meta " + std::to_string(ckpt.meta.epoch) + ' ' + std::to_string(ckpt.meta.seed) + ' ' +
         std::to_string(ckpt.meta.loss_history.size()) + '\n';
  for (std::size_t i = 0; i < ckpt.meta.loss_history.size(); ++i) {
    detail::put_f64(out, ckpt.meta.loss_history[i]);
    detail::put_f64(out, ckpt.meta.accuracy_history[i]);
  }
  const auto names = parameter_names(ckpt.spec);
  out += "tensors " + std::to_string(names.size()) + '\n';
  for (std::size_t i = 0; i < names.size(); ++i) detail::put_tensor(out, names[i], ckpt.weights[i]);
  out += "velocity " + std::to_string(names.size()) + '\n';
  for (std::size_t i = 0; i < names.size(); ++i) detail::put_tensor(out, "v:" + names[i], ckpt.velocity[i]);
  out += "end\n";
  return out;
}

/// SHA-256 of the serialized form; equal checkpoints have equal digests.
inline std::string checkpoint_digest(const Checkpoint& ckpt) { return sha256_hex(serialize_checkpoint(ckpt)); }

/// Parses a checkpoint. With `expected`, the stored spec digest must match it.
inline Checkpoint deserialize_checkpoint(std::istream& in, const std::string& source,
                                         const std::optional<NetworkSpec>& expected = std::nullopt) {
  if (detail::header_line(in, source) != kCheckpointMagic) fail(ErrorKind::checkpoint, source + ": not a MACNN1 checkpoint");
  std::string word, digest;
  std::istringstream(detail::header_line(in, source)) >> word >> digest;
  if (word != "digest" || digest.size() != 64) fail(ErrorKind::checkpoint, source + ": missing spec digest");
  std::size_t text_size = 0;
  std::istringstream(detail::header_line(in, source)) >> word >> text_size;
  if (word != "spec") fail(ErrorKind::checkpoint, source + ": missing spec section");
  std::string text(text_size, '\0');
  if (!in.read(text.data(), std::streamsize(text_size))) fail(ErrorKind::checkpoint, source + ": truncated spec");
  if (sha256_hex(text) != digest) fail(ErrorKind::checkpoint, source + ": spec text does not match its digest");
  if (expected && spec_digest(*expected) != digest) {
    fail(ErrorKind::checkpoint, source + ": spec digest " + digest.substr(0, 12) + " does not match network '" +
                                    expected->name + "' (" + spec_digest(*expected).substr(0, 12) + ")");
  }
  Checkpoint ckpt;
  try {
    ckpt.spec = parse_spec_text(text);
  } catch (const Error& e) {
    fail(ErrorKind::checkpoint, source + ": " + e.what());
  }
  std::size_t history = 0;
  std::istringstream(detail::header_line(in, source)) >> word >> ckpt.meta.epoch >> ckpt.meta.seed >> history;
  if (word != "meta") fail(ErrorKind::checkpoint, source + ": missing meta section");
  for (std::size_t i = 0; i < history; ++i) {
    ckpt.meta.loss_history.push_back(detail::get_f64(in, source));
    ckpt.meta.accuracy_history.push_back(detail::get_f64(in, source));
  }
  const auto names = parameter_names(ckpt.spec);
  for (const char* section : {"tensors", "velocity"}) {
    std::size_t count = 0;
    std::istringstream(detail::header_line(in, source)) >> word >> count;
    if (word != section || count != names.size()) fail(ErrorKind::checkpoint, source + ": bad " + section + " section");
    auto& dest = std::string_view(section) == "tensors" ? ckpt.weights : ckpt.velocity;
    for (const auto& n : names)
      dest.push_back(detail::get_tensor(in, std::string_view(section) == "tensors" ? n : "v:" + n, source));
  }
  if (detail::header_line(in, source) != "end") fail(ErrorKind::checkpoint, source + ": missing end marker");
  try {
    check_weights(ckpt.spec, ckpt.weights);
    check_weights(ckpt.spec, ckpt.velocity);
  } catch (const Error& e) {
    fail(ErrorKind::checkpoint, source + ": " + e.what());
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize_checkpoint(ckpt);
  // Write then rename so a crash never leaves a half-written checkpoint behind.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write checkpoint '" + tmp.string() + "'");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) fail(ErrorKind::io, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<NetworkSpec>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open checkpoint '" + path.string() + "'");
  return deserialize_checkpoint(in, path.string(), expected);
}

}  // namespace macnn
