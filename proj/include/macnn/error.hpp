#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace macnn {

/// Error categories. Each one maps to a distinct process exit code in the CLI.
enum class ErrorKind {
  usage,
  config,
  io,
  format,
  parse,
  validation,
  shape,
  spec,
  dataset,
  pipeline_order,
  divergence,
  generation,
  size,
  undefined_metric,
  checkpoint,
  bounds,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::parse: return "parse";
    case ErrorKind::validation: return "validation";
    case ErrorKind::shape: return "shape";
    case ErrorKind::spec: return "spec";
    case ErrorKind::dataset: return "dataset";
    case ErrorKind::pipeline_order: return "pipeline-order";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::generation: return "generation";
    case ErrorKind::size: return "size";
    case ErrorKind::undefined_metric: return "undefined-metric";
    case ErrorKind::checkpoint: return "checkpoint";
    case ErrorKind::bounds: return "out-of-bounds";
  }
  return "unknown";
}

/// Exit code for a category. 0 is success, 1 is reserved for unexpected failures.
constexpr int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::config: return 3;
    case ErrorKind::io: return 4;
    case ErrorKind::format: return 5;
    case ErrorKind::parse: return 6;
    case ErrorKind::validation: return 7;
    case ErrorKind::shape: return 8;
    case ErrorKind::spec: return 9;
    case ErrorKind::dataset: return 10;
    case ErrorKind::pipeline_order: return 11;
    case ErrorKind::divergence: return 12;
    case ErrorKind::generation: return 13;
    case ErrorKind::size: return 14;
    case ErrorKind::undefined_metric: return 15;
    case ErrorKind::checkpoint: return 16;
    case ErrorKind::bounds: return 17;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace macnn
