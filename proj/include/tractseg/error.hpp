#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tractseg {

enum class ErrorKind {
  index,
  domain,
  grid_mismatch,
  shape_mismatch,
  length_mismatch,
  bad_magic,
  unsupported_datatype,
  unsupported_endianness,
  truncated,
  io,
  parse,
  degenerate_pair,
  insufficient_directions,
  divergence,
  zero_mass,
  undefined_metric,
  empty_input,
  config,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::index: return "index";
    case ErrorKind::domain: return "domain";
    case ErrorKind::grid_mismatch: return "grid_mismatch";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::length_mismatch: return "length_mismatch";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::unsupported_datatype: return "unsupported_datatype";
    case ErrorKind::unsupported_endianness: return "unsupported_endianness";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::io: return "io";
    case ErrorKind::parse: return "parse";
    case ErrorKind::degenerate_pair: return "degenerate_pair";
    case ErrorKind::insufficient_directions: return "insufficient_directions";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::zero_mass: return "zero_mass";
    case ErrorKind::undefined_metric: return "undefined_metric";
    case ErrorKind::empty_input: return "empty_input";
    case ErrorKind::config: return "config";
  }
  return "unknown";
}

/// Library-wide exception. The kind lets callers (and the CLI) tell
/// failure modes apart without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace tractseg
