#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ntkmeta {

enum class ErrorCode {
  dimension_mismatch,
  kernel_singular,
  pade_singular,
  invalid_argument,
  config,
  io,
  spec_mismatch,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::dimension_mismatch: return "dimension-mismatch";
    case ErrorCode::kernel_singular: return "kernel-singular";
    case ErrorCode::pade_singular: return "pade-singular";
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::config: return "config";
    case ErrorCode::io: return "io";
    case ErrorCode::spec_mismatch: return "spec-mismatch";
  }
  return "unknown";
}

/// Base exception for every failure raised by the library. `code()` is the
/// stable machine-readable tag; `field()` names the offending config path
/// when there is one.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string field = {})
      : std::runtime_error(message), code_(code), field_(std::move(field)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& field() const noexcept { return field_; }

 private:
  ErrorCode code_;
  std::string field_;
};

/// Raised when an SPD factorization still fails at the jitter cap.
class KernelSingularError : public Error {
 public:
  KernelSingularError(const std::string& message, double min_pivot, double jitter)
      : Error(ErrorCode::kernel_singular, message), min_pivot_(min_pivot), jitter_(jitter) {}

  double min_pivot() const noexcept { return min_pivot_; }
  double final_jitter() const noexcept { return jitter_; }

 private:
  double min_pivot_;
  double jitter_;
};

}  // namespace ntkmeta
