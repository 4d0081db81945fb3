#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace patchlab {

enum class ErrorCode {
  io,
  unsupported_format,
  corrupt_header,
  invalid_argument,
  dimension_mismatch,
  image_too_small,
  missing_file,
  empty_input,
  length_mismatch,
  unknown_task,
  conflict,
  precondition,
  wrong_state,
  not_found,
  unknown_worker,
  unknown_token,
  duplicate_submission,
  token_mismatch,
  lease_expired,
  count_mismatch,
  too_few_points,
  out_of_bounds,
  degenerate,
  parse_error,
};

constexpr std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::io: return "io";
    case ErrorCode::unsupported_format: return "unsupported-format";
    case ErrorCode::corrupt_header: return "corrupt-header";
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::dimension_mismatch: return "dimension-mismatch";
    case ErrorCode::image_too_small: return "image-too-small";
    case ErrorCode::missing_file: return "missing-file";
    case ErrorCode::empty_input: return "empty-input";
    case ErrorCode::length_mismatch: return "length-mismatch";
    case ErrorCode::unknown_task: return "unknown-task";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::precondition: return "precondition";
    case ErrorCode::wrong_state: return "wrong-state";
    case ErrorCode::not_found: return "not-found";
    case ErrorCode::unknown_worker: return "unknown-worker";
    case ErrorCode::unknown_token: return "unknown-token";
    case ErrorCode::duplicate_submission: return "duplicate-submission";
    case ErrorCode::token_mismatch: return "token-mismatch";
    case ErrorCode::lease_expired: return "lease-expired";
    case ErrorCode::count_mismatch: return "count-mismatch";
    case ErrorCode::too_few_points: return "too-few-points";
    case ErrorCode::out_of_bounds: return "out-of-bounds";
    case ErrorCode::degenerate: return "degenerate";
    case ErrorCode::parse_error: return "parse-error";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code; the
/// HTTP layer maps codes to status values.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace patchlab
