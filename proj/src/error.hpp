// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace qntz {

enum class ErrorCode {
  invalid_argument = 1,
  io = 2,
  malformed_header = 3,
  truncated = 4,
  duplicate_name = 5,
  invariant_violation = 6,
  manifest_syntax = 7,
  dangling_reference = 8,
  shape_mismatch = 9,
  non_finite = 10,
  invalid_code = 11,
  accumulator_overflow = 12,
  missing_format = 13,
  unsupported = 14,
  empty_input = 15,
  diverged = 16,
};

const char* error_code_name(ErrorCode code) noexcept;

// Every failure raised by the core carries a code so the C boundary can map
// it onto a status without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace qntz
