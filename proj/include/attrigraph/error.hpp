// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace attrigraph {

enum class ErrorKind {
  input,             // caller supplied an invalid argument or case
  structural,        // tensor/tape shapes do not line up
  numeric,           // NaN or Inf produced by an engine operation
  unsupported_rule,  // no backward rule for an op under the selected variant
  bad_magic,
  bad_version,
  shape_mismatch,
  checksum,
  malformed,         // a file parsed but violates its schema
  io,
  computation,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace attrigraph
