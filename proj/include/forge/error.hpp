#pragma once

#include <stdexcept>
#include <string>

namespace forge {

/// Host-side API misuse and validation failures. Device-side faults are not
/// exceptions; they are reported through LaunchReport.
enum class ErrorCode {
  InvalidArgument,
  InvalidDescriptor,
  InvalidNitem,
  MissingIdentity,
  WorkspaceTooSmall,
  DimensionMismatch,
  ParseError,
  Unsupported,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace forge
