// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dropin {

/// Coarse error category. The CLI maps each category to its own exit code.
enum class ErrorKind {
  kArgument,  // caller violated a precondition
  kShape,     // tensor shapes do not line up
  kState,     // operation called in the wrong order (e.g. backward before forward)
  kConfig,    // configuration file problem
  kIo,        // filesystem problem
  kNumeric,   // NaN/Inf produced
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace dropin
