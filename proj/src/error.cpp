// SPDX-License-Identifier: Apache-2.0

#include "dropin/error.hpp"

namespace dropin {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kArgument: return "argument";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kState: return "state";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kNumeric: return "numeric";
  }
  return "unknown";
}

}  // namespace dropin
