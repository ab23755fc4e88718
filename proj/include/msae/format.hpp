#pragma once

#include <cstdio>
#include <string>

namespace msae {

/// 17 significant digits, enough to round-trip every double.
[[nodiscard]] inline std::string format_double(double value) {
  char buffer[40];
  std::snprintf(buffer, sizeof buffer, "%.17g", value);
  return buffer;
}

}  // namespace msae
