#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace rep {

enum class LogLevel { error = 0, info = 1, debug = 2 };

/// Threshold from REP_LOG_LEVEL (error | info | debug), default info.
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* v = std::getenv("REP_LOG_LEVEL");
    if (!v) return LogLevel::info;
    const std::string_view s(v);
    if (s == "error") return LogLevel::error;
    if (s == "debug") return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

inline void log(LogLevel level, const std::string& msg) {
  if (level > log_level()) return;
  static constexpr const char* names[] = {"error", "info", "debug"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << '\n';
}

}  // namespace rep
