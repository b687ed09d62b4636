#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace vfetps {

enum class LogLevel { debug = 0, info = 1, warning = 2, silent = 3 };

inline std::atomic<LogLevel>& log_threshold() {
  static std::atomic<LogLevel> level{LogLevel::info};
  return level;
}

inline std::atomic<unsigned long>& warning_count() {
  static std::atomic<unsigned long> n{0};
  return n;
}

inline void log_message(LogLevel level, std::string_view msg) {
  if (level == LogLevel::warning) ++warning_count();
  if (level < log_threshold().load()) return;
  static constexpr const char* names[] = {"debug", "info", "warning"};
  std::clog << "[vfetps " << names[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void log_info(std::string_view msg) { log_message(LogLevel::info, msg); }
inline void log_warning(std::string_view msg) { log_message(LogLevel::warning, msg); }

}  // namespace vfetps
