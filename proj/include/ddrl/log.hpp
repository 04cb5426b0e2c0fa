#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <utility>

namespace ddrl {

enum class LogLevel { debug, info, warning, error };

namespace detail {

struct LogState {
  std::mutex mu;
  LogLevel min_level = LogLevel::info;
  std::function<void(LogLevel, const std::string&)> sink;
};

inline LogState& log_state() {
  static LogState s;
  return s;
}

inline const char* level_name(LogLevel l) {
  switch (l) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warning: return "warning";
    case LogLevel::error: return "error";
  }
  return "?";
}

}  // namespace detail

/// Replace the default stderr sink (pass an empty function to restore it).
inline void set_log_sink(std::function<void(LogLevel, const std::string&)> sink) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mu);
  s.sink = std::move(sink);
}

inline void set_log_level(LogLevel level) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mu);
  s.min_level = level;
}

inline void log_message(LogLevel level, const std::string& msg) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mu);
  if (level < s.min_level) return;
  if (s.sink) {
    s.sink(level, msg);
  } else {
    std::cerr << "[" << detail::level_name(level) << "] " << msg << '\n';
  }
}

inline void log_info(const std::string& msg) { log_message(LogLevel::info, msg); }
inline void log_warning(const std::string& msg) { log_message(LogLevel::warning, msg); }
inline void log_error(const std::string& msg) { log_message(LogLevel::error, msg); }

}  // namespace ddrl
