#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string>

namespace fpanet::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline std::atomic<Level>& threshold() {
  static std::atomic<Level> t{Level::info};
  return t;
}

inline void write(Level l, const std::string& msg) {
  if (l < threshold().load()) return;
  static std::mutex m;
  static constexpr const char* names[] = {"debug", "info", "warn", "error"};
  std::lock_guard<std::mutex> lock(m);
  std::clog << "[" << names[static_cast<int>(l)] << "] " << msg << '\n';
}

inline void info(const std::string& msg) { write(Level::info, msg); }
inline void warn(const std::string& msg) { write(Level::warn, msg); }

}  // namespace fpanet::log
