// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string_view>

namespace rr {

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

namespace detail {
inline std::atomic<int> g_log_level{static_cast<int>(LogLevel::Warn)};
inline std::mutex g_log_mutex;
}  // namespace detail

inline void set_log_level(LogLevel l) { detail::g_log_level.store(static_cast<int>(l)); }

/// Diagnostics go to stderr only; stdout is reserved for data.
inline void log(LogLevel l, std::string_view msg) {
  if (static_cast<int>(l) > detail::g_log_level.load()) return;
  static constexpr std::string_view tags[] = {"error", "warn", "info", "debug"};
  std::lock_guard lock(detail::g_log_mutex);
  std::cerr << "[rr " << tags[static_cast<int>(l)] << "] " << msg << '\n';
}

}  // namespace rr
