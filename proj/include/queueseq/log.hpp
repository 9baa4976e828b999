#pragma once

// Logging through spdlog; the level comes from QUEUESEQ_LOG
// (trace, debug, info, warn, error, off), default warn.

#include <cstdlib>
#include <string>

#include <spdlog/spdlog.h>

namespace queueseq {

inline void init_logging() {
  static const bool done = [] {
    const char* env = std::getenv("QUEUESEQ_LOG");
    auto level = spdlog::level::warn;
    if (env && *env) level = spdlog::level::from_str(env);
    spdlog::set_level(level);
    spdlog::set_pattern("[%l] %v");
    return true;
  }();
  (void)done;
}

template <typename... Args>
void log_debug(fmt::format_string<Args...> f, Args&&... args) {
  init_logging();
  spdlog::debug(f, std::forward<Args>(args)...);
}

template <typename... Args>
void log_info(fmt::format_string<Args...> f, Args&&... args) {
  init_logging();
  spdlog::info(f, std::forward<Args>(args)...);
}

template <typename... Args>
void log_warn(fmt::format_string<Args...> f, Args&&... args) {
  init_logging();
  spdlog::warn(f, std::forward<Args>(args)...);
}

}  // namespace queueseq
