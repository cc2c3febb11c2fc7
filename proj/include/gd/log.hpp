// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iostream>
#include <sstream>

namespace gd {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

/// Global level, read once from GD_LOG_LEVEL ({error, info, debug}).
LogLevel log_level();

namespace detail {
class LogLine {
 public:
  explicit LogLine(LogLevel lvl) : active_(lvl <= log_level()) {
    if (active_) {
      switch (lvl) {
        case LogLevel::Error: os_ << "[error] "; break;
        case LogLevel::Info: os_ << "[info] "; break;
        case LogLevel::Debug: os_ << "[debug] "; break;
      }
    }
  }
  ~LogLine() {
    if (active_) std::cerr << os_.str() << "\n";
  }
  template <typename T>
  LogLine& operator<<(const T& v) {
    if (active_) os_ << v;
    return *this;
  }

 private:
  std::ostringstream os_;
  bool active_;
};
}  // namespace detail

}  // namespace gd

#define GD_LOG_ERROR gd::detail::LogLine(gd::LogLevel::Error)
#define GD_LOG_INFO gd::detail::LogLine(gd::LogLevel::Info)
#define GD_LOG_DEBUG gd::detail::LogLine(gd::LogLevel::Debug)
