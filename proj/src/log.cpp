// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/log.hpp"

#include <cstdlib>
#include <string>

namespace gd {

LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("GD_LOG_LEVEL");
    if (!env) return LogLevel::Info;
    std::string s(env);
    if (s == "error") return LogLevel::Error;
    if (s == "debug") return LogLevel::Debug;
    return LogLevel::Info;
  }();
  return level;
}

}  // namespace gd
