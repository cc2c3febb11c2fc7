// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace gd {

/// Invalid configuration, bad ranges, mismatched arities.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated files, bad magic bytes, I/O failures.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NaN/Inf detected in a gradient or parameter block during optimization.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gd
