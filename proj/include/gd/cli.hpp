// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace gd::cli {

/// Entry point behind the `gd` executable, separated so tests can drive the
/// tool in-process. Never throws.
///
/// Exit codes: 0 success (including --help), 1 numerical failure during
/// optimization (non-finite gradients and similar), 2 usage, config, or file
/// format errors.
int run(int argc, const char* const* argv);

}  // namespace gd::cli
