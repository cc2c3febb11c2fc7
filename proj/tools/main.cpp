// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/cli.hpp"

int main(int argc, char** argv) { return gd::cli::run(argc, argv); }
