// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "ltd/cli.hpp"

int main(int argc, char** argv) { return ltd::run_cli(argc, argv, std::cout, std::cerr); }
