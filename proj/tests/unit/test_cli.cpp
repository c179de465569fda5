// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>
TEST_SUITE("cli") {}
