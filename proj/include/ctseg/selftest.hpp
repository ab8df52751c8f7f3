#pragma once

#include <iosfwd>

namespace ctseg {

/// Quick invariant checks over every module. Prints one PASS/FAIL line per
/// check and returns the number of failures.
int run_selftest(std::ostream& out);

}  // namespace ctseg
