#pragma once

#include <ostream>

namespace kgalign {

// Entry point of the `kgalign` binary. Returns the process exit code:
// 0 success, 1 invalid input or usage, 2 runtime failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace kgalign
