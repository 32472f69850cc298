#pragma once

#include <ostream>

namespace fctn {

/// Entry point of the `fctn` tool. Returns the process exit code; errors are
/// reported on `err` with a nonzero code.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fctn
