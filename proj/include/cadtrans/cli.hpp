#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cadtrans {

// Command-line entry point, exposed as a library call so tests can drive it
// in-process. Returns the process exit code: 0 on success, 1 with a one-line
// diagnostic on stderr otherwise.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cadtrans
