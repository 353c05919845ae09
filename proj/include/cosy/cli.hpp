#pragma once

// Command-line entry point. Exit codes: 0 success, 1 usage error, 2 data error.

#include <iosfwd>
#include <string>
#include <vector>

namespace cosy {

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace cosy
