#pragma once

#include <string>
#include <vector>

namespace imgshield {

// Full command-line entry point; returns the process exit code. Safe to call
// repeatedly in-process (used by tests).
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);

} // namespace imgshield
