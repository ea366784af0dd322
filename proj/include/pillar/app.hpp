#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pillar::app {

// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Runs the command line `args` (without the program name).
int run(const std::vector<std::string> &args, std::ostream &out,
        std::ostream &err);

int run(int argc, char **argv);

} // namespace pillar::app
