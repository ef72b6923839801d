#pragma once

#include <string>
#include <vector>

namespace moose::cli {

// Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace moose::cli
