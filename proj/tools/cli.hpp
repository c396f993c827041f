#pragma once

#include <string>
#include <vector>

namespace r2mf::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kCheckFailed = 3 };

/// Runs one `r2mf <command> ...` invocation and returns its exit code.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace r2mf::cli
