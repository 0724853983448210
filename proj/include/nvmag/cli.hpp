#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nvmag::cli {

/// Exit codes: 0 ok, 2 usage, 3 data, 4 numeric.
enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

/// Runs one `nvmag` invocation. `args` excludes the program name. Errors are
/// written to `err` as a single JSON object {"error", "message"}.
int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace nvmag::cli
