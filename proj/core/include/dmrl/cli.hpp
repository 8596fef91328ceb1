#pragma once

#include <iosfwd>

namespace dmrl::cli {

/// Exit codes: 0 success, 1 validation error, 2 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point for the `dmrl` tool. Diagnostics go to `err` as one line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace dmrl::cli
