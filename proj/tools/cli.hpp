#pragma once

// The pcmoe command line as a callable, so tests can drive it in-process.

#include <iosfwd>

namespace pcmoe::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int {
  kOk = 0,
  kSelftestFailed = 1,
  kUsage = 2,
  kDiverged = 3,
};

/// Runs one command. Never throws; every failure is mapped to an exit code
/// and a message on err.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pcmoe::cli
