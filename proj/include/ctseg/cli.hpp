#pragma once

namespace ctseg {

inline constexpr const char* kToolVersion = "0.1.0";

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2 };

/// Parses argv, runs one subcommand and returns its exit code. Every option
/// can also be set through an environment variable named CTSEG_<OPTION>
/// (upper case, dashes as underscores).
int run_cli(int argc, const char* const* argv);

}  // namespace ctseg
