#pragma once

#include <iosfwd>

namespace sgdiff {

/// Exit codes of the command-line interface.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2, kExitConfig = 3 };

/// Parses argv (argv[0] is the program name) and runs one subcommand:
/// gen-data, train, sample, eval, ablate. Failures print a single
/// "error: <kind>: <message>" line to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sgdiff
