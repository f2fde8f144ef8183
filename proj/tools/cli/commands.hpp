#pragma once

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace caft::cli {

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kConfigError = 2, kContractError = 3, kIoError = 4 };

// Exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

// Run directories live under $CAFT_RUN_ROOT, or ./runs when it is unset.
inline constexpr const char* kRunRootEnv = "CAFT_RUN_ROOT";
std::filesystem::path run_root();

// Parses `args` (program name first) and runs the chosen subcommand.
// Results go to `out`, diagnostics to `err`; returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace caft::cli
