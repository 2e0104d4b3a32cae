#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace certilax {

/// Exit codes shared by every subcommand.
enum ExitCode {
  kExitRobust = 0,
  kExitNotRobust = 1,
  kExitUsage = 2,
  kExitUnknown = 3,
  kExitNumerical = 4,
  kExitSelftestFailed = 5,
};

/// Full command-line driver (subcommands gen-model, certify, attack, oracle,
/// sweep, selftest).  Kept out of main() so tests can run it in-process.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace certilax
