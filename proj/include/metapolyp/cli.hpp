#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace metapolyp {

/// Process exit codes shared by every subcommand.
enum ExitCode : int {
    kExitOk = 0,
    /// A verification ran and failed (gradcheck over tolerance).
    kExitCheckFailed = 1,
    /// Bad flags, config, paths, data or checkpoints.
    kExitUsage = 2,
    /// Non-finite values during training.
    kExitNumeric = 3,
};

/// Runs the command line `args`, which excludes the program name. Normal
/// output goes to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace metapolyp
