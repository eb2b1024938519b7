#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ma3 {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit statuses shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;       // I/O problems, failed verification
inline constexpr int kExitUsage = 2;         // bad flags, config keys or values
inline constexpr int kExitNonFinite = 3;     // training aborted on a non-finite loss
inline constexpr int kExitCheckpoint = 4;    // incompatible checkpoint version
inline constexpr int kExitGradcheck = 5;     // gradient check above tolerance

/// Runs one `ma3` invocation; args[0] is the program name.
/// Subcommands: train, eval, gradcheck, approx-verify, lambda-search, make-synth.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ma3
