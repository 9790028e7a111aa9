#pragma once

#include <iosfwd>

namespace ilss {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

/// Entry point of the `ilss` tool:
///   ilss gen-data|train-base|step|run|eval|report|gradcheck [flags]
/// Every subcommand accepts --config <file.json>; flags given on the command
/// line take precedence over the file.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ilss
