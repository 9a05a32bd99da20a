#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ulike::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitShape = 3;
inline constexpr int kExitCheck = 4;

/// Parses `args` (without the program name), runs the subcommand and maps
/// errors onto the exit-code contract. Reports go to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ulike::cli
