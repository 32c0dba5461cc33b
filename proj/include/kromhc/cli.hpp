#pragma once

#include <iosfwd>

namespace kromhc {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumeric = 2;

// Entry point of the kromhc executable: train, param-count, ds-scan,
// gradcheck and scaling subcommands.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace kromhc
