#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pcbmerge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitFitness = 4;

// Entry point behind the `pcbmerge` binary. JSON summaries go to `out`,
// diagnostics and error objects to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Same, with the arguments that follow the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pcbmerge::cli
