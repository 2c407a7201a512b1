#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace genieblue::cli {

inline constexpr int kOk = 0;
inline constexpr int kInternalError = 1;
inline constexpr int kBadArgs = 2;
inline constexpr int kVerificationFailed = 3;

/// Runs one command line (without the program name). Never throws; every
/// failure maps to an exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace genieblue::cli
