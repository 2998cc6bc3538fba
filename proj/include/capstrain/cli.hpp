#ifndef CAPSTRAIN_CLI_HPP
#define CAPSTRAIN_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace capstrain {

inline constexpr int kExitOk = 0;
inline constexpr int kExitBadFlags = 2;
inline constexpr int kExitMissingData = 3;
inline constexpr int kExitDiverged = 4;

/// Command-line entry point; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace capstrain

#endif  // CAPSTRAIN_CLI_HPP
