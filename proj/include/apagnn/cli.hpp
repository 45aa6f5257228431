#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace apagnn {

// Process exit codes of the command-line front end.
enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,    // invalid config, flags or parameters
  kExitData = 3,      // unreadable or malformed dataset
  kExitShape = 4,     // checkpoint incompatible with data
  kExitTraining = 5,  // optimisation diverged
};

// Runs one command (`args` excludes the program name):
//   synth, train, eval, attn-export.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace apagnn
