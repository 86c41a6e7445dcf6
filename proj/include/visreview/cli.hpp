#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "visreview/error.hpp"

namespace vr {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitCheck = 4 };

int exit_code_for(ErrorCode code);

/// Entry point of the `visreview` binary. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vr
