#pragma once

#include <iosfwd>

namespace cqsa::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kInfeasible = 2, kUsage = 3 };

/// Parses argv and dispatches to gen / divide / attn / verify / plan.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace cqsa::cli
