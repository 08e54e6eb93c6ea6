#pragma once

// The `deformpic` command line: gen-data, train, eval, compare, analyze.

#include <ostream>
#include <string>
#include <vector>

namespace deformpic::cli {

enum ExitCode : int { kOk = 0, kInternal = 1, kUsage = 2, kIo = 3, kNumeric = 4, kMismatch = 5 };

/// Runs one command; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

/// --threads value if positive, else DEFORMPIC_THREADS if set, else the core count.
int resolve_threads(int flag);

}  // namespace deformpic::cli
