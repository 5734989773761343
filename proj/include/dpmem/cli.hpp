#pragma once

// Command-line entry point: gen-data, train, train-classifier, infer,
// infer-dpm, eval, experiment {ablation,stepping,context}, bench.

#include <iosfwd>
#include <string>
#include <vector>

namespace dpmem::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kDataError = 3,
  kWindowViolation = 4,
  kNumericalAbort = 5,
};

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace dpmem::cli
