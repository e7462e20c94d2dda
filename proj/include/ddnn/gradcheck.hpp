#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ddnn::cli {

struct GradcheckResult {
  std::string name;
  std::string group;     // "op" or "loss"
  double max_error = 0;  // worst relative error over all seeds and inputs
  bool passed = false;
};

struct GradcheckOptions {
  std::string scope = "all";  // all, ops, losses, or a single case name
  int seeds = 10;
  double tolerance = 1e-4;
};

std::vector<std::string> gradcheck_case_names();

// Compares reverse-mode gradients with central differences in double precision. Throws
// std::invalid_argument for an unknown scope.
std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opts);

}  // namespace ddnn::cli
