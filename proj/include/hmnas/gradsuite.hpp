#pragma once

#include <string>
#include <vector>

namespace hmnas {

struct GradCheckResult {
  std::string name;
  int seeds = 0;           // seeds actually checked
  int skipped = 0;         // seeds rejected as badly conditioned
  double max_rel_err = 0;  // worst |a - n| / (|n| + 1e-8) over all seeds and inputs
  bool passed = false;
};

struct GradSuiteReport {
  std::vector<GradCheckResult> checks;
  double seconds = 0.0;
  bool passed() const;
};

/// Finite-difference validation of every candidate op, the mixed op, node
/// combination, batch norm and the micro-supernet loss w.r.t. w, α and β.
/// Each check needs `seeds` well-conditioned probe points.
GradSuiteReport run_grad_suite(int seeds = 10, double tol = 1e-4, double step = 1e-5);

}  // namespace hmnas
