#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dalip/tape.hpp"

namespace dalip {

// Builds a 1x1 loss from freshly registered parameter inputs. Called several
// times per check, each time on a new tape; it must be a pure function of the
// parameter values.
using GraphBuilder = std::function<Val(Tape&, const std::vector<Val>&)>;

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::string worst_param;
  Index worst_row = 0;
  Index worst_col = 0;
  // Max relative error per parameter, in input order.
  std::vector<std::pair<std::string, double>> per_param;
};

// Compares reverse-mode gradients against central finite differences,
// entry by entry, with relative error |a - n| / max(1e-8, |a| + |n|).
//
// The builder is evaluated twice on identical inputs first; any bit
// difference between the two roots throws DeterminismError, since finite
// differencing a nondeterministic function measures noise, not gradients.
GradCheckReport finite_diff_check(const GraphBuilder& build, std::vector<Matrix> params,
                                  std::vector<std::string> names = {}, double step = 1e-5,
                                  double tol = 1e-4);

}  // namespace dalip
