#include "dalip/gradcheck.hpp"

#include <cmath>

namespace dalip {

namespace {

double eval_scalar(const GraphBuilder& build, const std::vector<Matrix>& params) {
  Tape tape;
  std::vector<Val> vals;
  vals.reserve(params.size());
  for (const Matrix& p : params) vals.push_back(tape.input(p));
  Val root = build(tape, vals);
  const Matrix& rv = tape.value(root);
  if (rv.rows() != 1 || rv.cols() != 1)
    throw ContractError("finite_diff_check: builder must return a 1x1 loss, got " + shape_str(rv));
  return rv(0, 0);
}

}  // namespace

GradCheckReport finite_diff_check(const GraphBuilder& build, std::vector<Matrix> params,
                                  std::vector<std::string> names, double step, double tol) {
  if (params.empty()) throw ParamError("finite_diff_check: no parameters");
  if (step <= 0 || tol <= 0) throw ParamError("finite_diff_check: step and tol must be positive");
  if (names.empty())
    for (size_t i = 0; i < params.size(); ++i) names.push_back("p" + std::to_string(i));
  if (names.size() != params.size())
    throw ParamError("finite_diff_check: got " + std::to_string(names.size()) + " names for " +
                     std::to_string(params.size()) + " parameters");

  // A function that is not bit-reproducible cannot be finite-differenced:
  // the noise floor swamps the step.
  const double f0 = eval_scalar(build, params);
  const double f1 = eval_scalar(build, params);
  if (!bits_equal(f0, f1))
    throw DeterminismError("finite_diff_check: two forward passes on identical inputs disagree");

  // Analytic gradients from one reverse pass.
  Tape tape;
  std::vector<Val> vals;
  vals.reserve(params.size());
  for (const Matrix& p : params) vals.push_back(tape.input(p));
  Gradients grads = tape.backward(build(tape, vals));

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const Matrix analytic = grads.wrt(vals[pi]);
    double param_max = 0.0;
    for (Index r = 0; r < params[pi].rows(); ++r) {
      for (Index c = 0; c < params[pi].cols(); ++c) {
        const double saved = params[pi](r, c);
        params[pi](r, c) = saved + step;
        const double fp = eval_scalar(build, params);
        params[pi](r, c) = saved - step;
        const double fm = eval_scalar(build, params);
        params[pi](r, c) = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic(r, c);
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        if (rel > param_max) param_max = rel;
        if (rel > report.max_rel_err) {
          report.max_rel_err = rel;
          report.worst_param = names[pi];
          report.worst_row = r;
          report.worst_col = c;
        }
      }
    }
    report.per_param.emplace_back(names[pi], param_max);
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace dalip
