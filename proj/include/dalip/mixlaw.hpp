#pragma once

// Data-mixing law: accuracy as a function of a domain's share of the
// training mix, modeled as alpha + beta*exp(gamma*u) per domain and fitted
// by variable projection (the linear pair solved exactly for each candidate
// gamma, gamma found by grid search plus golden-section refinement). The
// solver returns the mixing ratio maximizing the weighted sum of both
// fitted curves.

#include <filesystem>
#include <string>
#include <vector>

#include "dalip/types.hpp"

namespace dalip {

struct MixObservation {
  std::string domain;
  double ratio = 0;     // share of domain 1 in the training mix, in [0,1]
  double accuracy = 0;  // percentage in [0,100]
};

// One fitted curve in its own share argument u.
struct CurveFit {
  double alpha = 0, beta = 0, gamma = 0;
  double rss = 0;        // residual sum of squares at the optimum
  bool flat = false;     // |beta| <= 1e-6: constant curve, gamma meaningless
  int direction = 0;     // sign of the derivative beta*gamma*exp(gamma*u)
};

// Two-domain fit. The first domain's curve takes the mixing ratio r
// directly; the second domain's share is 1-r, so its curve is fitted and
// evaluated in u = 1-r. Domains are ordered by name so the result does not
// depend on observation order.
struct MixLawFit {
  std::string domain1, domain2;
  CurveFit fit1, fit2;
};

struct MixSolution {
  double r_star = 0;      // maximizer of w1*P1(r) + w2*P2(1-r) over [0,1]
  bool boundary = false;  // true when the maximum sits on an endpoint
  double objective = 0;   // weighted objective value at r_star
};

// Direct evaluation in the curve's own argument: alpha + beta*exp(gamma*u).
double eval_law(const CurveFit& fit, double u);

// Least-squares fit of one curve to (u, accuracy) points. Needs at least 4
// points over at least 3 distinct u values; the gamma search runs over
// [gamma_lo, gamma_hi] excluding |gamma| < 1e-6, then refines to 1e-8.
CurveFit fit_curve(std::vector<std::pair<double, double>> points, double gamma_lo = -20.0,
                   double gamma_hi = 20.0, int grid_points = 4000);

// Groups observations by domain (exactly two expected), fits the first
// domain in r and the second in 1-r. The search knobs pass through to
// fit_curve.
MixLawFit fit(const std::vector<MixObservation>& observations, double gamma_lo = -20.0,
              double gamma_hi = 20.0, int grid_points = 4000);

// Closed-form interior stationary point of the weighted objective when both
// beta*gamma products are positive and the point is a maximum; otherwise the
// better endpoint with the boundary flag set. Interior results are
// cross-checked against a golden-section maximization (within 1e-6).
MixSolution solve_optimal_ratio(const CurveFit& fit1, const CurveFit& fit2, double w1 = 1.0,
                                double w2 = 1.0);

// CSV with the exact header "domain,ratio,accuracy"; parse failures name the
// 1-based line number.
std::vector<MixObservation> read_observations_csv(const std::filesystem::path& path);

}  // namespace dalip
