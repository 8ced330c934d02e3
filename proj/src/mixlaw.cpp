#include "dalip/mixlaw.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

namespace dalip {

namespace {

constexpr double kFlatBetaTol = 1e-6;
constexpr double kGammaExclusion = 1e-6;
constexpr double kGammaRefineTol = 1e-8;
constexpr double kGolden = 0.6180339887498949;  // (sqrt(5)-1)/2

// For a fixed gamma the optimal (alpha, beta) solve a 2x2 normal system.
struct LinearSolve {
  double alpha = 0, beta = 0, rss = 0;
  bool ok = false;
};

LinearSolve solve_linear(const std::vector<std::pair<double, double>>& pts, double gamma) {
  const double n = static_cast<double>(pts.size());
  double se = 0, see = 0, sy = 0, sey = 0;
  for (const auto& [u, y] : pts) {
    const double e = std::exp(gamma * u);
    se += e;
    see += e * e;
    sy += y;
    sey += e * y;
  }
  LinearSolve out;
  const double det = n * see - se * se;
  // The basis {1, exp(gamma*u)} degenerates when the exponential is
  // numerically constant over the sampled u values.
  if (std::abs(det) < 1e-12 * std::max(1.0, n * see)) return out;
  out.alpha = (sy * see - se * sey) / det;
  out.beta = (n * sey - se * sy) / det;
  out.ok = true;
  for (const auto& [u, y] : pts) {
    const double r = out.alpha + out.beta * std::exp(gamma * u) - y;
    out.rss += r * r;
  }
  return out;
}

double rss_at(const std::vector<std::pair<double, double>>& pts, double gamma) {
  const LinearSolve s = solve_linear(pts, gamma);
  return s.ok ? s.rss : std::numeric_limits<double>::infinity();
}

// Golden-section minimization of f over [lo, hi] down to an interval of tol.
template <typename F>
double golden_min(F&& f, double lo, double hi, double tol) {
  double a = lo, b = hi;
  double x1 = b - kGolden * (b - a);
  double x2 = a + kGolden * (b - a);
  double f1 = f(x1), f2 = f(x2);
  while (b - a > tol) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - kGolden * (b - a);
      f1 = f(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + kGolden * (b - a);
      f2 = f(x2);
    }
  }
  return 0.5 * (a + b);
}

double parse_number(const std::string& field, size_t line_no, const char* what) {
  double v = 0;
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc{} || ptr != end)
    throw ParseError("observations CSV line " + std::to_string(line_no) + ": bad " +
                     std::string(what) + " '" + field + "'");
  return v;
}

}  // namespace

double eval_law(const CurveFit& fit, double u) {
  return fit.alpha + fit.beta * std::exp(fit.gamma * u);
}

CurveFit fit_curve(std::vector<std::pair<double, double>> points, double gamma_lo,
                   double gamma_hi, int grid_points) {
  if (points.size() < 4)
    throw ParamError("mix fit: underdetermined, need at least 4 observations, got " +
                     std::to_string(points.size()));
  // Canonical order makes the fit independent of how callers list points.
  std::sort(points.begin(), points.end());
  std::vector<double> distinct;
  for (const auto& [u, y] : points)
    if (distinct.empty() || u != distinct.back()) distinct.push_back(u);
  if (distinct.size() < 3)
    throw ParamError("mix fit: underdetermined, need 3 distinct ratios, got " +
                     std::to_string(distinct.size()));
  for (const auto& [u, y] : points)
    if (!std::isfinite(u) || !std::isfinite(y))
      throw ParamError("mix fit: observations must be finite");
  if (!(gamma_lo < gamma_hi) || grid_points < 2)
    throw ParamError("mix fit: bad gamma search range");

  // Dense scan of the projected residual over gamma.
  double best_gamma = 0, best_rss = std::numeric_limits<double>::infinity();
  int best_index = -1;
  for (int i = 0; i < grid_points; ++i) {
    const double g = gamma_lo + (gamma_hi - gamma_lo) * static_cast<double>(i) /
                                    static_cast<double>(grid_points - 1);
    if (std::abs(g) < kGammaExclusion) continue;
    const double rss = rss_at(points, g);
    if (rss < best_rss) {
      best_rss = rss;
      best_gamma = g;
      best_index = i;
    }
  }
  if (best_index < 0)
    throw NumericError("mix fit: degenerate observations, no gamma candidate fit");

  // Refine inside the bracketing grid cells, respecting the excluded band.
  const double cell = (gamma_hi - gamma_lo) / static_cast<double>(grid_points - 1);
  double lo = std::max(gamma_lo, best_gamma - cell);
  double hi = std::min(gamma_hi, best_gamma + cell);
  if (lo < 0 && best_gamma > 0) lo = kGammaExclusion;
  if (hi > 0 && best_gamma < 0) hi = -kGammaExclusion;
  const double gamma = golden_min([&](double g) { return rss_at(points, g); }, lo, hi,
                                  kGammaRefineTol);

  const LinearSolve s = solve_linear(points, gamma);
  if (!s.ok) throw NumericError("mix fit: degenerate linear system at the fitted gamma");

  CurveFit fit;
  fit.alpha = s.alpha;
  fit.beta = s.beta;
  fit.gamma = gamma;
  fit.rss = s.rss;
  fit.flat = std::abs(s.beta) <= kFlatBetaTol;
  fit.direction = fit.flat ? 0 : (s.beta * gamma > 0 ? 1 : -1);
  return fit;
}

MixLawFit fit(const std::vector<MixObservation>& observations, double gamma_lo,
              double gamma_hi, int grid_points) {
  std::map<std::string, std::vector<std::pair<double, double>>> by_domain;
  for (const auto& obs : observations) {
    if (!(obs.ratio >= 0.0 && obs.ratio <= 1.0))
      throw ParamError("mix fit: ratio " + std::to_string(obs.ratio) + " outside [0, 1]");
    if (!std::isfinite(obs.accuracy))
      throw ParamError("mix fit: accuracy must be finite");
    by_domain[obs.domain].push_back({obs.ratio, obs.accuracy});
  }
  if (by_domain.size() != 2)
    throw ParamError("mix fit: expected exactly 2 domains, got " +
                     std::to_string(by_domain.size()));

  MixLawFit result;
  auto it = by_domain.begin();
  result.domain1 = it->first;
  result.fit1 = fit_curve(it->second, gamma_lo, gamma_hi, grid_points);
  ++it;
  result.domain2 = it->first;
  // The second domain's data share is 1-r; its curve lives in that argument.
  for (auto& [u, y] : it->second) u = 1.0 - u;
  result.fit2 = fit_curve(it->second, gamma_lo, gamma_hi, grid_points);
  return result;
}

MixSolution solve_optimal_ratio(const CurveFit& fit1, const CurveFit& fit2, double w1,
                                double w2) {
  if (!(w1 > 0) || !(w2 > 0)) throw ParamError("solve mix: weights must be positive");

  const auto objective = [&](double r) {
    return w1 * eval_law(fit1, r) + w2 * eval_law(fit2, 1.0 - r);
  };
  const auto boundary_result = [&]() {
    MixSolution s;
    s.boundary = true;
    const double f0 = objective(0.0), f1 = objective(1.0);
    s.r_star = f0 >= f1 ? 0.0 : 1.0;
    s.objective = std::max(f0, f1);
    return s;
  };

  const double p1 = w1 * fit1.beta * fit1.gamma;
  const double p2 = w2 * fit2.beta * fit2.gamma;
  // Without both products positive the stationary-point equation has no
  // solution (log of a nonpositive number): the maximum sits on an endpoint.
  if (!(p1 > 0.0) || !(p2 > 0.0)) return boundary_result();
  if (fit1.gamma + fit2.gamma == 0.0)
    throw ParamError("solve mix: degenerate slopes, gamma1 + gamma2 = 0");

  const double r = (std::log(p2) + fit2.gamma - std::log(p1)) / (fit1.gamma + fit2.gamma);
  if (!(r > 0.0 && r < 1.0)) return boundary_result();

  // The stationary point may be a minimum (both curves convex); only a
  // genuine interior maximum is returned as such.
  const double curvature = w1 * fit1.beta * fit1.gamma * fit1.gamma * std::exp(fit1.gamma * r) +
                           w2 * fit2.beta * fit2.gamma * fit2.gamma *
                               std::exp(fit2.gamma * (1.0 - r));
  if (curvature >= 0.0) return boundary_result();

  const double r_numeric =
      golden_min([&](double x) { return -objective(x); }, 0.0, 1.0, 1e-10);
  if (std::abs(r - r_numeric) > 1e-6)
    throw ContractError("solve mix: closed form " + std::to_string(r) +
                        " disagrees with numeric maximum " + std::to_string(r_numeric));

  MixSolution s;
  s.r_star = r;
  s.boundary = false;
  s.objective = objective(r);
  return s;
}

std::vector<MixObservation> read_observations_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("observations CSV: cannot open " + path.string());
  std::string line;
  size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("observations CSV: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "domain,ratio,accuracy")
    throw ParseError("observations CSV line 1: expected header 'domain,ratio,accuracy', got '" +
                     line + "'");

  std::vector<MixObservation> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos)
      throw ParseError("observations CSV line " + std::to_string(line_no) +
                       ": expected 3 fields");
    MixObservation obs;
    obs.domain = line.substr(0, c1);
    if (obs.domain.empty())
      throw ParseError("observations CSV line " + std::to_string(line_no) + ": empty domain");
    obs.ratio = parse_number(line.substr(c1 + 1, c2 - c1 - 1), line_no, "ratio");
    obs.accuracy = parse_number(line.substr(c2 + 1), line_no, "accuracy");
    out.push_back(std::move(obs));
  }
  return out;
}

}  // namespace dalip
