// Acceptance gate: end-to-end checks of the numeric core, the training
// graph, the mixing-law solver, and the command-line surface. Each criterion
// prints one [PASS]/[FAIL] line with its runtime; the process exits nonzero
// if any criterion fails.
//
// Tolerances are pinned here, next to the checks that use them.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "../tools/c7_config.hpp"
#include "dalip/bdc.hpp"
#include "dalip/blob.hpp"
#include "dalip/gradcheck.hpp"
#include "dalip/mbdc.hpp"
#include "dalip/mixlaw.hpp"
#include "dalip/objective.hpp"
#include "dalip/rng.hpp"
#include "dalip/tape.hpp"

using namespace dalip;

namespace {

// A failed check aborts only its own criterion; later criteria still run.
struct CriterionFailure {
  std::string message;
};

#define REQUIRE(cond, msg)                                       \
  do {                                                           \
    if (!(cond)) {                                               \
      std::ostringstream oss_;                                   \
      oss_ << msg;                                               \
      throw CriterionFailure{oss_.str()};                        \
    }                                                            \
  } while (0)

int g_failures = 0;

void criterion(int id, const std::string& title, const std::function<void()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string failure;
  try {
    body();
  } catch (const CriterionFailure& f) {
    failure = f.message;
  } catch (const std::exception& e) {
    failure = std::string("unexpected exception: ") + e.what();
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream line;
  if (failure.empty()) {
    line << "[PASS] " << id << ". " << title;
  } else {
    line << "[FAIL] " << id << ". " << title << " -- " << failure;
    ++g_failures;
  }
  line.precision(2);
  line << " (" << std::fixed << secs << " s)";
  std::cout << line.str() << std::endl;
}

Matrix random_int_matrix(CounterRng& rng, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j)
      m(i, j) = static_cast<double>(static_cast<long>(rng.next_u64() % 7) - 3);
  return m;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in), "missing file: " << path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Distance-covariance transform agrees with its independent oracle.

void check_bdc_oracle() {
  CounterRng rng(101);
  double worst = 0.0;
  for (int it = 0; it < 200; ++it) {
    const Index m = 1 + static_cast<Index>(rng.next_u64() % 8);  // tokens <= 8
    const Index c = 2 + static_cast<Index>(rng.next_u64() % 5);  // channels <= 6
    const Matrix x = random_normal(rng, m, c);

    Tape t;
    const Matrix fwd = t.value(bdc_forward(t.input(x), 0.0));
    const Matrix ref = bdc_oracle(x);
    worst = std::max(worst, (fwd - ref).cwiseAbs().maxCoeff());
  }
  REQUIRE(worst <= 1e-10, "max deviation from the oracle " << worst << " > 1e-10");

  // Hand value: the 2x2 identity maps to +/- sqrt(2)/2 in a checkerboard.
  const Matrix b = bdc_matrix(Matrix::Identity(2, 2), 0.0);
  const double half_diag = std::sqrt(2.0) / 2.0;
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j) {
      const double want = (i == j) ? -half_diag : half_diag;
      REQUIRE(std::abs(b(i, j) - want) <= 1e-12,
              "identity case entry (" << i << "," << j << ") = " << b(i, j));
    }
}

// ---------------------------------------------------------------------------
// 2. Reverse-mode gradients of the full training graph match finite
//    differences on every parameter group.

void check_full_graph_gradients() {
  const Index n_samples = 4, tokens = 6, raw = 10;
  const Index token_dim = 8, out_dim = 8, hidden = 8;
  const int heads = 2;

  CounterRng rng(202, 0xACCE);
  std::vector<SampleRecord> recs(n_samples);
  for (auto& rec : recs) {
    rec.class_id = 0;
    rec.image_tokens = random_normal(rng, tokens, raw);
    rec.text_tokens = random_normal(rng, tokens, raw);
  }
  const DalipObjectiveConfig obj;
  const TowerParams proto = tower_init(PoolingKind::Mbdc, raw, 8, token_dim, heads, out_dim,
                                       hidden, true, obj.log_tau_init, 7);

  std::vector<Matrix> params = {proto.image.proj_in, proto.image.proj_out,
                                proto.image.first_proj, proto.text.proj_in,
                                proto.text.proj_out,  proto.text.first_proj,
                                proto.head.w1,        proto.head.w2,
                                proto.head.ln_gain,   proto.head.ln_bias,
                                Matrix::Constant(1, 1, obj.log_tau_init)};
  std::vector<std::string> names = {"image_proj_in", "image_proj_out", "image_first_proj",
                                    "text_proj_in",  "text_proj_out",  "text_first_proj",
                                    "head_w1",       "head_w2",        "head_ln_gain",
                                    "head_ln_bias",  "log_tau"};

  const auto build = [&recs, &proto, &obj](Tape& t, const std::vector<Val>& leaves) {
    ModelVals v;
    v.image = {leaves[0], leaves[1], leaves[2]};
    v.text = {leaves[3], leaves[4], leaves[5]};
    v.head = {leaves[6], leaves[7], leaves[8], leaves[9]};
    v.log_tau = leaves[10];
    std::vector<const SampleRecord*> batch;
    for (const auto& rec : recs) batch.push_back(&rec);
    const BatchEmbeddings be = model_forward(t, batch, v, proto);
    return dalip_loss(be.image_first, be.text_first, be.image_second, be.text_second,
                      v.log_tau, obj);
  };

  const GradCheckReport report = finite_diff_check(build, params, names, 1e-5, 1e-4);
  REQUIRE(report.pass, "worst parameter " << report.worst_param << " relative error "
                                          << report.max_rel_err);
  REQUIRE(report.max_rel_err < 1e-4,
          "max relative error " << report.max_rel_err << " >= 1e-4");
  REQUIRE(report.per_param.size() == names.size(), "missing per-parameter entries");
}

// ---------------------------------------------------------------------------
// 3. Optimal mixing share of the reference curves, cross-checked against an
//    independent golden-section maximization.

CurveFit make_curve(double a, double b, double g) {
  CurveFit f;
  f.alpha = a;
  f.beta = b;
  f.gamma = g;
  f.flat = std::abs(b) <= 1e-6;
  f.direction = f.flat ? 0 : (b * g > 0 ? 1 : -1);
  return f;
}

void check_reference_optimum() {
  const CurveFit f1 = make_curve(49.74, -19.65, -9.46);
  const CurveFit f2 = make_curve(89.9, -71.6, -0.36);
  const MixSolution s = solve_optimal_ratio(f1, f2);

  REQUIRE(std::abs(s.r_star - 0.2378) <= 0.005,
          "r_star " << s.r_star << " not within 0.005 of 0.2378");
  REQUIRE(!s.boundary, "expected an interior optimum");

  // Independent golden-section maximization of the weighted objective.
  const auto objective = [&](double r) {
    return eval_law(f1, r) + eval_law(f2, 1.0 - r);
  };
  const double invphi = 0.6180339887498949;
  double lo = 0.0, hi = 1.0;
  double a = hi - invphi * (hi - lo), b = lo + invphi * (hi - lo);
  double fa = objective(a), fb = objective(b);
  while (hi - lo > 1e-10) {
    if (fa < fb) {
      lo = a;
      a = b;
      fa = fb;
      b = lo + invphi * (hi - lo);
      fb = objective(b);
    } else {
      hi = b;
      b = a;
      fb = fa;
      a = hi - invphi * (hi - lo);
      fa = objective(a);
    }
  }
  const double r_golden = 0.5 * (lo + hi);
  REQUIRE(std::abs(s.r_star - r_golden) <= 1e-6,
          "closed form " << s.r_star << " vs golden section " << r_golden);
}

// ---------------------------------------------------------------------------
// 4. Saturation-curve fitting recovers planted parameters.

void check_fit_round_trip() {
  const auto sample = [](const CurveFit& f, int n) {
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < n; ++i) {
      const double u = static_cast<double>(i) / (n - 1);
      pts.push_back({u, eval_law(f, u)});
    }
    return pts;
  };
  const auto close = [](double got, double want, const char* what) {
    const double rel = std::abs(got - want) / std::max(1.0, std::abs(want));
    REQUIRE(rel <= 1e-3, what << ": got " << got << ", want " << want);
  };

  const CurveFit planted = make_curve(49.74, -19.65, -9.46);
  const CurveFit fit1 = fit_curve(sample(planted, 8));
  close(fit1.alpha, planted.alpha, "reference alpha");
  close(fit1.beta, planted.beta, "reference beta");
  close(fit1.gamma, planted.gamma, "reference gamma");

  CounterRng rng(404);
  for (int it = 0; it < 50; ++it) {
    const double alpha = rng.uniform(20.0, 80.0);
    const double beta = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(5.0, 50.0);
    const double gamma = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 15.0);
    const CurveFit want = make_curve(alpha, beta, gamma);
    const CurveFit got = fit_curve(sample(want, 8));
    close(got.alpha, alpha, "random alpha");
    close(got.beta, beta, "random beta");
    close(got.gamma, gamma, "random gamma");
  }
}

// ---------------------------------------------------------------------------
// 5. Closed-form loss values and the exact single-term reduction.

void check_loss_closed_forms() {
  Matrix eye = Matrix::Identity(2, 2);
  const double want = 4.0 * std::log(1.0 + std::exp(-1.0));
  const double got = infonce(eye, eye, /*tau=*/1.0, Reduction::Sum);
  REQUIRE(std::abs(got - want) <= 1e-9,
          "orthonormal pair loss " << got << " vs closed form " << want);

  // Dropping the second-order term leaves exactly lambda1 times the
  // first-order loss, bit for bit.
  CounterRng rng(505);
  EmbeddingBatch batch;
  batch.image_first = Matrix::Identity(4, 4);
  batch.text_first = Matrix::Identity(4, 4);
  batch.image_second = random_normal(rng, 4, 6);
  batch.text_second = random_normal(rng, 4, 6);

  DalipObjectiveConfig cfg;
  cfg.lambda1 = 0.4;
  cfg.lambda2 = 0.0;
  cfg.convex_weights = false;
  cfg.reduction = Reduction::Sum;
  const double combined = dalip_loss(batch, cfg, /*tau=*/1.0);
  const double first = cfg.lambda1 * infonce(batch.image_first, batch.text_first, 1.0,
                                             Reduction::Sum);
  REQUIRE(bits_equal(combined, first),
          "lambda2 = 0 differs from lambda1 * infonce: " << combined << " vs " << first);
}

// ---------------------------------------------------------------------------
// 6. Pooling-head invariants: permutation, zero mapping, fixed width.

void check_pooling_invariants() {
  const MbdcParams p = mbdc_init(2, 8, 8, triu_len(4), 606);

  // Token permutation: integer-valued inputs make the arithmetic exact, so
  // the embeddings must agree bit for bit.
  CounterRng rng(607);
  for (int it = 0; it < 5; ++it) {
    const Matrix x = random_int_matrix(rng, 7, 8);
    Matrix shuffled(7, 8);
    const Index order[7] = {5, 2, 0, 6, 3, 1, 4};
    for (Index i = 0; i < 7; ++i) shuffled.row(i) = x.row(order[i]);
    REQUIRE(bits_equal(mbdc_forward(x, p), mbdc_forward(shuffled, p)),
            "permuted tokens changed the embedding on iteration " << it);
  }

  // All-zero tokens map to the all-zero embedding at initialization.
  const Matrix zero_out = mbdc_forward(Matrix::Zero(5, 8), p);
  REQUIRE(zero_out.cwiseAbs().maxCoeff() == 0.0, "zero input gave a nonzero embedding");

  // Output width is d_tilde for any token count.
  for (const Index m : {Index(1), Index(2), Index(7), Index(16)}) {
    const Matrix y = mbdc_forward(random_normal(rng, m, 8), p);
    REQUIRE(y.rows() == 1 && y.cols() == 8,
            "token count " << m << " gave shape " << shape_str(y));
  }
}

// ---------------------------------------------------------------------------
// 7. Retrieval surrogate: the combined objective beats first-order-only
//    retrieval by at least 10 points, matching the pinned calibration.

void check_retrieval_surrogate() {
#ifndef DALIP_SOURCE_DIR
  REQUIRE(false, "DALIP_SOURCE_DIR not defined");
#else
  const std::filesystem::path artifact =
      std::filesystem::path(DALIP_SOURCE_DIR) / "tests" / "data" / "calibration_c7.json";
  const auto expected = nlohmann::json::parse(slurp(artifact));
  const auto& per_seed = expected.at("per_seed");
  REQUIRE(per_seed.size() == std::size(c7::kSeeds), "calibration artifact seed count");

  double sum_top1 = 0, sum_first = 0;
  for (size_t i = 0; i < std::size(c7::kSeeds); ++i) {
    const c7::SeedMetrics m = c7::run_seed(c7::kSeeds[i]);
    const auto& want = per_seed[i];
    REQUIRE(want.at("seed").get<std::uint64_t>() == m.seed, "seed order mismatch");
    const auto exact = [&](const char* key, double got) {
      const double expect = want.at(key).get<double>();
      REQUIRE(bits_equal(got, expect), "seed " << m.seed << " " << key << ": got " << got
                                               << ", calibrated " << expect);
    };
    exact("top1", m.top1);
    exact("top5", m.top5);
    exact("first_only_top1", m.first_only_top1);
    exact("second_only_top1", m.second_only_top1);
    sum_top1 += m.top1;
    sum_first += m.first_only_top1;
  }

  const int n = static_cast<int>(std::size(c7::kSeeds));
  const double mean_top1 = sum_top1 / n;
  const double mean_first = sum_first / n;
  REQUIRE(mean_first + 0.10 <= mean_top1,
          "combined " << mean_top1 << " does not beat first-order-only " << mean_first
                      << " by 10 points");
#endif
}

// ---------------------------------------------------------------------------
// 8. Any subcommand rerun with one config and seed writes byte-identical
//    result files (the run manifest carries the only wall-clock field).

int run_cli(const std::string& args) {
#ifndef DALIP_CLI_PATH
  REQUIRE(false, "DALIP_CLI_PATH not defined");
  return -1;
#else
  const std::string cmd =
      std::string("env -u DALIP_SEED ") + DALIP_CLI_PATH + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
#endif
}

void check_cli_determinism() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dalip_acceptance_c8";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const auto same_bytes = [&](const fs::path& a, const fs::path& b) {
    REQUIRE(slurp(a) == slurp(b), "reruns differ: " << a.string() << " vs " << b.string());
  };

  const std::string gen = "gen-data --data-num-classes 3 --data-samples-per-class 20"
                          " --data-tokens-per-sample 6 --data-latent-dim 4 --data-raw-dim 8"
                          " --seed 17 --out ";
  REQUIRE(run_cli(gen + (dir / "g1").string()) == 0, "gen-data failed");
  REQUIRE(run_cli(gen + (dir / "g2").string()) == 0, "gen-data rerun failed");
  for (const char* name : {"manifest.json", "train_image.bin", "train_text.bin",
                           "test_image.bin", "test_text.bin", "map_image.bin", "map_text.bin"})
    same_bytes(dir / "g1" / "dataset" / name, dir / "g2" / "dataset" / name);

  const std::string train = "train --dataset " + (dir / "g1" / "dataset").string() +
                            " --model-mid-dim 10 --model-token-dim 8 --model-out-dim 10"
                            " --model-hidden 10 --train-epochs 2 --train-batch-size 16"
                            " --seed 17 --out ";
  REQUIRE(run_cli(train + (dir / "t1").string()) == 0, "train failed");
  REQUIRE(run_cli(train + (dir / "t2").string()) == 0, "train rerun failed");
  for (const char* name : {"eval.json", "train_steps.csv", "train_epochs.csv"})
    same_bytes(dir / "t1" / name, dir / "t2" / name);
  for (const char* name : {"manifest.json", "image_proj_in.bin", "image_proj_out.bin",
                           "image_first_proj.bin", "text_proj_in.bin", "text_proj_out.bin",
                           "text_first_proj.bin"})
    same_bytes(dir / "t1" / "model" / name, dir / "t2" / "model" / name);

  const std::string solve = "solve-mix --fit1 49.74,-19.65,-9.46 --fit2 89.9,-71.6,-0.36"
                            " --out ";
  REQUIRE(run_cli(solve + (dir / "s1").string()) == 0, "solve-mix failed");
  REQUIRE(run_cli(solve + (dir / "s2").string()) == 0, "solve-mix rerun failed");
  same_bytes(dir / "s1" / "solve.json", dir / "s2" / "solve.json");

  const std::string gradcheck = "gradcheck --seed 17 --out ";
  REQUIRE(run_cli(gradcheck + (dir / "c1").string()) == 0, "gradcheck failed");
  REQUIRE(run_cli(gradcheck + (dir / "c2").string()) == 0, "gradcheck rerun failed");
  same_bytes(dir / "c1" / "gradcheck.json", dir / "c2" / "gradcheck.json");

  fs::remove_all(dir);
}

}  // namespace

int main() {
  criterion(1, "distance-covariance transform matches its independent oracle",
            check_bdc_oracle);
  criterion(2, "full-graph gradients agree with finite differences", check_full_graph_gradients);
  criterion(3, "optimal mixing share of the reference curves", check_reference_optimum);
  criterion(4, "saturation-curve fits recover planted parameters", check_fit_round_trip);
  criterion(5, "closed-form loss values and exact single-term reduction",
            check_loss_closed_forms);
  criterion(6, "pooling-head invariants: permutation, zero map, fixed width",
            check_pooling_invariants);
  criterion(7, "combined retrieval beats first-order-only by 10 points, pinned",
            check_retrieval_surrogate);
  criterion(8, "subcommand reruns write byte-identical result files", check_cli_determinism);

  if (g_failures > 0) {
    std::cout << g_failures << " criterion(s) failed" << std::endl;
    return 1;
  }
  std::cout << "all criteria passed" << std::endl;
  return 0;
}
