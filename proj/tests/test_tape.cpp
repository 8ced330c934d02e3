#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dalip/gradcheck.hpp"
#include "dalip/rng.hpp"
#include "dalip/tape.hpp"

using namespace dalip;

namespace {

Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const Index r = static_cast<Index>(rows.size());
  const Index c = static_cast<Index>(rows.begin()->size());
  Matrix m(r, c);
  Index i = 0;
  for (const auto& row : rows) {
    Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

Index rnd_dim(CounterRng& rng) { return 1 + static_cast<Index>(rng.next_u64() % 5); }

// Entries bounded away from zero, mixed signs: safe for relu/l2 kinks.
Matrix draw_signed(CounterRng& rng, Index r, Index c) {
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j)
      m(i, j) = rng.uniform(0.3, 1.3) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return m;
}

// Weight the output entries so a backward rule cannot pass by symmetry. The
// weights are fixed per check: the builder must stay a pure function.
Val weighted(Tape& t, Val y, const Matrix& w) { return sum_all(hadamard(y, t.input(w))); }

void expect_pass(const char* name, const GraphBuilder& build, std::vector<Matrix> params) {
  GradCheckReport rep = finite_diff_check(build, std::move(params));
  INFO(name << ": worst " << rep.worst_param << " at (" << rep.worst_row << ","
            << rep.worst_col << ") rel err " << rep.max_rel_err);
  CHECK(rep.pass);
}

}  // namespace

// --- forward values -------------------------------------------------------------

TEST_CASE("matmul matches hand results") {
  Tape t;
  Val id2 = t.input(Matrix::Identity(2, 2));
  Val a = t.input(from_rows({{1, 2}, {3, 4}}));
  Val b = t.input(from_rows({{5, 6}, {7, 8}}));
  CHECK(t.value(matmul(id2, a)).isApprox(t.value(a)));
  CHECK(t.value(matmul(a, b)).isApprox(from_rows({{19, 22}, {43, 50}})));
  Val z = t.input(Matrix::Zero(2, 2));
  Val any = t.input(from_rows({{1, -1, 2}, {0, 5, 3}}));
  CHECK(t.value(matmul(z, any)).isZero(0.0));
}

TEST_CASE("matmul shape error names both shapes") {
  Tape t;
  Val a = t.input(Matrix::Zero(2, 3));
  Val b = t.input(Matrix::Zero(2, 2));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2x3)") != std::string::npos);
    CHECK(msg.find("(2x2)") != std::string::npos);
  }
}

TEST_CASE("safe_sqrt values, clamp, and eps") {
  Tape t;
  Val x = t.input(from_rows({{4.0, 0.0, -1e-16}}));
  const Matrix& y0 = t.value(safe_sqrt(x, 0.0));
  CHECK(y0(0, 0) == 2.0);
  CHECK(y0(0, 1) == 0.0);
  CHECK(y0(0, 2) == 0.0);  // rounding debris clamps to zero

  Val z = t.input(from_rows({{0.0}}));
  CHECK(t.value(safe_sqrt(z, 1e-8))(0, 0) == doctest::Approx(1e-4).epsilon(1e-12));

  CHECK_THROWS_AS(safe_sqrt(x, -1e-9), ParamError);
}

TEST_CASE("safe_sqrt gradient is 1/(2 sqrt(x)) on the positive side") {
  Tape t;
  Val x = t.input(from_rows({{1.0}}));
  Gradients g = t.backward(sum_all(safe_sqrt(x, 0.0)));
  CHECK(g.wrt(x)(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("layer_norm normalizes with population variance") {
  Tape t;
  Val gain = t.input(Matrix::Ones(1, 3));
  Val bias = t.input(Matrix::Zero(1, 3));

  Val x = t.input(from_rows({{1, 2, 3}}));
  const Matrix& y = t.value(layer_norm(x, gain, bias, 1e-5));
  CHECK(y(0, 0) == doctest::Approx(-1.22474).epsilon(1e-4));
  CHECK(y(0, 1) == doctest::Approx(0.0).scale(1.0));
  CHECK(y(0, 2) == doctest::Approx(1.22474).epsilon(1e-4));

  Val zero = t.input(Matrix::Zero(1, 3));
  CHECK(t.value(layer_norm(zero, gain, bias, 1e-5)).isZero(0.0));

  // Centering makes any constant row land on bias.
  Val c = t.input(Matrix::Constant(1, 3, 17.3));
  CHECK(t.value(layer_norm(c, gain, bias, 1e-5)).isZero(0.0));

  Val short_gain = t.input(Matrix::Ones(1, 2));
  CHECK_THROWS_AS(layer_norm(x, short_gain, bias, 1e-5), ShapeError);
}

TEST_CASE("l2_normalize produces unit rows and keeps zero rows zero") {
  Tape t;
  Val x = t.input(from_rows({{3, 4}, {0, 0}}));
  const Matrix& y = t.value(l2_normalize(x));
  CHECK(y(0, 0) == doctest::Approx(0.6));
  CHECK(y(0, 1) == doctest::Approx(0.8));
  CHECK(y(1, 0) == 0.0);
  CHECK(y(1, 1) == 0.0);
}

TEST_CASE("mean_rows, triu_vec, sum_all, log_sum_exp_rows, exp_elem values") {
  Tape t;
  Val x = t.input(from_rows({{1, 2}, {3, 6}}));
  CHECK(t.value(mean_rows(x)).isApprox(from_rows({{2, 4}})));

  Val sq = t.input(from_rows({{1, 2}, {3, 4}}));
  CHECK(t.value(triu_vec(sq)).isApprox(from_rows({{1, 2, 4}})));
  Val rect = t.input(Matrix::Zero(2, 3));
  CHECK_THROWS_AS(triu_vec(rect), ShapeError);

  CHECK(t.value(sum_all(x))(0, 0) == 12.0);

  Val row = t.input(from_rows({{0.0, 0.0}, {100.0, 100.0}}));
  const Matrix& lse = t.value(log_sum_exp_rows(row));
  CHECK(lse(0, 0) == doctest::Approx(std::log(2.0)));
  CHECK(lse(1, 0) == doctest::Approx(100.0 + std::log(2.0)));  // stable at large inputs

  Val e = t.input(from_rows({{0.0, 1.0}}));
  CHECK(t.value(exp_elem(e))(0, 1) == doctest::Approx(std::exp(1.0)));
}

TEST_CASE("split_cols then concat_cols is the identity on values") {
  Tape t;
  CounterRng rng(31);
  Val x = t.input(random_normal(rng, 3, 8));
  auto parts = split_cols(x, 4);
  REQUIRE(parts.size() == 4);
  Val back = concat_cols(parts);
  CHECK(bits_equal(t.value(back), t.value(x)));
  CHECK_THROWS_AS(split_cols(x, 3), ConfigError);
}

TEST_CASE("compositions broadcast and stack as documented") {
  Tape t;
  Val s = t.input(Matrix::Constant(1, 1, 2.5));
  CHECK(t.value(broadcast_scalar(s, 3, 4)).isApprox(Matrix::Constant(3, 4, 2.5)));

  Val x = t.input(from_rows({{1, 2}, {3, 4}}));
  CHECK(t.value(scale_by(x, s)).isApprox(from_rows({{2.5, 5}, {7.5, 10}})));

  std::vector<Val> rows = {t.input(from_rows({{1, 2}})), t.input(from_rows({{3, 4}}))};
  CHECK(t.value(concat_rows(rows)).isApprox(from_rows({{1, 2}, {3, 4}})));
}

// --- backward -------------------------------------------------------------------

TEST_CASE("backward of sum(matmul) gives ones times the transposed factor") {
  Tape t;
  Val a = t.input(from_rows({{1, 2, 3}, {4, 5, 6}}));
  Val b = t.input(from_rows({{1, -1}, {2, 0}, {0, 3}}));
  Gradients g = t.backward(sum_all(matmul(a, b)));
  Matrix expect_a = Matrix::Ones(2, 2) * t.value(b).transpose();
  Matrix expect_b = t.value(a).transpose() * Matrix::Ones(2, 2);
  CHECK(g.wrt(a).isApprox(expect_a, 1e-14));
  CHECK(g.wrt(b).isApprox(expect_b, 1e-14));
}

TEST_CASE("backward of sum(safe_sqrt) at 4 is a quarter") {
  Tape t;
  Val x = t.input(from_rows({{4.0}}));
  Gradients g = t.backward(sum_all(safe_sqrt(x, 0.0)));
  CHECK(g.wrt(x)(0, 0) == 0.25);
}

TEST_CASE("backward rejects a non-scalar root") {
  Tape t;
  Val x = t.input(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(x), ContractError);
}

TEST_CASE("fan-out accumulates both path gradients") {
  Tape t;
  Val x = t.input(from_rows({{1.0, -2.0}, {0.5, 3.0}}));
  // y = sum(x*x + 3x)  =>  dy/dx = 2x + 3
  Val y = sum_all(add(hadamard(x, x), scalar_scale(x, 3.0)));
  Gradients g = t.backward(y);
  Matrix expect = 2.0 * t.value(x) + Matrix::Constant(2, 2, 3.0);
  CHECK(g.wrt(x).isApprox(expect, 1e-14));

  expect_pass(
      "fan-out",
      [](Tape& tt, const std::vector<Val>& p) {
        return sum_all(add(hadamard(p[0], p[0]), scalar_scale(p[0], 3.0)));
      },
      {t.value(x)});
}

TEST_CASE("gradients flow through split and concat unchanged") {
  CounterRng rng(77);
  Matrix x0 = random_normal(rng, 2, 6);
  Matrix w0 = random_uniform(rng, 2, 6, 0.5, 1.5);

  auto grad_of = [&](bool roundtrip) {
    Tape t;
    Val x = t.input(x0);
    Val w = t.input(w0);
    Val y = roundtrip ? concat_cols(split_cols(x, 3)) : x;
    Gradients g = t.backward(sum_all(hadamard(y, w)));
    return g.wrt(x);
  };
  CHECK(bits_equal(grad_of(true), grad_of(false)));
}

TEST_CASE("unreached nodes report zero gradient") {
  Tape t;
  Val x = t.input(Matrix::Ones(1, 1));
  Val orphan = t.input(Matrix::Ones(2, 3));
  Gradients g = t.backward(sum_all(x));
  CHECK(!g.reached(orphan));
  CHECK(g.wrt(orphan).isZero(0.0));
}

// --- purity ---------------------------------------------------------------------

TEST_CASE("identical graphs give bit-identical values and gradients") {
  CounterRng rng(99);
  Matrix x0 = random_normal(rng, 3, 4);

  auto run = [&]() {
    Tape t;
    Val x = t.input(x0);
    Val gain = t.input(Matrix::Ones(1, 4));
    Val bias = t.input(Matrix::Zero(1, 4));
    Val y = sum_all(exp_elem(scalar_scale(layer_norm(x, gain, bias, 1e-5), 0.1)));
    Gradients g = t.backward(y);
    return std::pair<Matrix, Matrix>(t.value(y), g.wrt(x));
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  CHECK(bits_equal(v1, v2));
  CHECK(bits_equal(g1, g2));
}

// --- finite differences vs analytic, per primitive -------------------------------

TEST_CASE("finite_diff_check on sum of squares is near exact") {
  GradCheckReport rep = finite_diff_check(
      [](Tape& t, const std::vector<Val>& p) { return sum_all(hadamard(p[0], p[0])); },
      {from_rows({{1.0, 2.0}})});
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-9);
}

TEST_CASE("finite_diff_check accepts a constant function") {
  GradCheckReport rep = finite_diff_check(
      [](Tape& t, const std::vector<Val>& p) { return sum_all(scalar_scale(p[0], 0.0)); },
      {from_rows({{1.0, 2.0}})});
  CHECK(rep.pass);
  CHECK(rep.max_rel_err == 0.0);
}

TEST_CASE("finite_diff_check flags a nondeterministic function") {
  int calls = 0;
  CHECK_THROWS_AS(finite_diff_check(
                      [&calls](Tape& t, const std::vector<Val>& p) {
                        return scalar_scale(sum_all(p[0]), 1.0 + 0.01 * calls++);
                      },
                      {Matrix::Ones(1, 2)}),
                  DeterminismError);
}

TEST_CASE("gradcheck: matmul on 20 random shapes") {
  CounterRng rng(1001);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng), k = rnd_dim(rng), c = rnd_dim(rng);
    const Matrix w = random_uniform(rng, r, c, 0.5, 1.5);
    expect_pass("matmul",
                [w](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, matmul(p[0], p[1]), w);
                },
                {random_normal(rng, r, k), random_normal(rng, k, c)});
  }
}

TEST_CASE("gradcheck: transpose, add, subtract, scalar_scale on 20 random shapes") {
  CounterRng rng(1002);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng), c = rnd_dim(rng);
    const double f = rng.uniform(-2.0, 2.0);
    const Matrix wt = random_uniform(rng, c, r, 0.5, 1.5);
    expect_pass("transpose",
                [wt](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, transpose(p[0]), wt);
                },
                {random_normal(rng, r, c)});
    const Matrix w = random_uniform(rng, r, c, 0.5, 1.5);
    expect_pass("add/subtract/scalar_scale",
                [w, f](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, subtract(add(p[0], p[1]), scalar_scale(p[1], f)), w);
                },
                {random_normal(rng, r, c), random_normal(rng, r, c)});
  }
}

TEST_CASE("gradcheck: hadamard on 20 random shapes") {
  CounterRng rng(1003);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng), c = rnd_dim(rng);
    const Matrix w = random_uniform(rng, r, c, 0.5, 1.5);
    expect_pass("hadamard",
                [w](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, hadamard(p[0], p[1]), w);
                },
                {random_normal(rng, r, c), random_normal(rng, r, c)});
  }
}

TEST_CASE("gradcheck: safe_sqrt on 20 random shapes") {
  CounterRng rng(1004);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng), c = rnd_dim(rng);
    const Matrix w = random_uniform(rng, r, c, 0.5, 1.5);
    // Entries away from the clamp kink at zero; both branches present.
    expect_pass("safe_sqrt",
                [w](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, safe_sqrt(p[0], 1e-3), w);
                },
                {draw_signed(rng, r, c)});
  }
}

TEST_CASE("gradcheck: relu on 20 random shapes") {
  CounterRng rng(1005);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng), c = rnd_dim(rng);
    const Matrix w = random_uniform(rng, r, c, 0.5, 1.5);
    expect_pass("relu",
                [w](Tape& t, const std::vector<Val>& p) { return weighted(t, relu(p[0]), w); },
                {draw_signed(rng, r, c)});
  }
}

TEST_CASE("gradcheck: layer_norm on 20 random shapes") {
  CounterRng rng(1006);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng);
    const Index c = 2 + static_cast<Index>(rng.next_u64() % 5);
    const Matrix w = random_uniform(rng, r, c, 0.5, 1.5);
    expect_pass("layer_norm",
                [w](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, layer_norm(p[0], p[1], p[2], 1e-5), w);
                },
                {random_normal(rng, r, c), random_uniform(rng, 1, c, 0.5, 1.5),
                 random_normal(rng, 1, c)});
  }
}

TEST_CASE("gradcheck: l2_normalize on 20 random shapes") {
  CounterRng rng(1007);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng), c = rnd_dim(rng);
    const Matrix w = random_uniform(rng, r, c, 0.5, 1.5);
    expect_pass("l2_normalize",
                [w](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, l2_normalize(p[0]), w);
                },
                {draw_signed(rng, r, c)});
  }
}

TEST_CASE("gradcheck: mean_rows, sum_all on 20 random shapes") {
  CounterRng rng(1008);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng), c = rnd_dim(rng);
    const Matrix w = random_uniform(rng, 1, c, 0.5, 1.5);
    expect_pass("mean_rows",
                [w](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, mean_rows(p[0]), w);
                },
                {random_normal(rng, r, c)});
    expect_pass("sum_all",
                [](Tape& t, const std::vector<Val>& p) { return sum_all(p[0]); },
                {random_normal(rng, r, c)});
  }
}

TEST_CASE("gradcheck: concat_cols and split_cols on 20 random shapes") {
  CounterRng rng(1009);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng), c1 = rnd_dim(rng), c2 = rnd_dim(rng);
    const Matrix w = random_uniform(rng, r, c1 + c2, 0.5, 1.5);
    expect_pass("concat_cols",
                [w](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, concat_cols({p[0], p[1]}), w);
                },
                {random_normal(rng, r, c1), random_normal(rng, r, c2)});

    const int h = 1 + static_cast<int>(rng.next_u64() % 3);
    const Index width = rnd_dim(rng);
    std::vector<Matrix> pw;
    for (int j = 0; j < h; ++j) pw.push_back(random_uniform(rng, r, width, 0.5, 1.5));
    expect_pass("split_cols",
                [pw, h](Tape& t, const std::vector<Val>& p) {
                  auto parts = split_cols(p[0], h);
                  Val acc = weighted(t, parts[0], pw[0]);
                  for (size_t j = 1; j < parts.size(); ++j)
                    acc = add(acc, weighted(t, parts[j], pw[j]));
                  return acc;
                },
                {random_normal(rng, r, h * width)});
  }
}

TEST_CASE("gradcheck: triu_vec on 20 random shapes") {
  CounterRng rng(1010);
  for (int it = 0; it < 20; ++it) {
    const Index k = rnd_dim(rng);
    const Matrix w = random_uniform(rng, 1, triu_len(k), 0.5, 1.5);
    expect_pass("triu_vec",
                [w](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, triu_vec(p[0]), w);
                },
                {random_normal(rng, k, k)});
  }
}

TEST_CASE("gradcheck: log_sum_exp_rows and exp_elem on 20 random shapes") {
  CounterRng rng(1011);
  for (int it = 0; it < 20; ++it) {
    const Index r = rnd_dim(rng), c = rnd_dim(rng);
    const Matrix wl = random_uniform(rng, r, 1, 0.5, 1.5);
    expect_pass("log_sum_exp_rows",
                [wl](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, log_sum_exp_rows(p[0]), wl);
                },
                {random_normal(rng, r, c)});
    const Matrix we = random_uniform(rng, r, c, 0.5, 1.5);
    expect_pass("exp_elem",
                [we](Tape& t, const std::vector<Val>& p) {
                  return weighted(t, exp_elem(p[0]), we);
                },
                {random_uniform(rng, r, c, -1.0, 1.0)});
  }
}

TEST_CASE("gradcheck: scalar broadcast compositions") {
  CounterRng rng(1012);
  for (int it = 0; it < 10; ++it) {
    const Index r = rnd_dim(rng), c = rnd_dim(rng);
    const Matrix w = random_uniform(rng, r, c, 0.5, 1.5);
    expect_pass("scale_by(exp(-t))",
                [w](Tape& t, const std::vector<Val>& p) {
                  Val inv = exp_elem(scalar_scale(p[1], -1.0));
                  return weighted(t, scale_by(p[0], inv), w);
                },
                {random_normal(rng, r, c), random_uniform(rng, 1, 1, -0.5, 0.5)});
  }
}
