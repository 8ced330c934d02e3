#include "dalip/bdc.hpp"

#include <cmath>

namespace dalip {

Val bdc_forward(Val x, double eps) {
  Tape& t = *x.tape;
  const Index k = t.value(x).cols();
  if (t.value(x).rows() < 1 || k < 1)
    throw ShapeError("bdc_forward: need at least one token and one channel, got " +
                     shape_str(t.value(x)));

  Val ones = t.input(Matrix::Ones(k, k));
  Val eye = t.input(Matrix::Identity(k, k));

  Val gram = matmul(transpose(x), x);              // K, k x k
  Val diag = hadamard(gram, eye);                  // K_ii on the diagonal
  Val row_diag = matmul(diag, ones);               // row i broadcast of K_ii
  Val col_diag = matmul(ones, diag);               // column j broadcast of K_jj
  Val dist2 = subtract(add(row_diag, col_diag), scalar_scale(gram, 2.0));
  Val dist = safe_sqrt(dist2, eps);                // Ahat

  const double inv_k = 1.0 / static_cast<double>(k);
  Val left = matmul(ones, dist);                   // J Ahat
  Val right = matmul(dist, ones);                  // Ahat J
  Val both = matmul(left, ones);                   // J Ahat J
  Val centered = add(subtract(dist, scalar_scale(add(left, right), inv_k)),
                     scalar_scale(both, inv_k * inv_k));
  return centered;
}

Matrix bdc_matrix(const Matrix& x, double eps) {
  Tape t;
  return t.value(bdc_forward(t.input(x), eps));
}

Matrix bdc_oracle(const Matrix& x) {
  const Index k = x.cols();
  Matrix dist(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) dist(i, j) = (x.col(i) - x.col(j)).norm();

  const double grand = dist.mean();
  Matrix out(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j)
      out(i, j) = dist(i, j) - dist.row(i).mean() - dist.col(j).mean() + grand;
  return out;
}

}  // namespace dalip
