#pragma once

#include "dalip/tape.hpp"

namespace dalip {

// Channel-wise Brownian distance covariance of a tokens-by-channels block.
//
// Given x (M x k), forms K = x^T x, the squared channel distances
// Dhat_ij = K_ii + K_jj - 2 K_ij, their stabilized square roots
// Ahat = sqrt(max(Dhat, 0) + eps), and the double-centered
//   B = Ahat - (1/k)(J Ahat + Ahat J) + (1/k^2) J Ahat J
// with J the k x k all-ones matrix. B is symmetric; for eps = 0 every row
// and column of B sums to zero.

// Differentiable forward on a tape.
Val bdc_forward(Val x, double eps);

// Tape-free forward, same arithmetic (used where no gradients are needed).
Matrix bdc_matrix(const Matrix& x, double eps);

// Independent verification path: per-column-pair Euclidean distances and
// per-entry classical double centering (row mean, column mean, grand mean).
// Shares no code with bdc_forward; eps is fixed at 0.
Matrix bdc_oracle(const Matrix& x);

}  // namespace dalip
