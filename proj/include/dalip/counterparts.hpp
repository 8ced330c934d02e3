#pragma once

#include <string>

#include "dalip/mbdc.hpp"

namespace dalip {

// Token-pooling heads that can stand in for one another inside a tower.
// Every kind maps M x d token features to a single row whose width does not
// depend on M.
enum class PoolingKind {
  Mean,            // first-order mean over tokens, width d, parameter-free
  Mbdc,            // multi-head distance-covariance head, width d_tilde
  SingleHeadBdc,   // the same head pinned to h = 1
  CovarianceTriu,  // sample covariance + the same LN/FFN projection contract
};

// Names as they appear in config files: "mean" | "mbdc" | "bdc" | "cov".
PoolingKind parse_pooling(const std::string& name);
const char* pooling_name(PoolingKind kind);

// Parameters for a head. Kinds that fix their own head count (bdc, cov)
// ignore the h argument; Mean has no parameters and returns an empty set
// carrying only d.
MbdcParams head_init(PoolingKind kind, int h, Index d, Index d_tilde, Index q,
                     std::uint64_t seed);

Index head_output_width(PoolingKind kind, const MbdcParams& p);

// Differentiable pooled embedding, 1 x head_output_width. Mean ignores
// vals/params beyond the input width check.
Val pool_forward(Val x, PoolingKind kind, const MbdcVals& vals, const MbdcParams& p);

// Tape-free convenience wrapper.
Matrix pool_forward(const Matrix& x, PoolingKind kind, const MbdcParams& p);

// Unbiased sample covariance (divisor M-1), upper triangle with diagonal,
// as a 1 x d(d+1)/2 row. Requires at least two tokens.
Val covariance_triu_vec(Val x);
Matrix covariance_triu_vec(const Matrix& x);

}  // namespace dalip
