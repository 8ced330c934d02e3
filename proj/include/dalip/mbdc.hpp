#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dalip/bdc.hpp"
#include "dalip/tape.hpp"

namespace dalip {

// Epsilon inside the normalization denominator (fixed, not a tunable).
inline constexpr double kLnEps = 1e-5;

// Second-order pooling head: split d channels into h heads, take the
// Brownian distance covariance of each head, vectorize the upper triangles,
// normalize, and mix through a bias-free two-layer feed-forward network down
// to a d_tilde-dimensional embedding.
struct MbdcParams {
  int h = 1;
  Index d = 0;
  Index d_tilde = 0;
  Index q = 0;
  double eps = 1e-8;  // distance-sqrt stabilizer

  Matrix w1;       // (h*l) x q
  Matrix w2;       // q x d_tilde
  Matrix ln_gain;  // 1 x (h*l)
  Matrix ln_bias;  // 1 x (h*l)

  Index head_dim() const { return d / h; }
  Index triu_width() const { return triu_len(head_dim()); }  // l
  Index concat_width() const { return h * triu_width(); }    // h*l

  // Throws ConfigError/ShapeError when the pieces do not fit together.
  void validate() const;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, identity normalization
// affine; deterministic in seed.
MbdcParams mbdc_init(int h, Index d, Index d_tilde, Index q, std::uint64_t seed);

// Contiguous column blocks, in order; concatenation restores x exactly.
std::vector<Matrix> split_heads(const Matrix& x, int h);

// Parameter handles registered on a tape for the differentiable path.
struct MbdcVals {
  Val w1;
  Val w2;
  Val ln_gain;
  Val ln_bias;
};
MbdcVals mbdc_register(Tape& t, const MbdcParams& p);

// Differentiable forward: x (M x d) -> 1 x d_tilde.
Val mbdc_forward(Val x, const MbdcVals& vals, const MbdcParams& p);

// Tape-free convenience wrapper.
Matrix mbdc_forward(const Matrix& x, const MbdcParams& p);

// Checkpoint: a directory holding w1/w2/ln_gain/ln_bias tensor blobs and a
// JSON manifest {h, d, d_tilde, q, eps}.
void save_mbdc(const std::filesystem::path& dir, const MbdcParams& p);
MbdcParams load_mbdc(const std::filesystem::path& dir);

}  // namespace dalip
