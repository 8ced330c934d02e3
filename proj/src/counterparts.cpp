#include "dalip/counterparts.hpp"

namespace dalip {

PoolingKind parse_pooling(const std::string& name) {
  if (name == "mean") return PoolingKind::Mean;
  if (name == "mbdc") return PoolingKind::Mbdc;
  if (name == "bdc") return PoolingKind::SingleHeadBdc;
  if (name == "cov") return PoolingKind::CovarianceTriu;
  throw ConfigError("pooling: unknown kind '" + name + "' (expected mean|mbdc|bdc|cov)");
}

const char* pooling_name(PoolingKind kind) {
  switch (kind) {
    case PoolingKind::Mean: return "mean";
    case PoolingKind::Mbdc: return "mbdc";
    case PoolingKind::SingleHeadBdc: return "bdc";
    case PoolingKind::CovarianceTriu: return "cov";
  }
  throw ContractError("pooling: unhandled kind");
}

MbdcParams head_init(PoolingKind kind, int h, Index d, Index d_tilde, Index q,
                     std::uint64_t seed) {
  switch (kind) {
    case PoolingKind::Mean: {
      MbdcParams p;
      p.h = 1;
      p.d = d;
      p.d_tilde = d;  // the mean head's width is the channel count itself
      p.q = 0;
      return p;
    }
    case PoolingKind::Mbdc:
      return mbdc_init(h, d, d_tilde, q, seed);
    case PoolingKind::SingleHeadBdc:
    case PoolingKind::CovarianceTriu:
      return mbdc_init(1, d, d_tilde, q, seed);
  }
  throw ContractError("pooling: unhandled kind");
}

Index head_output_width(PoolingKind kind, const MbdcParams& p) {
  return kind == PoolingKind::Mean ? p.d : p.d_tilde;
}

Val covariance_triu_vec(Val x) {
  Tape& t = *x.tape;
  const Index m = t.value(x).rows();
  if (m < 2)
    throw ShapeError("covariance_triu: sample covariance is degenerate below two tokens, got " +
                     shape_str(t.value(x)));
  Val ones = t.input(Matrix::Ones(m, 1));
  Val centered = subtract(x, matmul(ones, mean_rows(x)));
  Val cov = scalar_scale(matmul(transpose(centered), centered),
                         1.0 / static_cast<double>(m - 1));
  return triu_vec(cov);
}

Matrix covariance_triu_vec(const Matrix& x) {
  Tape t;
  return t.value(covariance_triu_vec(t.input(x)));
}

Val pool_forward(Val x, PoolingKind kind, const MbdcVals& vals, const MbdcParams& p) {
  Tape& t = *x.tape;
  if (p.d > 0 && t.value(x).cols() != p.d)
    throw ShapeError("pool_forward: input must have " + std::to_string(p.d) +
                     " channels, got " + shape_str(t.value(x)));
  switch (kind) {
    case PoolingKind::Mean:
      return mean_rows(x);
    case PoolingKind::Mbdc:
    case PoolingKind::SingleHeadBdc:
      return mbdc_forward(x, vals, p);
    case PoolingKind::CovarianceTriu: {
      Val flat = covariance_triu_vec(x);
      Val normed = layer_norm(flat, vals.ln_gain, vals.ln_bias, kLnEps);
      return matmul(relu(matmul(normed, vals.w1)), vals.w2);
    }
  }
  throw ContractError("pooling: unhandled kind");
}

Matrix pool_forward(const Matrix& x, PoolingKind kind, const MbdcParams& p) {
  Tape t;
  MbdcVals vals{};
  if (kind != PoolingKind::Mean) vals = mbdc_register(t, p);
  return t.value(pool_forward(t.input(x), kind, vals, p));
}

}  // namespace dalip
