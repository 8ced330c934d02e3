#include "dalip/objective.hpp"

#include <cmath>

namespace dalip {

void DalipObjectiveConfig::validate() const {
  if (lambda1 < 0 || lambda2 < 0)
    throw ParamError("objective: weights must be nonnegative, got lambda1=" +
                     std::to_string(lambda1) + " lambda2=" + std::to_string(lambda2));
  if (convex_weights && std::abs(lambda1 + lambda2 - 1.0) > 1e-12)
    throw ParamError("objective: lambda1 + lambda2 must equal 1, got " +
                     std::to_string(lambda1 + lambda2));
  if (!std::isfinite(log_tau_init)) throw ParamError("objective: log_tau_init must be finite");
}

void EmbeddingBatch::validate() const {
  const Index n = image_first.rows();
  if (n < 1) throw ShapeError("embedding batch: empty batch");
  if (text_first.rows() != n || image_second.rows() != n || text_second.rows() != n)
    throw ShapeError("embedding batch: row counts differ, " + shape_str(image_first) + " vs " +
                     shape_str(text_first) + " vs " + shape_str(image_second) + " vs " +
                     shape_str(text_second));
  if (text_first.cols() != image_first.cols())
    throw ShapeError("embedding batch: first-order widths differ, " + shape_str(image_first) +
                     " vs " + shape_str(text_first));
  if (text_second.cols() != image_second.cols())
    throw ShapeError("embedding batch: second-order widths differ, " + shape_str(image_second) +
                     " vs " + shape_str(text_second));
  // Rows must be unit length, except the exact-zero row the normalization
  // guard emits for degenerate inputs (the canonical "no signal" embedding).
  for (const Matrix* m : {&image_first, &text_first}) {
    for (Index i = 0; i < n; ++i) {
      const double norm = m->row(i).norm();
      if (norm > 1e-9 && std::abs(norm - 1.0) > 1e-9)
        throw ContractError("embedding batch: first-order row " + std::to_string(i) +
                            " is not unit length");
    }
  }
}

Val infonce(Val img, Val txt, Val log_tau, Reduction reduction) {
  Tape& t = *img.tape;
  const Index n = t.value(img).rows();
  if (n < 1) throw ShapeError("infonce: empty batch");
  if (t.value(txt).rows() != n)
    throw ShapeError("infonce: row counts differ, " + shape_str(t.value(img)) + " vs " +
                     shape_str(t.value(txt)));
  if (t.value(log_tau).rows() != 1 || t.value(log_tau).cols() != 1)
    throw ShapeError("infonce: log_tau must be 1x1, got " + shape_str(t.value(log_tau)));

  Val sims = matmul(img, transpose(txt));                    // N x N
  Val inv_tau = exp_elem(scalar_scale(log_tau, -1.0));       // 1/tau > 0
  Val logits = scale_by(sims, inv_tau);

  Val eye = t.input(Matrix::Identity(n, n));
  Val matched = sum_all(hadamard(logits, eye));              // sum of diagonal logits
  Val row_lse = sum_all(log_sum_exp_rows(logits));           // image -> text direction
  Val col_lse = sum_all(log_sum_exp_rows(transpose(logits)));  // text -> image direction
  Val total = subtract(add(row_lse, col_lse), scalar_scale(matched, 2.0));
  if (reduction == Reduction::Mean)
    total = scalar_scale(total, 1.0 / static_cast<double>(n));
  return total;
}

double infonce(const Matrix& img, const Matrix& txt, double tau, Reduction reduction) {
  if (tau <= 0) throw ParamError("infonce: tau must be positive, got " + std::to_string(tau));
  Tape t;
  Val log_tau = t.input(Matrix::Constant(1, 1, std::log(tau)));
  return t.value(infonce(t.input(img), t.input(txt), log_tau, reduction))(0, 0);
}

Val dalip_loss(Val img_first, Val txt_first, Val img_second, Val txt_second, Val log_tau,
               const DalipObjectiveConfig& cfg) {
  cfg.validate();
  Tape& t = *img_first.tape;

  bool have = false;
  Val total{};
  if (cfg.lambda1 > 0) {
    total = scalar_scale(infonce(img_first, txt_first, log_tau, cfg.reduction), cfg.lambda1);
    have = true;
  }
  if (cfg.lambda2 > 0) {
    Val i2 = cfg.normalize_second_order ? l2_normalize(img_second) : img_second;
    Val t2 = cfg.normalize_second_order ? l2_normalize(txt_second) : txt_second;
    Val second = scalar_scale(infonce(i2, t2, log_tau, cfg.reduction), cfg.lambda2);
    total = have ? add(total, second) : second;
    have = true;
  }
  if (!have) total = t.input(Matrix::Zero(1, 1));
  return total;
}

double dalip_loss(const EmbeddingBatch& batch, const DalipObjectiveConfig& cfg, double tau) {
  if (tau <= 0) throw ParamError("dalip_loss: tau must be positive, got " + std::to_string(tau));
  batch.validate();
  Tape t;
  Val log_tau = t.input(Matrix::Constant(1, 1, std::log(tau)));
  Val loss = dalip_loss(t.input(batch.image_first), t.input(batch.text_first),
                        t.input(batch.image_second), t.input(batch.text_second), log_tau, cfg);
  return t.value(loss)(0, 0);
}

namespace {

Matrix unit_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double n = std::max(x.row(i).norm(), 1e-12);
    y.row(i) = x.row(i) / n;
  }
  return y;
}

}  // namespace

double retrieval_topk(const EmbeddingBatch& batch, const DalipObjectiveConfig& cfg, int k) {
  cfg.validate();
  batch.validate();
  const Index n = batch.size();
  if (k < 1 || k > n)
    throw ParamError("retrieval_topk: k must be in [1, " + std::to_string(n) + "], got " +
                     std::to_string(k));

  Matrix sims = Matrix::Zero(n, n);
  if (cfg.lambda1 > 0)
    sims += cfg.lambda1 * (batch.image_first * batch.text_first.transpose());
  if (cfg.lambda2 > 0) {
    Matrix i2 = cfg.normalize_second_order ? unit_rows(batch.image_second) : batch.image_second;
    Matrix t2 = cfg.normalize_second_order ? unit_rows(batch.text_second) : batch.text_second;
    sims += cfg.lambda2 * (i2 * t2.transpose());
  }

  Index hits = 0;
  for (Index i = 0; i < n; ++i) {
    Index better = 0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (sims(i, j) > sims(i, i) || (sims(i, j) == sims(i, i) && j < i)) ++better;
    }
    if (better < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace dalip
