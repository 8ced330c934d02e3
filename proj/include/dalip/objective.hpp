#pragma once

#include "dalip/tape.hpp"

namespace dalip {

enum class Reduction { Sum, Mean };

// Weights and temperature of the combined contrastive objective. The
// temperature is carried as log_tau so tau = exp(log_tau) stays positive
// under unconstrained updates.
struct DalipObjectiveConfig {
  double lambda1 = 0.4;
  double lambda2 = 0.6;
  double log_tau_init = 2.6592600369327783;  // log(1/0.07)
  bool normalize_second_order = true;
  bool convex_weights = true;  // require lambda1 + lambda2 == 1
  Reduction reduction = Reduction::Mean;

  void validate() const;
};

// One batch of paired embeddings: first-order rows are unit vectors, the
// second-order rows are unconstrained (normalized inside the loss when the
// flag is set).
struct EmbeddingBatch {
  Matrix image_first;   // N x d
  Matrix text_first;    // N x d
  Matrix image_second;  // N x d_tilde
  Matrix text_second;   // N x d_tilde

  Index size() const { return image_first.rows(); }
  void validate() const;
};

// Symmetric two-direction contrastive loss over the N x N similarity matrix
// divided by tau; summed over rows, or mean-reduced. log_tau is a 1x1 node.
Val infonce(Val img, Val txt, Val log_tau, Reduction reduction);

// Tape-free evaluation with an explicit temperature.
double infonce(const Matrix& img, const Matrix& txt, double tau, Reduction reduction);

// lambda1 * first-order term + lambda2 * second-order term, sharing log_tau;
// a zero lambda skips its term entirely.
Val dalip_loss(Val img_first, Val txt_first, Val img_second, Val txt_second, Val log_tau,
               const DalipObjectiveConfig& cfg);

double dalip_loss(const EmbeddingBatch& batch, const DalipObjectiveConfig& cfg, double tau);

// Fraction of rows whose matching partner ranks in the top k of the combined
// similarity lambda1*<f_I,f_T> + lambda2*<z_I,z_T>; ties break toward the
// lower index.
double retrieval_topk(const EmbeddingBatch& batch, const DalipObjectiveConfig& cfg, int k);

}  // namespace dalip
