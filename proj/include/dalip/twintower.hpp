#pragma once

// Toy two-tower retrieval model: per-modality token encoders feeding a
// mean-pooled first-order embedding and a pooled second-order embedding,
// trained end to end against the combined contrastive objective with an
// adaptive-moment optimizer under a warmup + cosine learning-rate schedule.

#include <filesystem>
#include <span>
#include <vector>

#include "dalip/counterparts.hpp"
#include "dalip/mbdc.hpp"
#include "dalip/objective.hpp"
#include "dalip/synthdata.hpp"
#include "dalip/tape.hpp"

namespace dalip {

// One modality's token encoder: two bias-free projections with a relu in
// between, applied independently to every token row, plus a square map on
// the pooled mean. Any token count M maps to M encoded tokens.
struct EncoderWeights {
  Matrix proj_in;     // raw_dim × mid_dim
  Matrix proj_out;    // mid_dim × token_dim
  Matrix first_proj;  // token_dim × token_dim
};

struct TowerParams {
  EncoderWeights image;
  EncoderWeights text;
  PoolingKind pooling = PoolingKind::Mbdc;
  // One pooling head serves both modalities by default (their encoded tokens
  // live in the same space); a per-modality head is available.
  bool shared_head = true;
  MbdcParams head;       // image-side head, and the text side when shared
  MbdcParams head_text;  // only consulted when shared_head is false
  double log_tau = 0.0;  // learnable log inverse temperature

  Index raw_dim() const { return image.proj_in.rows(); }
  Index token_dim() const { return image.proj_out.cols(); }
  void validate() const;
};

// Fresh towers with uniform fan-in-scaled weights, a pooling head from
// head_init, and log_tau seeded from the objective default.
TowerParams tower_init(PoolingKind kind, Index raw_dim, Index mid_dim, Index token_dim,
                       int heads, Index out_dim, Index hidden, bool shared_head,
                       double log_tau_init, std::uint64_t seed);

// Tape handles for every trainable leaf.
struct EncoderVals {
  Val proj_in, proj_out, first_proj;
};
struct ModelVals {
  EncoderVals image, text;
  MbdcVals head, head_text;
  Val log_tau;
};
ModelVals model_register(Tape& t, const TowerParams& p);

// Batched forward pass: one row per sample in each output, first-order rows
// l2-normalized, second-order rows raw (the objective normalizes on demand).
struct BatchEmbeddings {
  Val image_first, text_first, image_second, text_second;
};
BatchEmbeddings model_forward(Tape& t, std::span<const SampleRecord* const> batch,
                              const ModelVals& v, const TowerParams& p);

// Training objective selector: the combined two-channel loss, or plain
// first-order contrastive ("infonce") which ignores the λ weights entirely.
enum class LossVariant { Combined, FirstOrderOnly };
LossVariant parse_loss_variant(const std::string& name);  // "dalip" | "infonce"
const char* loss_variant_name(LossVariant v);

struct TrainConfig {
  Index batch_size = 64;
  Index epochs = 30;
  double base_lr = 3e-3;
  double min_lr = 1e-5;
  Index warmup_steps = 25;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  LossVariant variant = LossVariant::Combined;
  DalipObjectiveConfig objective;
  void validate() const;
};

// Learning rate at a given optimizer step: linear warmup to base_lr over
// warmup_steps, then cosine decay to min_lr at the final step.
double scheduled_lr(Index step, Index total_steps, const TrainConfig& cfg);

struct StepRow {
  Index step;
  double lr, loss, loss_first, loss_second, tau;
};
struct EpochRow {
  Index epoch;
  Index step;  // optimizer steps completed when the row was written
  double top1, top5, first_only_top1, second_only_top1;
  double wall_seconds;  // in-memory only; never serialized to result files
};
struct MetricsLog {
  std::vector<StepRow> steps;
  std::vector<EpochRow> epochs;
};

// Fixed-header CSV emission. Wall-clock stays out of both files so reruns
// with one config and seed are byte-identical.
void write_step_csv(const std::filesystem::path& path, const MetricsLog& log);
void write_epoch_csv(const std::filesystem::path& path, const MetricsLog& log);

// Shortest round-trip decimal form of a double (the CSV/JSON number format).
std::string format_double(double v);

struct EvalMetrics {
  double top1 = 0, top5 = 0;
  double first_only_top1 = 0, second_only_top1 = 0;
  Index size = 0;
};

// Held-out retrieval with the config's λ weights, plus single-channel
// ablations (first-order-only and second-order-only similarity).
EvalMetrics evaluate(const TowerParams& p, const std::vector<SampleRecord>& split,
                     const DalipObjectiveConfig& cfg);

struct TrainResult {
  TowerParams params;
  MetricsLog log;
};

// Adaptive-moment training of all parameter groups (both towers, pooling
// head(s), log_tau). Bit-reproducible for a fixed dataset, config, and seed;
// a non-finite loss or intermediate aborts with step and lr diagnostics.
TrainResult train(const SyntheticDataset& ds, TowerParams tower, const TrainConfig& cfg);

// Convex-weight sensitivity sweep: trains one model per λ1 with λ2 = 1−λ1
// from the same initialization and reports held-out retrieval.
struct SweepRow {
  double lambda1, lambda2, top1, top5;
};
std::vector<SweepRow> lambda_sweep(const SyntheticDataset& ds, const TowerParams& init,
                                   const TrainConfig& cfg, std::span<const double> lambda1s);

// Checkpoint directory: tensor blobs plus a JSON manifest.
void save_model(const std::filesystem::path& dir, const TowerParams& p);
TowerParams load_model(const std::filesystem::path& dir);

}  // namespace dalip
