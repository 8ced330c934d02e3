#include "dalip/twintower.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "dalip/blob.hpp"
#include "dalip/rng.hpp"

namespace dalip {

namespace {

constexpr std::uint64_t kStreamEncoderBase = 0x400000000ull;
constexpr std::uint64_t kStreamShuffleBase = 0x500000000ull;

// Mirrors the forward semantics of the graph-side row normalization: rows
// below the floor stay where they are (exactly zero stays exactly zero).
Matrix unit_rows(const Matrix& x) {
  Matrix y = x;
  for (Index r = 0; r < y.rows(); ++r) {
    const double n = std::max(y.row(r).norm(), 1e-12);
    y.row(r) /= n;
  }
  return y;
}

Matrix fan_in_uniform(CounterRng& rng, Index rows, Index cols) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  return random_uniform(rng, rows, cols, -bound, bound);
}

}  // namespace

LossVariant parse_loss_variant(const std::string& name) {
  if (name == "dalip") return LossVariant::Combined;
  if (name == "infonce") return LossVariant::FirstOrderOnly;
  throw ConfigError("loss variant: unknown kind '" + name + "' (expected dalip|infonce)");
}

const char* loss_variant_name(LossVariant v) {
  return v == LossVariant::Combined ? "dalip" : "infonce";
}

void TowerParams::validate() const {
  auto check_encoder = [&](const EncoderWeights& w, const char* side) {
    if (w.proj_in.size() == 0 || w.proj_out.size() == 0 || w.first_proj.size() == 0)
      throw ConfigError("tower: " + std::string(side) + " encoder has empty weights");
    if (w.proj_in.cols() != w.proj_out.rows())
      throw ShapeError("tower: " + std::string(side) + " projections disagree, " +
                       shape_str(w.proj_in) + " then " + shape_str(w.proj_out));
    if (w.first_proj.rows() != w.proj_out.cols() || w.first_proj.cols() != w.proj_out.cols())
      throw ShapeError("tower: " + std::string(side) + " first-order map must be " +
                       shape_str(w.proj_out.cols(), w.proj_out.cols()) + ", got " +
                       shape_str(w.first_proj));
  };
  check_encoder(image, "image");
  check_encoder(text, "text");
  if (text.proj_in.rows() != image.proj_in.rows() || text.proj_out.cols() != image.proj_out.cols())
    throw ShapeError("tower: modalities disagree on raw or token width");
  // The mean head carries no parameters, so there is nothing to validate
  // beyond its channel count.
  if (pooling != PoolingKind::Mean) head.validate();
  if (head.d != token_dim())
    throw ShapeError("tower: pooling head expects " + std::to_string(head.d) +
                     " channels, encoder emits " + std::to_string(token_dim()));
  if (!shared_head) {
    if (pooling != PoolingKind::Mean) head_text.validate();
    if (head_text.d != token_dim())
      throw ShapeError("tower: text pooling head expects " + std::to_string(head_text.d) +
                       " channels, encoder emits " + std::to_string(token_dim()));
    if (head_output_width(pooling, head_text) != head_output_width(pooling, head))
      throw ShapeError("tower: per-modality heads disagree on output width");
  }
}

TowerParams tower_init(PoolingKind kind, Index raw_dim, Index mid_dim, Index token_dim,
                       int heads, Index out_dim, Index hidden, bool shared_head,
                       double log_tau_init, std::uint64_t seed) {
  if (raw_dim < 1 || mid_dim < 1 || token_dim < 1)
    throw ConfigError("tower: encoder dimensions must be positive");
  TowerParams p;
  p.pooling = kind;
  p.shared_head = shared_head;
  p.log_tau = log_tau_init;

  std::uint64_t stream = kStreamEncoderBase;
  for (EncoderWeights* w : {&p.image, &p.text}) {
    CounterRng r_in(seed, stream++), r_out(seed, stream++), r_first(seed, stream++);
    w->proj_in = fan_in_uniform(r_in, raw_dim, mid_dim);
    w->proj_out = fan_in_uniform(r_out, mid_dim, token_dim);
    w->first_proj = fan_in_uniform(r_first, token_dim, token_dim);
  }
  p.head = head_init(kind, heads, token_dim, out_dim, hidden, seed + 1);
  p.head_text = shared_head ? MbdcParams{} : head_init(kind, heads, token_dim, out_dim, hidden, seed + 2);
  p.validate();
  return p;
}

ModelVals model_register(Tape& t, const TowerParams& p) {
  ModelVals v;
  for (auto [vals, weights] : {std::pair{&v.image, &p.image}, std::pair{&v.text, &p.text}}) {
    vals->proj_in = t.input(weights->proj_in);
    vals->proj_out = t.input(weights->proj_out);
    vals->first_proj = t.input(weights->first_proj);
  }
  if (p.pooling != PoolingKind::Mean) {
    v.head = mbdc_register(t, p.head);
    if (!p.shared_head) v.head_text = mbdc_register(t, p.head_text);
  }
  Matrix lt(1, 1);
  lt(0, 0) = p.log_tau;
  v.log_tau = t.input(lt);
  return v;
}

namespace {

Val encode_tokens(Tape& t, Val tokens, const EncoderVals& w) {
  return matmul(relu(matmul(tokens, w.proj_in)), w.proj_out);
}

}  // namespace

BatchEmbeddings model_forward(Tape& t, std::span<const SampleRecord* const> batch,
                              const ModelVals& v, const TowerParams& p) {
  if (batch.empty()) throw ShapeError("model_forward: empty batch");
  std::vector<Val> img_first, txt_first, img_second, txt_second;
  img_first.reserve(batch.size());
  txt_first.reserve(batch.size());
  img_second.reserve(batch.size());
  txt_second.reserve(batch.size());

  const MbdcVals& text_head_vals = p.shared_head ? v.head : v.head_text;
  const MbdcParams& text_head = p.shared_head ? p.head : p.head_text;
  for (const SampleRecord* rec : batch) {
    Val img = encode_tokens(t, t.input(rec->image_tokens), v.image);
    Val txt = encode_tokens(t, t.input(rec->text_tokens), v.text);
    img_first.push_back(l2_normalize(matmul(mean_rows(img), v.image.first_proj)));
    txt_first.push_back(l2_normalize(matmul(mean_rows(txt), v.text.first_proj)));
    img_second.push_back(pool_forward(img, p.pooling, v.head, p.head));
    txt_second.push_back(pool_forward(txt, p.pooling, text_head_vals, text_head));
  }
  return BatchEmbeddings{concat_rows(img_first), concat_rows(txt_first),
                         concat_rows(img_second), concat_rows(txt_second)};
}

void TrainConfig::validate() const {
  if (batch_size < 2)
    throw ConfigError("train: batch_size must be at least 2 so batches carry negatives");
  if (epochs < 1) throw ConfigError("train: epochs must be positive");
  if (!(base_lr > 0)) throw ConfigError("train: base_lr must be positive");
  if (!(min_lr >= 0) || min_lr > base_lr)
    throw ConfigError("train: min_lr must lie in [0, base_lr]");
  if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be nonnegative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw ConfigError("train: moment decay rates must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("train: optimizer eps must be positive");
  objective.validate();
}

double scheduled_lr(Index step, Index total_steps, const TrainConfig& cfg) {
  if (step < cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  const Index t = step - cfg.warmup_steps;
  const Index span = std::max<Index>(1, total_steps - cfg.warmup_steps);
  if (t >= span) return cfg.min_lr;
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) *
                          (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) /
                                          static_cast<double>(span)));
}

namespace {

// Every trainable leaf, in registration order, grouped for diagnostics.
struct ParamRef {
  Matrix* value;
  const char* group;
};

std::vector<ParamRef> trainable_params(TowerParams& p, Matrix& log_tau) {
  std::vector<ParamRef> refs;
  for (auto [weights, name] : {std::pair{&p.image, "tower"}, std::pair{&p.text, "tower"}}) {
    refs.push_back({&weights->proj_in, name});
    refs.push_back({&weights->proj_out, name});
    refs.push_back({&weights->first_proj, name});
  }
  for (MbdcParams* head : {&p.head, p.shared_head ? nullptr : &p.head_text}) {
    if (!head) continue;
    if (head->w1.size()) {
      refs.push_back({&head->w1, "head"});
      refs.push_back({&head->w2, "head"});
      refs.push_back({&head->ln_gain, "head"});
      refs.push_back({&head->ln_bias, "head"});
    }
  }
  refs.push_back({&log_tau, "log_tau"});
  return refs;
}

std::vector<Val> trainable_handles(const ModelVals& v, const TowerParams& p) {
  std::vector<Val> handles;
  for (const EncoderVals* w : {&v.image, &v.text}) {
    handles.push_back(w->proj_in);
    handles.push_back(w->proj_out);
    handles.push_back(w->first_proj);
  }
  if (p.head.w1.size()) {
    handles.push_back(v.head.w1);
    handles.push_back(v.head.w2);
    handles.push_back(v.head.ln_gain);
    handles.push_back(v.head.ln_bias);
  }
  if (!p.shared_head && p.head_text.w1.size()) {
    handles.push_back(v.head_text.w1);
    handles.push_back(v.head_text.w2);
    handles.push_back(v.head_text.ln_gain);
    handles.push_back(v.head_text.ln_bias);
  }
  handles.push_back(v.log_tau);
  return handles;
}

struct LossParts {
  Val total;
  bool has_first = false, has_second = false;
  Val first, second;  // unweighted channel losses, when built
};

// Builds the configured objective from batch embeddings, keeping the
// per-channel values addressable for logging. Zero-weight channels are never
// built, so their parameters receive exactly zero gradient.
LossParts build_loss(Tape& t, const BatchEmbeddings& be, Val log_tau, const TrainConfig& cfg) {
  LossParts parts;
  const DalipObjectiveConfig& obj = cfg.objective;
  if (cfg.variant == LossVariant::FirstOrderOnly) {
    parts.first = infonce(be.image_first, be.text_first, log_tau, obj.reduction);
    parts.has_first = true;
    parts.total = parts.first;
    return parts;
  }
  if (obj.lambda1 > 0) {
    parts.first = infonce(be.image_first, be.text_first, log_tau, obj.reduction);
    parts.has_first = true;
  }
  if (obj.lambda2 > 0) {
    Val i2 = obj.normalize_second_order ? l2_normalize(be.image_second) : be.image_second;
    Val t2 = obj.normalize_second_order ? l2_normalize(be.text_second) : be.text_second;
    parts.second = infonce(i2, t2, log_tau, obj.reduction);
    parts.has_second = true;
  }
  if (parts.has_first && parts.has_second)
    parts.total = add(scalar_scale(parts.first, obj.lambda1),
                      scalar_scale(parts.second, obj.lambda2));
  else if (parts.has_first)
    parts.total = scalar_scale(parts.first, obj.lambda1);
  else if (parts.has_second)
    parts.total = scalar_scale(parts.second, obj.lambda2);
  else
    parts.total = t.input(Matrix::Zero(1, 1));
  return parts;
}

double scalar_of(const Tape& t, Val v) { return t.value(v)(0, 0); }

}  // namespace

TrainResult train(const SyntheticDataset& ds, TowerParams tower, const TrainConfig& cfg) {
  cfg.validate();
  tower.validate();
  if (ds.train.empty()) throw ShapeError("train: empty training split");

  Matrix log_tau(1, 1);
  log_tau(0, 0) = tower.log_tau;
  auto params = trainable_params(tower, log_tau);

  std::vector<Matrix> adam_m, adam_v;
  for (const auto& ref : params) {
    adam_m.push_back(Matrix::Zero(ref.value->rows(), ref.value->cols()));
    adam_v.push_back(Matrix::Zero(ref.value->rows(), ref.value->cols()));
  }

  // Step count is fixed up front so the schedule is a pure function of the
  // config: full batches plus any trailing batch that still carries negatives.
  const Index n = static_cast<Index>(ds.train.size());
  const Index full = n / cfg.batch_size;
  const Index rest = n % cfg.batch_size;
  const Index batches_per_epoch = full + (rest >= 2 ? 1 : 0);
  if (batches_per_epoch == 0)
    throw ConfigError("train: training split smaller than one two-sample batch");
  const Index total_steps = batches_per_epoch * cfg.epochs;

  MetricsLog log;
  Index step = 0;
  std::vector<size_t> order(ds.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  const auto t_start = std::chrono::steady_clock::now();
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    CounterRng shuffle_rng(cfg.seed, kStreamShuffleBase + static_cast<std::uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_u64() % i]);

    for (Index b = 0; b < batches_per_epoch; ++b) {
      const size_t begin = static_cast<size_t>(b * cfg.batch_size);
      const size_t count = std::min<size_t>(static_cast<size_t>(cfg.batch_size),
                                            order.size() - begin);
      std::vector<const SampleRecord*> batch;
      batch.reserve(count);
      for (size_t i = 0; i < count; ++i) batch.push_back(&ds.train[order[begin + i]]);

      const double lr = scheduled_lr(step, total_steps, cfg);
      double last_grad_norm = 0.0;
      try {
        tower.log_tau = log_tau(0, 0);  // the optimizer owns the live copy
        Tape t;
        ModelVals v = model_register(t, tower);
        BatchEmbeddings be = model_forward(t, batch, v, tower);
        LossParts parts = build_loss(t, be, v.log_tau, cfg);
        const double loss = scalar_of(t, parts.total);
        if (!std::isfinite(loss))
          throw NumericError("loss is not finite");

        Gradients grads = t.backward(parts.total);
        const auto handles = trainable_handles(v, tower);
        if (handles.size() != params.size())
          throw ContractError("train: parameter registry out of sync with the graph");

        log.steps.push_back({step, lr, loss,
                             parts.has_first ? scalar_of(t, parts.first) : 0.0,
                             parts.has_second ? scalar_of(t, parts.second) : 0.0,
                             std::exp(-log_tau(0, 0))});

        const double t1 = static_cast<double>(step + 1);
        for (size_t i = 0; i < params.size(); ++i) {
          const Matrix g = grads.wrt(handles[i]);
          last_grad_norm = std::max(last_grad_norm, g.norm());
          adam_m[i] = cfg.beta1 * adam_m[i] + (1.0 - cfg.beta1) * g;
          adam_v[i] = cfg.beta2 * adam_v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
          const double m_corr = 1.0 - std::pow(cfg.beta1, t1);
          const double v_corr = 1.0 - std::pow(cfg.beta2, t1);
          *params[i].value -=
              (lr / m_corr) * (adam_m[i].array() /
                               ((adam_v[i] / v_corr).array().sqrt() + cfg.adam_eps))
                                  .matrix();
        }
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged at step " + std::to_string(step) +
                                  " (lr " + format_double(lr) + ", last grad norm " +
                                  format_double(last_grad_norm) + "): " + e.what(),
                              static_cast<long>(step), lr);
      }
      ++step;
    }

    tower.log_tau = log_tau(0, 0);
    EvalMetrics em;
    if (!ds.test.empty()) em = evaluate(tower, ds.test, cfg.objective);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    log.epochs.push_back({epoch, step, em.top1, em.top5, em.first_only_top1,
                          em.second_only_top1, wall});
  }

  tower.log_tau = log_tau(0, 0);
  return TrainResult{std::move(tower), std::move(log)};
}

EvalMetrics evaluate(const TowerParams& p, const std::vector<SampleRecord>& split,
                     const DalipObjectiveConfig& cfg) {
  cfg.validate();
  p.validate();
  if (split.empty()) throw ShapeError("evaluate: empty split");

  const Index n = static_cast<Index>(split.size());
  const Index d = p.token_dim();
  const Index out = head_output_width(p.pooling, p.head);
  EmbeddingBatch batch;
  batch.image_first.resize(n, d);
  batch.text_first.resize(n, d);
  batch.image_second.resize(n, out);
  batch.text_second.resize(n, out);

  const MbdcParams& text_head = p.shared_head ? p.head : p.head_text;
  for (Index i = 0; i < n; ++i) {
    const SampleRecord& rec = split[static_cast<size_t>(i)];
    auto encode = [](const Matrix& tokens, const EncoderWeights& w) -> Matrix {
      return (tokens * w.proj_in).cwiseMax(0.0) * w.proj_out;
    };
    const Matrix img = encode(rec.image_tokens, p.image);
    const Matrix txt = encode(rec.text_tokens, p.text);
    batch.image_first.row(i) = unit_rows(img.colwise().mean() * p.image.first_proj).row(0);
    batch.text_first.row(i) = unit_rows(txt.colwise().mean() * p.text.first_proj).row(0);
    batch.image_second.row(i) = pool_forward(img, p.pooling, p.head).row(0);
    batch.text_second.row(i) = pool_forward(txt, p.pooling, text_head).row(0);
  }

  EvalMetrics m;
  m.size = n;
  m.top1 = retrieval_topk(batch, cfg, 1);
  m.top5 = retrieval_topk(batch, cfg, std::min<Index>(5, n));

  DalipObjectiveConfig first_only = cfg;
  first_only.lambda1 = 1.0;
  first_only.lambda2 = 0.0;
  m.first_only_top1 = retrieval_topk(batch, first_only, 1);

  DalipObjectiveConfig second_only = cfg;
  second_only.lambda1 = 0.0;
  second_only.lambda2 = 1.0;
  m.second_only_top1 = retrieval_topk(batch, second_only, 1);
  return m;
}

std::vector<SweepRow> lambda_sweep(const SyntheticDataset& ds, const TowerParams& init,
                                   const TrainConfig& cfg, std::span<const double> lambda1s) {
  std::vector<SweepRow> rows;
  rows.reserve(lambda1s.size());
  for (double l1 : lambda1s) {
    TrainConfig c = cfg;
    c.objective.lambda1 = l1;
    c.objective.lambda2 = 1.0 - l1;
    TrainResult result = train(ds, init, c);
    const EvalMetrics m = evaluate(result.params, ds.test, c.objective);
    rows.push_back({l1, 1.0 - l1, m.top1, m.top5});
  }
  return rows;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw NumericError("format_double: conversion failed");
  return std::string(buf, ptr);
}

void write_step_csv(const std::filesystem::path& path, const MetricsLog& log) {
  std::ofstream out(path);
  if (!out) throw ParseError("write_step_csv: cannot open " + path.string());
  out << "step,lr,loss,loss_first,loss_second,tau\n";
  for (const auto& row : log.steps)
    out << row.step << ',' << format_double(row.lr) << ',' << format_double(row.loss) << ','
        << format_double(row.loss_first) << ',' << format_double(row.loss_second) << ','
        << format_double(row.tau) << '\n';
}

void write_epoch_csv(const std::filesystem::path& path, const MetricsLog& log) {
  std::ofstream out(path);
  if (!out) throw ParseError("write_epoch_csv: cannot open " + path.string());
  out << "epoch,step,top1,top5,first_only_top1,second_only_top1\n";
  for (const auto& row : log.epochs)
    out << row.epoch << ',' << row.step << ',' << format_double(row.top1) << ','
        << format_double(row.top5) << ',' << format_double(row.first_only_top1) << ','
        << format_double(row.second_only_top1) << '\n';
}

void save_model(const std::filesystem::path& dir, const TowerParams& p) {
  p.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"pooling", pooling_name(p.pooling)},
                          {"shared_head", p.shared_head},
                          {"log_tau", p.log_tau}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ParseError("save_model: cannot open " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";

  for (auto [weights, side] : {std::pair{&p.image, "image"}, std::pair{&p.text, "text"}}) {
    write_blob(dir / (std::string(side) + "_proj_in.bin"), weights->proj_in);
    write_blob(dir / (std::string(side) + "_proj_out.bin"), weights->proj_out);
    write_blob(dir / (std::string(side) + "_first_proj.bin"), weights->first_proj);
  }
  if (p.pooling != PoolingKind::Mean) {
    save_mbdc(dir / "head", p.head);
    if (!p.shared_head) save_mbdc(dir / "head_text", p.head_text);
  }
}

TowerParams load_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ParseError("load_model: cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_model: bad manifest: " + std::string(e.what()));
  }

  TowerParams p;
  try {
    p.pooling = parse_pooling(manifest.at("pooling").get<std::string>());
    p.shared_head = manifest.at("shared_head").get<bool>();
    p.log_tau = manifest.at("log_tau").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_model: manifest missing fields: " + std::string(e.what()));
  }
  for (auto [weights, side] : {std::pair{&p.image, "image"}, std::pair{&p.text, "text"}}) {
    weights->proj_in = read_blob(dir / (std::string(side) + "_proj_in.bin"));
    weights->proj_out = read_blob(dir / (std::string(side) + "_proj_out.bin"));
    weights->first_proj = read_blob(dir / (std::string(side) + "_first_proj.bin"));
  }
  if (p.pooling == PoolingKind::Mean) {
    const Index d = p.image.proj_out.cols();
    p.head = head_init(PoolingKind::Mean, 1, d, d, 0, 0);
  } else {
    p.head = load_mbdc(dir / "head");
    if (!p.shared_head) p.head_text = load_mbdc(dir / "head_text");
  }
  p.validate();
  return p;
}

}  // namespace dalip
