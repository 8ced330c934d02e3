#include "dalip/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "dalip/blob.hpp"
#include "dalip/rng.hpp"

namespace dalip {

namespace {

// Stream-id regions of the counter generator, kept disjoint so that every
// draw is a pure function of (seed, role, index).
constexpr std::uint64_t kStreamMeans = 1;
constexpr std::uint64_t kStreamMapImage = 3;
constexpr std::uint64_t kStreamMapText = 4;
constexpr std::uint64_t kStreamRotationBase = 0x200000000ull;
constexpr std::uint64_t kStreamSplitBase = 0x100000000ull;
constexpr std::uint64_t kStreamSampleBase = 8;

constexpr double kMeanSeparationScale = 2.0;
constexpr double kMinUnitSeparation = 0.9;

Matrix unit_row(CounterRng& rng, Index dim) {
  Matrix v = random_normal(rng, 1, dim);
  const double n = v.norm();
  return n > 0 ? Matrix(v / n) : unit_row(rng, dim);
}

// Orthogonal factor of a random matrix, with column signs fixed so the
// result is unique (diagonal of R nonnegative).
Matrix random_rotation(CounterRng& rng, Index dim) {
  Matrix g = random_normal(rng, dim, dim);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g.transpose());
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < dim; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

Matrix anisotropic_diagonal(Index dim) {
  Matrix d = Matrix::Zero(dim, dim);
  for (Index i = 0; i < dim; ++i) {
    const double t = dim > 1 ? static_cast<double>(i) / static_cast<double>(dim - 1) : 0.0;
    d(i, i) = 3.0 * std::pow(0.1, t);  // 3.0 down to 0.3
  }
  return d;
}

// Subsample `want` positions from 0..total-1, evenly spaced, order-preserving.
std::vector<size_t> evenly_spaced(size_t total, size_t want) {
  std::vector<size_t> picks;
  picks.reserve(want);
  size_t err = 0;
  for (size_t i = 0; i < total && picks.size() < want; ++i) {
    err += want;
    if (err >= total) {
      err -= total;
      picks.push_back(i);
    }
  }
  return picks;
}

nlohmann::json spec_to_json(const SyntheticDatasetSpec& s) {
  return nlohmann::json{{"num_classes", s.num_classes},
                        {"samples_per_class", s.samples_per_class},
                        {"tokens_per_sample", s.tokens_per_sample},
                        {"latent_dim", s.latent_dim},
                        {"raw_dim", s.raw_dim},
                        {"coding", coding_name(s.coding)},
                        {"noise_scale", s.noise_scale},
                        {"seed", s.seed}};
}

SyntheticDatasetSpec spec_from_json(const nlohmann::json& j) {
  SyntheticDatasetSpec s;
  s.num_classes = j.at("num_classes").get<Index>();
  s.samples_per_class = j.at("samples_per_class").get<Index>();
  s.tokens_per_sample = j.at("tokens_per_sample").get<Index>();
  s.latent_dim = j.at("latent_dim").get<Index>();
  s.raw_dim = j.at("raw_dim").get<Index>();
  s.coding = parse_coding(j.at("coding").get<std::string>());
  s.noise_scale = j.at("noise_scale").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace

Coding parse_coding(const std::string& name) {
  if (name == "mean") return Coding::MeanCoded;
  if (name == "cov") return Coding::CovarianceCoded;
  if (name == "mixed") return Coding::MixedCoded;
  throw ConfigError("coding: unknown kind '" + name + "' (expected mean|cov|mixed)");
}

const char* coding_name(Coding coding) {
  switch (coding) {
    case Coding::MeanCoded: return "mean";
    case Coding::CovarianceCoded: return "cov";
    case Coding::MixedCoded: return "mixed";
  }
  throw ContractError("coding: unhandled kind");
}

void SyntheticDatasetSpec::validate() const {
  if (num_classes < 1) throw ConfigError("dataset: need at least one class");
  if (samples_per_class < 2)
    throw ConfigError("dataset: need at least two samples per class for a split");
  if (tokens_per_sample < 1) throw ConfigError("dataset: need at least one token per sample");
  if (latent_dim < 1 || raw_dim < 1) throw ConfigError("dataset: dimensions must be positive");
  if (coding != Coding::MeanCoded && latent_dim < 2)
    throw ConfigError("dataset: covariance coding needs latent_dim >= 2");
  if (noise_scale < 0) throw ConfigError("dataset: noise_scale must be nonnegative");
  auto check_map = [&](const Matrix& m, const char* side) {
    if (m.size() != 0 && (m.rows() != raw_dim || m.cols() != latent_dim))
      throw ConfigError("dataset: " + std::string(side) + " map must be " +
                        shape_str(raw_dim, latent_dim) + ", got " + shape_str(m));
  };
  check_map(map_image, "image");
  check_map(map_text, "text");
}

std::vector<ClassModel> build_class_models(const SyntheticDatasetSpec& spec) {
  spec.validate();
  const Index c = spec.num_classes;
  const Index dim = spec.latent_dim;
  std::vector<ClassModel> models(static_cast<size_t>(c));

  // Class means: shared origin when identity is covariance-coded, otherwise
  // well-separated directions; the retry loop is deterministic.
  if (spec.coding == Coding::CovarianceCoded) {
    for (auto& m : models) m.mu = Matrix::Zero(1, dim);
  } else {
    CounterRng rng(spec.seed, kStreamMeans);
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 1000)
        throw ContractError("dataset: could not place separated class means");
      std::vector<Matrix> dirs;
      for (Index i = 0; i < c; ++i) dirs.push_back(unit_row(rng, dim));
      double min_dist = std::numeric_limits<double>::infinity();
      for (Index i = 0; i < c; ++i)
        for (Index j = i + 1; j < c; ++j)
          min_dist = std::min(min_dist, (dirs[static_cast<size_t>(i)] -
                                         dirs[static_cast<size_t>(j)]).norm());
      if (c == 1 || min_dist >= kMinUnitSeparation) {
        for (Index i = 0; i < c; ++i)
          models[static_cast<size_t>(i)].mu = kMeanSeparationScale * dirs[static_cast<size_t>(i)];
        break;
      }
    }
  }

  // Class covariances: one fixed anisotropic spectrum, rotated per class when
  // identity is covariance-coded.
  const Matrix d = anisotropic_diagonal(dim);
  const Matrix d_half = d.cwiseSqrt();
  for (Index i = 0; i < c; ++i) {
    ClassModel& m = models[static_cast<size_t>(i)];
    if (spec.coding == Coding::MeanCoded) {
      m.shape = d_half;
      m.sigma = d;
    } else {
      CounterRng rng(spec.seed, kStreamRotationBase + static_cast<std::uint64_t>(i));
      Matrix rot = random_rotation(rng, dim);
      m.shape = rot * d_half;
      m.sigma = rot * d * rot.transpose();
    }
  }
  return models;
}

SyntheticDataset generate(const SyntheticDatasetSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.spec = spec;

  const Index c = spec.num_classes;
  const Index spc = spec.samples_per_class;
  const Index m = spec.tokens_per_sample;

  if (ds.spec.map_image.size() == 0) {
    CounterRng rng(spec.seed, kStreamMapImage);
    ds.spec.map_image =
        random_normal(rng, spec.raw_dim, spec.latent_dim, 1.0 / std::sqrt(double(spec.latent_dim)));
  }
  if (ds.spec.map_text.size() == 0) {
    CounterRng rng(spec.seed, kStreamMapText);
    ds.spec.map_text =
        random_normal(rng, spec.raw_dim, spec.latent_dim, 1.0 / std::sqrt(double(spec.latent_dim)));
  }

  const auto models = build_class_models(spec);

  // Pairwise-distinct covariances are structural in covariance-coded modes;
  // assert rather than hope.
  double min_cov_sep = std::numeric_limits<double>::infinity();
  double min_mean_sep = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < c; ++i) {
    for (Index j = i + 1; j < c; ++j) {
      min_cov_sep = std::min(min_cov_sep, (models[static_cast<size_t>(i)].sigma -
                                           models[static_cast<size_t>(j)].sigma).norm());
      min_mean_sep = std::min(min_mean_sep, (models[static_cast<size_t>(i)].mu -
                                             models[static_cast<size_t>(j)].mu).norm());
    }
  }
  if (c == 1) min_cov_sep = min_mean_sep = 0.0;
  if (c > 1 && spec.coding != Coding::MeanCoded && min_cov_sep <= 0)
    throw ContractError("dataset: class covariances failed to separate");
  if (c > 1 && spec.coding != Coding::CovarianceCoded && min_mean_sep <= 0)
    throw ContractError("dataset: class means failed to separate");

  const Index n_train_per_class = std::max<Index>(1, std::min(spc - 1, (4 * spc) / 5));

  Matrix ones_m = Matrix::Ones(m, 1);
  for (Index cls = 0; cls < c; ++cls) {
    const ClassModel& model = models[static_cast<size_t>(cls)];

    // Deterministic per-class shuffle decides the 80/20 membership.
    std::vector<Index> order(static_cast<size_t>(spc));
    for (Index s = 0; s < spc; ++s) order[static_cast<size_t>(s)] = s;
    CounterRng split_rng(spec.seed, kStreamSplitBase + static_cast<std::uint64_t>(cls));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[split_rng.next_u64() % i]);
    std::vector<char> in_train(static_cast<size_t>(spc), 0);
    for (Index s = 0; s < n_train_per_class; ++s) in_train[static_cast<size_t>(order[static_cast<size_t>(s)])] = 1;

    for (Index s = 0; s < spc; ++s) {
      const std::uint64_t gidx = static_cast<std::uint64_t>(cls * spc + s);
      CounterRng latent_rng(spec.seed, kStreamSampleBase + gidx * 4);
      CounterRng img_rng(spec.seed, kStreamSampleBase + gidx * 4 + 1);
      CounterRng txt_rng(spec.seed, kStreamSampleBase + gidx * 4 + 2);

      // Latent tokens: center the raw draw per sample so the token mean is
      // exactly the class mean — token means then carry nothing beyond it.
      Matrix g = random_normal(latent_rng, m, spec.latent_dim);
      g -= ones_m * g.colwise().mean().matrix();
      Matrix latent = ones_m * model.mu + g * model.shape.transpose();

      SampleRecord rec;
      rec.class_id = cls;
      rec.image_tokens = latent * ds.spec.map_image.transpose() +
                         random_normal(img_rng, m, spec.raw_dim, spec.noise_scale);
      rec.text_tokens = latent * ds.spec.map_text.transpose() +
                        random_normal(txt_rng, m, spec.raw_dim, spec.noise_scale);
      (in_train[static_cast<size_t>(s)] ? ds.train : ds.test).push_back(std::move(rec));
    }
  }

  ds.calibration = calibrate_moments(ds.train, ds.test, c);
  ds.calibration.min_cov_separation = min_cov_sep;
  ds.calibration.min_mean_separation = min_mean_sep;
  return ds;
}

CalibrationRecord calibrate_moments(const std::vector<SampleRecord>& train,
                                    const std::vector<SampleRecord>& test, Index num_classes) {
  if (train.empty() || test.empty())
    throw ContractError("calibrate_moments: both splits must be nonempty");
  const Index raw = train.front().image_tokens.cols();

  // Per-class token mean and pooled token covariance from the training split.
  std::vector<Matrix> mean(static_cast<size_t>(num_classes), Matrix::Zero(1, raw));
  std::vector<Index> count(static_cast<size_t>(num_classes), 0);
  for (const auto& rec : train) {
    mean[static_cast<size_t>(rec.class_id)] += rec.image_tokens.colwise().sum();
    count[static_cast<size_t>(rec.class_id)] += rec.image_tokens.rows();
  }
  for (Index cls = 0; cls < num_classes; ++cls) {
    if (count[static_cast<size_t>(cls)] == 0)
      throw ContractError("calibrate_moments: class " + std::to_string(cls) +
                          " absent from training split");
    mean[static_cast<size_t>(cls)] /= static_cast<double>(count[static_cast<size_t>(cls)]);
  }

  std::vector<Matrix> cov(static_cast<size_t>(num_classes), Matrix::Zero(raw, raw));
  for (const auto& rec : train) {
    const Matrix centered = rec.image_tokens.rowwise() -
                            mean[static_cast<size_t>(rec.class_id)].row(0);
    cov[static_cast<size_t>(rec.class_id)] += centered.transpose() * centered;
  }
  std::vector<Eigen::LLT<Eigen::MatrixXd>> llt(static_cast<size_t>(num_classes));
  std::vector<double> logdet(static_cast<size_t>(num_classes), 0.0);
  for (Index cls = 0; cls < num_classes; ++cls) {
    Matrix& s = cov[static_cast<size_t>(cls)];
    s /= std::max<double>(1.0, static_cast<double>(count[static_cast<size_t>(cls)] - 1));
    s += 1e-9 * Matrix::Identity(raw, raw);
    llt[static_cast<size_t>(cls)].compute(s);
    if (llt[static_cast<size_t>(cls)].info() != Eigen::Success)
      throw NumericError("calibrate_moments: covariance factorization failed for class " +
                         std::to_string(cls));
    const auto& l = llt[static_cast<size_t>(cls)].matrixL();
    for (Index i = 0; i < raw; ++i) logdet[static_cast<size_t>(cls)] += 2.0 * std::log(l(i, i));
  }

  Index mean_hits = 0, qda_hits = 0;
  for (const auto& rec : test) {
    const Matrix sample_mean = rec.image_tokens.colwise().mean();
    Index best_mean = 0, best_qda = 0;
    double best_mean_dist = std::numeric_limits<double>::infinity();
    double best_qda_score = -std::numeric_limits<double>::infinity();
    for (Index cls = 0; cls < num_classes; ++cls) {
      const double dist = (sample_mean - mean[static_cast<size_t>(cls)]).norm();
      if (dist < best_mean_dist) {
        best_mean_dist = dist;
        best_mean = cls;
      }
      const Matrix centered = rec.image_tokens.rowwise() - mean[static_cast<size_t>(cls)].row(0);
      double quad = 0.0;
      for (Index t = 0; t < centered.rows(); ++t) {
        Eigen::VectorXd v = centered.row(t).transpose();
        quad += v.dot(llt[static_cast<size_t>(cls)].solve(v));
      }
      const double score =
          -0.5 * quad - 0.5 * static_cast<double>(centered.rows()) * logdet[static_cast<size_t>(cls)];
      if (score > best_qda_score) {
        best_qda_score = score;
        best_qda = cls;
      }
    }
    if (best_mean == rec.class_id) ++mean_hits;
    if (best_qda == rec.class_id) ++qda_hits;
  }

  CalibrationRecord rec;
  rec.mean_classifier_acc = static_cast<double>(mean_hits) / static_cast<double>(test.size());
  rec.qda_acc = static_cast<double>(qda_hits) / static_cast<double>(test.size());
  return rec;
}

SyntheticDataset mix_domains(const SyntheticDataset& a, const SyntheticDataset& b, double r) {
  if (!(r >= 0.0 && r <= 1.0))
    throw ParamError("mix_domains: ratio must lie in [0, 1], got " + std::to_string(r));
  const size_t n = std::min(a.train.size(), b.train.size());
  const size_t take_a = static_cast<size_t>(std::floor(r * static_cast<double>(n)));
  const size_t take_b = n - take_a;

  const auto picks_a = evenly_spaced(a.train.size(), take_a);
  const auto picks_b = evenly_spaced(b.train.size(), take_b);

  SyntheticDataset merged;
  merged.spec = a.spec;
  merged.train.reserve(n);
  size_t ia = 0, ib = 0, err = 0;
  for (size_t slot = 0; slot < n; ++slot) {
    err += take_a;
    const bool from_a = err >= n && ia < picks_a.size();
    if (err >= n) err -= n;
    if (from_a || ib >= picks_b.size()) {
      SampleRecord rec = a.train[picks_a[ia++]];
      rec.domain = 0;
      merged.train.push_back(std::move(rec));
    } else {
      SampleRecord rec = b.train[picks_b[ib++]];
      rec.domain = 1;
      merged.train.push_back(std::move(rec));
    }
  }

  merged.test.reserve(a.test.size() + b.test.size());
  for (SampleRecord rec : a.test) {
    rec.domain = 0;
    merged.test.push_back(std::move(rec));
  }
  for (SampleRecord rec : b.test) {
    rec.domain = 1;
    merged.test.push_back(std::move(rec));
  }
  return merged;
}

namespace {

Matrix stack_tokens(const std::vector<SampleRecord>& recs, bool image) {
  if (recs.empty()) return Matrix(0, 0);
  const Index m = recs.front().image_tokens.rows();
  const Index raw = recs.front().image_tokens.cols();
  Matrix out(static_cast<Index>(recs.size()) * m, raw);
  Index at = 0;
  for (const auto& rec : recs) {
    out.middleRows(at, m) = image ? rec.image_tokens : rec.text_tokens;
    at += m;
  }
  return out;
}

std::vector<SampleRecord> unstack_tokens(const Matrix& img, const Matrix& txt, Index m,
                                         const std::vector<Index>& class_ids,
                                         const std::vector<int>& domains) {
  std::vector<SampleRecord> recs;
  const size_t n = class_ids.size();
  if (img.rows() != static_cast<Index>(n) * m || txt.rows() != img.rows())
    throw ParseError("dataset: token blob row count does not match the manifest");
  recs.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    SampleRecord rec;
    rec.class_id = class_ids[i];
    rec.domain = domains[i];
    rec.image_tokens = img.middleRows(static_cast<Index>(i) * m, m);
    rec.text_tokens = txt.middleRows(static_cast<Index>(i) * m, m);
    recs.push_back(std::move(rec));
  }
  return recs;
}

nlohmann::json split_meta(const std::vector<SampleRecord>& recs) {
  std::vector<Index> ids;
  std::vector<int> domains;
  for (const auto& rec : recs) {
    ids.push_back(rec.class_id);
    domains.push_back(rec.domain);
  }
  return nlohmann::json{{"class_ids", ids}, {"domains", domains}};
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["spec"] = spec_to_json(ds.spec);
  manifest["calibration"] = {{"mean_classifier_acc", ds.calibration.mean_classifier_acc},
                             {"qda_acc", ds.calibration.qda_acc},
                             {"min_cov_separation", ds.calibration.min_cov_separation},
                             {"min_mean_separation", ds.calibration.min_mean_separation}};
  manifest["train"] = split_meta(ds.train);
  manifest["test"] = split_meta(ds.test);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ParseError("save_dataset: cannot open " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";

  write_blob(dir / "train_image.bin", stack_tokens(ds.train, true));
  write_blob(dir / "train_text.bin", stack_tokens(ds.train, false));
  write_blob(dir / "test_image.bin", stack_tokens(ds.test, true));
  write_blob(dir / "test_text.bin", stack_tokens(ds.test, false));
  write_blob(dir / "map_image.bin", ds.spec.map_image);
  write_blob(dir / "map_text.bin", ds.spec.map_text);
}

SyntheticDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ParseError("load_dataset: cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_dataset: bad manifest: " + std::string(e.what()));
  }

  SyntheticDataset ds;
  try {
    ds.spec = spec_from_json(manifest.at("spec"));
    const auto& cal = manifest.at("calibration");
    ds.calibration.mean_classifier_acc = cal.at("mean_classifier_acc").get<double>();
    ds.calibration.qda_acc = cal.at("qda_acc").get<double>();
    ds.calibration.min_cov_separation = cal.at("min_cov_separation").get<double>();
    ds.calibration.min_mean_separation = cal.at("min_mean_separation").get<double>();

    for (const char* split : {"train", "test"}) {
      const auto ids = manifest.at(split).at("class_ids").get<std::vector<Index>>();
      const auto domains = manifest.at(split).at("domains").get<std::vector<int>>();
      if (ids.size() != domains.size())
        throw ParseError("load_dataset: class/domain lists differ in length");
      Matrix img = read_blob(dir / (std::string(split) + "_image.bin"));
      Matrix txt = read_blob(dir / (std::string(split) + "_text.bin"));
      auto recs = unstack_tokens(img, txt, ds.spec.tokens_per_sample, ids, domains);
      (std::string(split) == "train" ? ds.train : ds.test) = std::move(recs);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_dataset: manifest missing fields: " + std::string(e.what()));
  }
  ds.spec.map_image = read_blob(dir / "map_image.bin");
  ds.spec.map_text = read_blob(dir / "map_text.bin");
  return ds;
}

}  // namespace dalip
