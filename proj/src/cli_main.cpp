// Command-line surface: dataset generation, training, evaluation, gradient
// checking, pooling inspection, mixing-law fitting/solving, and report
// emission. One JSON config document (sections: data, model, objective,
// train, mixlaw, output) feeds every subcommand; each config field is also
// exposed as a flag generated from the same schema, so the two can never
// drift. Precedence: flag > DALIP_SEED (seed only) > config file > default.
//
// Exit codes: 0 success, 1 validation/usage error, 2 numeric failure.
// Diagnostics go to standard error; machine-readable results go to files
// under --out; short human summaries go to standard output.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dalip/bdc.hpp"
#include "dalip/blob.hpp"
#include "dalip/gradcheck.hpp"
#include "dalip/mbdc.hpp"
#include "dalip/mixlaw.hpp"
#include "dalip/objective.hpp"
#include "dalip/report.hpp"
#include "dalip/rng.hpp"
#include "dalip/synthdata.hpp"
#include "dalip/twintower.hpp"

namespace dalip {
namespace {

constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Config schema: one row per field. Flags, defaults, help text, the JSON
// document layout, and the `schema` listing are all generated from this
// table.

enum class FieldType { U64, I64, F64, Bool, Str };

struct SchemaEntry {
  const char* section;  // "" for top-level keys
  const char* key;
  FieldType type;
  nlohmann::json def;
  const char* help;
  const char* flag_override = nullptr;  // canonical flag name when set

  std::string path() const {
    return section[0] ? std::string(section) + "." + key : std::string(key);
  }
  std::string flag() const {
    if (flag_override) return flag_override;
    std::string f = "--" + path();
    for (char& c : f)
      if (c == '.' || c == '_') c = '-';
    return f;
  }
};

const std::vector<SchemaEntry>& schema() {
  static const std::vector<SchemaEntry> s = {
      {"", "seed", FieldType::U64, 0, "master seed for data and training", "--seed"},
      {"data", "num_classes", FieldType::I64, 10, "number of classes"},
      {"data", "samples_per_class", FieldType::I64, 100, "paired samples per class"},
      {"data", "tokens_per_sample", FieldType::I64, 8, "tokens per sample"},
      {"data", "latent_dim", FieldType::I64, 6, "latent dimension behind both modalities"},
      {"data", "raw_dim", FieldType::I64, 12, "raw token dimension"},
      {"data", "coding", FieldType::Str, "cov", "class identity channel: mean|cov|mixed"},
      {"data", "noise_scale", FieldType::F64, 0.05, "observation noise scale"},
      {"model", "pooling", FieldType::Str, "mbdc", "second-order head: mean|mbdc|bdc|cov"},
      {"model", "mid_dim", FieldType::I64, 16, "encoder hidden width"},
      {"model", "token_dim", FieldType::I64, 16, "encoded token channels"},
      {"model", "heads", FieldType::I64, 2, "pooling head count"},
      {"model", "out_dim", FieldType::I64, 0, "pooled embedding width (0 = token_dim)"},
      {"model", "hidden", FieldType::I64, 0, "pooling mix width (0 = triangle length)"},
      {"model", "shared_head", FieldType::Bool, true, "share one pooling head across modalities"},
      {"objective", "lambda1", FieldType::F64, 0.4, "first-order loss weight"},
      {"objective", "lambda2", FieldType::F64, 0.6, "second-order loss weight"},
      {"objective", "log_tau_init", FieldType::F64, 2.6592600369327783,
       "initial log inverse temperature"},
      {"objective", "normalize_second_order", FieldType::Bool, true,
       "l2-normalize second-order embeddings in the loss"},
      {"objective", "reduction", FieldType::Str, "mean", "loss reduction: mean|sum"},
      {"train", "batch_size", FieldType::I64, 64, "contrastive batch size"},
      {"train", "epochs", FieldType::I64, 30, "training epochs"},
      {"train", "base_lr", FieldType::F64, 3e-3, "peak learning rate"},
      {"train", "min_lr", FieldType::F64, 1e-5, "final learning rate"},
      {"train", "warmup_steps", FieldType::I64, 25, "linear warmup steps"},
      {"train", "beta1", FieldType::F64, 0.9, "first moment decay"},
      {"train", "beta2", FieldType::F64, 0.999, "second moment decay"},
      {"train", "adam_eps", FieldType::F64, 1e-8, "optimizer epsilon"},
      {"train", "variant", FieldType::Str, "dalip", "loss variant: dalip|infonce"},
      {"mixlaw", "gamma_lo", FieldType::F64, -20.0, "lower end of the gamma search"},
      {"mixlaw", "gamma_hi", FieldType::F64, 20.0, "upper end of the gamma search"},
      {"mixlaw", "grid_points", FieldType::I64, 4000, "gamma grid resolution"},
      {"mixlaw", "w1", FieldType::F64, 1.0, "weight of domain 1 in the mix objective"},
      {"mixlaw", "w2", FieldType::F64, 1.0, "weight of domain 2 in the mix objective"},
      {"output", "dir", FieldType::Str, "out", "directory for result files", "--out"},
  };
  return s;
}

// Sections each subcommand binds (plus subcommand-specific flags added by
// hand below).
const std::map<std::string, std::vector<std::string>>& subcommand_sections() {
  static const std::map<std::string, std::vector<std::string>> m = {
      {"gen-data", {"", "data", "output"}},
      {"train", {"", "data", "model", "objective", "train", "output"}},
      {"eval", {"", "data", "model", "objective", "output"}},
      {"gradcheck", {"", "objective", "output"}},
      {"bdc", {"output"}},
      {"mbdc", {"", "model", "output"}},
      {"fit-mixlaw", {"mixlaw", "output"}},
      {"solve-mix", {"mixlaw", "output"}},
      {"report", {"mixlaw", "output"}},
  };
  return m;
}

nlohmann::json default_config() {
  nlohmann::json doc;
  for (const auto& entry : schema()) {
    if (entry.section[0])
      doc[entry.section][entry.key] = entry.def;
    else
      doc[entry.key] = entry.def;
  }
  return doc;
}

const SchemaEntry* find_entry(const std::string& path) {
  for (const auto& entry : schema())
    if (entry.path() == path) return &entry;
  return nullptr;
}

void check_type(const SchemaEntry& entry, const nlohmann::json& v) {
  const std::string path = entry.path();
  switch (entry.type) {
    case FieldType::U64:
      if (!v.is_number_unsigned())
        throw ConfigError("config " + path + ": expected a nonnegative integer");
      return;
    case FieldType::I64:
      if (!v.is_number_integer())
        throw ConfigError("config " + path + ": expected an integer");
      return;
    case FieldType::F64:
      if (!v.is_number())
        throw ConfigError("config " + path + ": expected a number");
      return;
    case FieldType::Bool:
      if (!v.is_boolean())
        throw ConfigError("config " + path + ": expected true or false");
      return;
    case FieldType::Str:
      if (!v.is_string())
        throw ConfigError("config " + path + ": expected a string");
      return;
  }
}

// Merge a user document onto the defaults, rejecting unknown keys and type
// mismatches by path.
nlohmann::json resolve_config(const nlohmann::json& user) {
  nlohmann::json doc = default_config();
  if (!user.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& [key, value] : user.items()) {
    if (value.is_object()) {
      if (!doc.contains(key) || !doc[key].is_object())
        throw ConfigError("config: unknown section '" + key + "'");
      for (const auto& [sub, subval] : value.items()) {
        const std::string path = key + "." + sub;
        const SchemaEntry* entry = find_entry(path);
        if (!entry) throw ConfigError("config: unknown key '" + path + "'");
        check_type(*entry, subval);
        doc[key][sub] = subval;
      }
    } else {
      const SchemaEntry* entry = find_entry(key);
      if (!entry) {
        if (doc.contains(key) && doc[key].is_object())
          throw ConfigError("config: section '" + key + "' must be an object");
        throw ConfigError("config: unknown key '" + key + "'");
      }
      check_type(*entry, value);
      doc[key] = value;
    }
  }
  return doc;
}

nlohmann::json parse_flag_value(const SchemaEntry& entry, const std::string& raw) {
  const std::string path = entry.path();
  try {
    switch (entry.type) {
      case FieldType::U64: return nlohmann::json(static_cast<std::uint64_t>(std::stoull(raw)));
      case FieldType::I64: return nlohmann::json(static_cast<std::int64_t>(std::stoll(raw)));
      case FieldType::F64: return nlohmann::json(std::stod(raw));
      case FieldType::Bool:
        if (raw == "true" || raw == "1") return nlohmann::json(true);
        if (raw == "false" || raw == "0") return nlohmann::json(false);
        throw ConfigError("config " + path + ": expected true|false, got '" + raw + "'");
      case FieldType::Str: return nlohmann::json(raw);
    }
  } catch (const std::invalid_argument&) {
  } catch (const std::out_of_range&) {
  }
  throw ConfigError("config " + path + ": cannot parse '" + raw + "'");
}

void apply_path(nlohmann::json& doc, const std::string& path, const nlohmann::json& value) {
  const size_t dot = path.find('.');
  if (dot == std::string::npos)
    doc[path] = value;
  else
    doc[path.substr(0, dot)][path.substr(dot + 1)] = value;
}

// ---------------------------------------------------------------------------
// Config → module settings.

SyntheticDatasetSpec data_spec_from(const nlohmann::json& cfg) {
  SyntheticDatasetSpec spec;
  spec.num_classes = cfg.at("data").at("num_classes").get<Index>();
  spec.samples_per_class = cfg.at("data").at("samples_per_class").get<Index>();
  spec.tokens_per_sample = cfg.at("data").at("tokens_per_sample").get<Index>();
  spec.latent_dim = cfg.at("data").at("latent_dim").get<Index>();
  spec.raw_dim = cfg.at("data").at("raw_dim").get<Index>();
  spec.coding = parse_coding(cfg.at("data").at("coding").get<std::string>());
  spec.noise_scale = cfg.at("data").at("noise_scale").get<double>();
  spec.seed = cfg.at("seed").get<std::uint64_t>();
  spec.validate();
  return spec;
}

DalipObjectiveConfig objective_from(const nlohmann::json& cfg) {
  DalipObjectiveConfig obj;
  obj.lambda1 = cfg.at("objective").at("lambda1").get<double>();
  obj.lambda2 = cfg.at("objective").at("lambda2").get<double>();
  obj.log_tau_init = cfg.at("objective").at("log_tau_init").get<double>();
  obj.normalize_second_order = cfg.at("objective").at("normalize_second_order").get<bool>();
  const std::string red = cfg.at("objective").at("reduction").get<std::string>();
  if (red == "mean")
    obj.reduction = Reduction::Mean;
  else if (red == "sum")
    obj.reduction = Reduction::Sum;
  else
    throw ConfigError("config objective.reduction: expected mean|sum, got '" + red + "'");
  obj.validate();
  return obj;
}

TowerParams tower_from(const nlohmann::json& cfg) {
  const Index token_dim = cfg.at("model").at("token_dim").get<Index>();
  const int heads = cfg.at("model").at("heads").get<int>();
  Index out_dim = cfg.at("model").at("out_dim").get<Index>();
  if (out_dim == 0) out_dim = token_dim;
  Index hidden = cfg.at("model").at("hidden").get<Index>();
  if (hidden == 0 && heads > 0 && token_dim % heads == 0)
    hidden = triu_len(token_dim / heads);
  return tower_init(parse_pooling(cfg.at("model").at("pooling").get<std::string>()),
                    cfg.at("data").at("raw_dim").get<Index>(),
                    cfg.at("model").at("mid_dim").get<Index>(), token_dim, heads, out_dim,
                    hidden, cfg.at("model").at("shared_head").get<bool>(),
                    cfg.at("objective").at("log_tau_init").get<double>(),
                    cfg.at("seed").get<std::uint64_t>());
}

TrainConfig train_from(const nlohmann::json& cfg) {
  TrainConfig t;
  t.batch_size = cfg.at("train").at("batch_size").get<Index>();
  t.epochs = cfg.at("train").at("epochs").get<Index>();
  t.base_lr = cfg.at("train").at("base_lr").get<double>();
  t.min_lr = cfg.at("train").at("min_lr").get<double>();
  t.warmup_steps = cfg.at("train").at("warmup_steps").get<Index>();
  t.beta1 = cfg.at("train").at("beta1").get<double>();
  t.beta2 = cfg.at("train").at("beta2").get<double>();
  t.adam_eps = cfg.at("train").at("adam_eps").get<double>();
  t.seed = cfg.at("seed").get<std::uint64_t>();
  t.variant = parse_loss_variant(cfg.at("train").at("variant").get<std::string>());
  t.objective = objective_from(cfg);
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Shared output plumbing.

struct RunContext {
  std::string subcommand;
  nlohmann::json config;
  std::filesystem::path out_dir;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
  std::vector<std::string> files;

  void note_file(const std::string& name) { files.push_back(name); }

  void write_manifest() {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    nlohmann::json manifest{{"subcommand", subcommand},
                            {"version", kVersion},
                            {"seed", config.at("seed")},
                            {"config", config},
                            {"files", files},
                            {"wall_clock_seconds", wall}};
    std::ofstream out(out_dir / "run-manifest.json");
    if (!out) throw ParseError("cannot open " + (out_dir / "run-manifest.json").string());
    out << manifest.dump(2) << "\n";
  }
};

RunContext make_context(const std::string& name, const nlohmann::json& cfg) {
  RunContext ctx;
  ctx.subcommand = name;
  ctx.config = cfg;
  ctx.out_dir = cfg.at("output").at("dir").get<std::string>();
  std::filesystem::create_directories(ctx.out_dir);
  return ctx;
}

void write_json_file(RunContext& ctx, const std::string& name, const nlohmann::json& doc) {
  std::ofstream out(ctx.out_dir / name);
  if (!out) throw ParseError("cannot open " + (ctx.out_dir / name).string());
  out << doc.dump(2) << "\n";
  ctx.note_file(name);
}

nlohmann::json eval_to_json(const EvalMetrics& m) {
  return {{"top1", m.top1},
          {"top5", m.top5},
          {"first_only_top1", m.first_only_top1},
          {"second_only_top1", m.second_only_top1},
          {"samples", m.size}};
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Each returns the process exit code.

int run_gen_data(const nlohmann::json& cfg) {
  RunContext ctx = make_context("gen-data", cfg);
  const SyntheticDataset ds = generate(data_spec_from(cfg));
  save_dataset(ctx.out_dir / "dataset", ds);
  ctx.note_file("dataset");
  std::cerr << "dataset: " << ds.train.size() << " train / " << ds.test.size()
            << " test samples; mean-classifier " << ds.calibration.mean_classifier_acc
            << ", qda " << ds.calibration.qda_acc << "\n";
  ctx.write_manifest();
  return 0;
}

SyntheticDataset dataset_for(const nlohmann::json& cfg, const std::string& dataset_dir) {
  if (!dataset_dir.empty()) return load_dataset(dataset_dir);
  return generate(data_spec_from(cfg));
}

// A loaded dataset supersedes the config's data section (the tower reads its
// raw dimension from there, and the manifest echo must match reality).
void sync_data_section(nlohmann::json& cfg, const SyntheticDatasetSpec& spec) {
  cfg["data"]["num_classes"] = spec.num_classes;
  cfg["data"]["samples_per_class"] = spec.samples_per_class;
  cfg["data"]["tokens_per_sample"] = spec.tokens_per_sample;
  cfg["data"]["latent_dim"] = spec.latent_dim;
  cfg["data"]["raw_dim"] = spec.raw_dim;
  cfg["data"]["coding"] = coding_name(spec.coding);
  cfg["data"]["noise_scale"] = spec.noise_scale;
}

int run_train(nlohmann::json cfg, const std::string& dataset_dir) {
  const SyntheticDataset ds = dataset_for(cfg, dataset_dir);
  if (!dataset_dir.empty()) sync_data_section(cfg, ds.spec);
  RunContext ctx = make_context("train", cfg);
  const TrainConfig tc = train_from(cfg);
  const TrainResult result = train(ds, tower_from(cfg), tc);

  save_model(ctx.out_dir / "model", result.params);
  ctx.note_file("model");
  write_step_csv(ctx.out_dir / "train_steps.csv", result.log);
  ctx.note_file("train_steps.csv");
  write_epoch_csv(ctx.out_dir / "train_epochs.csv", result.log);
  ctx.note_file("train_epochs.csv");
  const EvalMetrics m = evaluate(result.params, ds.test, tc.objective);
  write_json_file(ctx, "eval.json", eval_to_json(m));

  std::cout << "top1 " << format_double(m.top1) << " top5 " << format_double(m.top5) << "\n";
  ctx.write_manifest();
  return 0;
}

int run_eval(nlohmann::json cfg, const std::string& dataset_dir,
             const std::string& model_dir) {
  if (model_dir.empty()) throw ConfigError("eval: --model is required");
  const TowerParams params = load_model(model_dir);
  const SyntheticDataset ds = dataset_for(cfg, dataset_dir);
  if (!dataset_dir.empty()) sync_data_section(cfg, ds.spec);
  RunContext ctx = make_context("eval", cfg);
  const EvalMetrics m = evaluate(params, ds.test, objective_from(cfg));
  write_json_file(ctx, "eval.json", eval_to_json(m));
  std::cout << "top1 " << format_double(m.top1) << " top5 " << format_double(m.top5) << "\n";
  ctx.write_manifest();
  return 0;
}

int run_gradcheck(const nlohmann::json& cfg, double fd_step, double fd_tol) {
  RunContext ctx = make_context("gradcheck", cfg);

  // Fixed toy dimensions: 4 paired samples of 6 tokens, 10 raw channels,
  // 8 encoded channels, 2-head pooling.
  const DalipObjectiveConfig obj = objective_from(cfg);
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  CounterRng rng(seed, 0xC11);
  std::vector<SampleRecord> recs(4);
  for (auto& rec : recs) {
    rec.class_id = 0;
    rec.image_tokens = random_normal(rng, 6, 10);
    rec.text_tokens = random_normal(rng, 6, 10);
  }
  const TowerParams proto =
      tower_init(PoolingKind::Mbdc, 10, 8, 8, 2, 8, 10, true, obj.log_tau_init, seed + 1);

  std::vector<Matrix> params = {proto.image.proj_in, proto.image.proj_out,
                                proto.image.first_proj, proto.text.proj_in,
                                proto.text.proj_out,  proto.text.first_proj,
                                proto.head.w1,        proto.head.w2,
                                proto.head.ln_gain,   proto.head.ln_bias,
                                Matrix::Constant(1, 1, obj.log_tau_init)};
  std::vector<std::string> names = {"image_proj_in", "image_proj_out", "image_first_proj",
                                    "text_proj_in",  "text_proj_out",  "text_first_proj",
                                    "head_w1",       "head_w2",        "head_ln_gain",
                                    "head_ln_bias",  "log_tau"};

  auto build = [&recs, &proto, &obj](Tape& t, const std::vector<Val>& leaves) {
    ModelVals v;
    v.image = {leaves[0], leaves[1], leaves[2]};
    v.text = {leaves[3], leaves[4], leaves[5]};
    v.head = {leaves[6], leaves[7], leaves[8], leaves[9]};
    v.log_tau = leaves[10];
    std::vector<const SampleRecord*> batch;
    for (const auto& rec : recs) batch.push_back(&rec);
    const BatchEmbeddings be = model_forward(t, batch, v, proto);
    return dalip_loss(be.image_first, be.text_first, be.image_second, be.text_second,
                      v.log_tau, obj);
  };

  const GradCheckReport report = finite_diff_check(build, params, names, fd_step, fd_tol);

  nlohmann::json per_param;
  for (const auto& [name, err] : report.per_param) per_param[name] = err;
  write_json_file(ctx, "gradcheck.json",
                  {{"pass", report.pass},
                   {"max_rel_err", report.max_rel_err},
                   {"worst_param", report.worst_param},
                   {"fd_step", fd_step},
                   {"tolerance", fd_tol},
                   {"per_param", per_param}});
  std::cout << "gradcheck " << (report.pass ? "pass" : "FAIL") << " max_rel_err "
            << format_double(report.max_rel_err) << " (" << report.worst_param << ")\n";
  ctx.write_manifest();
  return report.pass ? 0 : 2;
}

int run_bdc(const nlohmann::json& cfg, const std::string& in_path, double eps) {
  if (in_path.empty()) throw ConfigError("bdc: --in is required");
  RunContext ctx = make_context("bdc", cfg);
  const Matrix x = read_blob(in_path);
  const Matrix b = bdc_matrix(x, eps);
  write_blob(ctx.out_dir / "bdc.bin", b);
  ctx.note_file("bdc.bin");
  std::cout << "bdc " << shape_str(x) << " -> " << shape_str(b) << "\n";
  ctx.write_manifest();
  return 0;
}

int run_mbdc(const nlohmann::json& cfg, const std::string& in_path) {
  if (in_path.empty()) throw ConfigError("mbdc: --in is required");
  RunContext ctx = make_context("mbdc", cfg);
  const Matrix x = read_blob(in_path);

  const int heads = cfg.at("model").at("heads").get<int>();
  const Index d = x.cols();
  Index out_dim = cfg.at("model").at("out_dim").get<Index>();
  if (out_dim == 0) out_dim = d;
  Index hidden = cfg.at("model").at("hidden").get<Index>();
  if (hidden == 0 && heads > 0 && d % heads == 0) hidden = triu_len(d / heads);
  const MbdcParams params =
      mbdc_init(heads, d, out_dim, hidden, cfg.at("seed").get<std::uint64_t>());

  const Matrix y = mbdc_forward(x, params);
  write_blob(ctx.out_dir / "mbdc.bin", y);
  ctx.note_file("mbdc.bin");
  std::cout << "mbdc " << shape_str(x) << " -> " << shape_str(y) << "\n";
  ctx.write_manifest();
  return 0;
}

nlohmann::json curve_to_json(const CurveFit& f) {
  return {{"alpha", f.alpha}, {"beta", f.beta},       {"gamma", f.gamma},
          {"rss", f.rss},     {"flat", f.flat},       {"direction", f.direction}};
}

MixLawFit fit_with_config(const nlohmann::json& cfg, const std::filesystem::path& csv) {
  return fit(read_observations_csv(csv), cfg.at("mixlaw").at("gamma_lo").get<double>(),
             cfg.at("mixlaw").at("gamma_hi").get<double>(),
             cfg.at("mixlaw").at("grid_points").get<int>());
}

int run_fit_mixlaw(const nlohmann::json& cfg, const std::string& observations) {
  if (observations.empty()) throw ConfigError("fit-mixlaw: --observations is required");
  RunContext ctx = make_context("fit-mixlaw", cfg);
  const MixLawFit fit_result = fit_with_config(cfg, observations);
  write_json_file(ctx, "mixlaw.json",
                  {{"domain1", fit_result.domain1},
                   {"domain2", fit_result.domain2},
                   {"fit1", curve_to_json(fit_result.fit1)},
                   {"fit2", curve_to_json(fit_result.fit2)},
                   {"argument_convention", "fit1 in r, fit2 in 1-r"}});
  std::cout << fit_result.domain1 << " gamma " << format_double(fit_result.fit1.gamma) << ", "
            << fit_result.domain2 << " gamma " << format_double(fit_result.fit2.gamma) << "\n";
  ctx.write_manifest();
  return 0;
}

CurveFit parse_curve_flag(const std::string& raw, const char* which) {
  std::vector<double> vals;
  size_t start = 0;
  while (start <= raw.size()) {
    const size_t comma = raw.find(',', start);
    const std::string field =
        comma == std::string::npos ? raw.substr(start) : raw.substr(start, comma - start);
    try {
      vals.push_back(std::stod(field));
    } catch (const std::exception&) {
      throw ConfigError(std::string(which) + ": expected alpha,beta,gamma, got '" + raw + "'");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (vals.size() != 3)
    throw ConfigError(std::string(which) + ": expected alpha,beta,gamma, got '" + raw + "'");
  CurveFit f;
  f.alpha = vals[0];
  f.beta = vals[1];
  f.gamma = vals[2];
  f.flat = std::abs(f.beta) <= 1e-6;
  f.direction = f.flat ? 0 : (f.beta * f.gamma > 0 ? 1 : -1);
  return f;
}

int run_solve_mix(const nlohmann::json& cfg, const std::string& fit1_raw,
                  const std::string& fit2_raw) {
  if (fit1_raw.empty() || fit2_raw.empty())
    throw ConfigError("solve-mix: --fit1 and --fit2 are required (alpha,beta,gamma)");
  RunContext ctx = make_context("solve-mix", cfg);
  const CurveFit f1 = parse_curve_flag(fit1_raw, "--fit1");
  const CurveFit f2 = parse_curve_flag(fit2_raw, "--fit2");
  const MixSolution s = solve_optimal_ratio(f1, f2, cfg.at("mixlaw").at("w1").get<double>(),
                                            cfg.at("mixlaw").at("w2").get<double>());
  write_json_file(ctx, "solve.json",
                  {{"r_star", s.r_star},
                   {"boundary_flag", s.boundary},
                   {"objective_at_r_star", s.objective}});
  std::cout << "r_star " << format_double(s.r_star) << (s.boundary ? " (boundary)" : "")
            << "\n";
  ctx.write_manifest();
  return 0;
}

int run_report(const nlohmann::json& cfg, const std::vector<std::string>& steps,
               const std::vector<std::string>& epochs, std::vector<std::string> labels,
               const std::string& mix_csv, bool with_fit) {
  if (steps.empty() && mix_csv.empty())
    throw ConfigError("report: give --steps/--epochs run logs or a --mix sweep CSV");
  RunContext ctx = make_context("report", cfg);

  if (!steps.empty()) {
    if (steps.size() != epochs.size())
      throw ConfigError("report: --steps and --epochs must pair up");
    if (labels.empty())
      for (size_t i = 0; i < steps.size(); ++i) labels.push_back("run" + std::to_string(i + 1));
    if (labels.size() != steps.size())
      throw ConfigError("report: --labels must match the number of runs");
    std::vector<std::filesystem::path> step_paths(steps.begin(), steps.end());
    std::vector<std::filesystem::path> epoch_paths(epochs.begin(), epochs.end());
    for (const auto& f : write_training_report(step_paths, epoch_paths, labels, ctx.out_dir))
      ctx.note_file(f);
  }
  if (!mix_csv.empty()) {
    std::optional<MixLawFit> overlay;
    if (with_fit) overlay = fit_with_config(cfg, mix_csv);
    // Both report kinds emit a summary.json; when sharing one run they get
    // separate directories.
    const bool nested = !steps.empty();
    const std::filesystem::path mix_dir = nested ? ctx.out_dir / "mix" : ctx.out_dir;
    for (const auto& f : write_mix_report(mix_csv, overlay, mix_dir))
      ctx.note_file(nested ? "mix/" + f : f);
  }
  ctx.write_manifest();
  return 0;
}

// `schema` (hidden): machine-readable flag inventory for the help doc test.
int run_schema() {
  nlohmann::json doc;
  for (const auto& [sub, sections] : subcommand_sections()) {
    std::vector<std::string> flags;
    for (const auto& entry : schema())
      for (const auto& section : sections)
        if (section == entry.section) flags.push_back(entry.flag());
    doc[sub]["flags"] = flags;
  }
  for (const auto& entry : schema())
    doc["defaults"][entry.path()] = entry.def;
  std::cout << doc.dump(2) << "\n";
  return 0;
}

}  // namespace
}  // namespace dalip

int main(int argc, char** argv) {
  using namespace dalip;

  CLI::App app{"Two-tower contrastive training with second-order pooling, synthetic "
               "fine-grained data, and data-mixing-law tooling"};
  app.require_subcommand(1);

  std::string config_path;
  std::map<std::string, std::string> staged;  // schema path -> raw flag value
  std::map<std::string, CLI::Option*> staged_opts;

  auto bind_schema = [&](CLI::App* sub, const std::string& name) {
    sub->add_option("--config", config_path, "JSON config file");
    for (const auto& entry : schema()) {
      bool bound = false;
      for (const auto& section : subcommand_sections().at(name))
        if (section == entry.section) bound = true;
      if (!bound) continue;
      const std::string help =
          std::string(entry.help) + " (default: " + entry.def.dump() + ")";
      staged_opts[name + ":" + entry.path()] =
          sub->add_option(entry.flag(), staged[entry.path()], help);
    }
  };

  CLI::App* gen_data = app.add_subcommand("gen-data", "generate a synthetic paired dataset");
  bind_schema(gen_data, "gen-data");

  std::string dataset_dir, model_dir;
  CLI::App* train_cmd = app.add_subcommand("train", "train the two-tower model");
  bind_schema(train_cmd, "train");
  train_cmd->add_option("--dataset", dataset_dir,
                        "load a saved dataset directory instead of generating");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a saved model checkpoint");
  bind_schema(eval_cmd, "eval");
  eval_cmd->add_option("--model", model_dir, "model checkpoint directory");
  eval_cmd->add_option("--dataset", dataset_dir,
                       "load a saved dataset directory instead of generating");

  double fd_step = 1e-5, fd_tol = 1e-4;
  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference check of the full training graph");
  bind_schema(gradcheck_cmd, "gradcheck");
  gradcheck_cmd->add_option("--fd-step", fd_step, "finite-difference step (default: 1e-05)");
  gradcheck_cmd->add_option("--fd-tol", fd_tol, "relative error tolerance (default: 0.0001)");

  std::string in_path;
  double bdc_eps = 1e-8;
  CLI::App* bdc_cmd = app.add_subcommand("bdc", "distance-covariance transform of one blob");
  bind_schema(bdc_cmd, "bdc");
  bdc_cmd->add_option("--in", in_path, "input tensor blob (tokens by channels)");
  bdc_cmd->add_option("--eps", bdc_eps, "square-root smoothing (default: 1e-08)");

  CLI::App* mbdc_cmd = app.add_subcommand("mbdc", "multi-head pooled embedding of one blob");
  bind_schema(mbdc_cmd, "mbdc");
  mbdc_cmd->add_option("--in", in_path, "input tensor blob (tokens by channels)");

  std::string observations_csv;
  CLI::App* fit_cmd = app.add_subcommand("fit-mixlaw", "fit per-domain mixing laws from a CSV");
  bind_schema(fit_cmd, "fit-mixlaw");
  fit_cmd->add_option("--observations", observations_csv,
                      "CSV with header domain,ratio,accuracy");

  std::string fit1_raw, fit2_raw;
  CLI::App* solve_cmd =
      app.add_subcommand("solve-mix", "optimal mixing ratio from two fitted curves");
  bind_schema(solve_cmd, "solve-mix");
  solve_cmd->add_option("--fit1", fit1_raw, "domain-1 curve as alpha,beta,gamma (in r)");
  solve_cmd->add_option("--fit2", fit2_raw, "domain-2 curve as alpha,beta,gamma (in 1-r)");

  std::vector<std::string> step_csvs, epoch_csvs, labels;
  std::string mix_csv;
  bool with_fit = false;
  CLI::App* report_cmd = app.add_subcommand("report", "render SVG charts and a summary JSON");
  bind_schema(report_cmd, "report");
  report_cmd->add_option("--steps", step_csvs, "per-step metrics CSV (repeat per run)");
  report_cmd->add_option("--epochs", epoch_csvs, "per-epoch metrics CSV (repeat per run)");
  report_cmd->add_option("--labels", labels, "legend label per run");
  report_cmd->add_option("--mix", mix_csv, "mixing-sweep CSV (domain,ratio,accuracy)");
  report_cmd->add_flag("--with-fit", with_fit, "overlay fitted curves on the mix chart");

  CLI::App* schema_cmd =
      app.add_subcommand("schema", "print the config schema and per-subcommand flags");
  schema_cmd->group("");  // hidden from the top-level listing

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (schema_cmd->parsed()) return run_schema();

    // Resolve the config document: defaults <- file <- DALIP_SEED <- flags.
    nlohmann::json user = nlohmann::json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("config: cannot open " + config_path);
      try {
        in >> user;
      } catch (const nlohmann::json::exception& e) {
        throw ParseError("config: invalid JSON in " + config_path + ": " + e.what());
      }
    }
    nlohmann::json cfg = resolve_config(user);

    if (const char* env_seed = std::getenv("DALIP_SEED")) {
      cfg["seed"] = parse_flag_value(*find_entry("seed"), env_seed);
    }

    const std::string sub_name = app.get_subcommands().front()->get_name();
    for (const auto& entry : schema()) {
      const auto it = staged_opts.find(sub_name + ":" + entry.path());
      if (it != staged_opts.end() && it->second->count() > 0)
        apply_path(cfg, entry.path(), parse_flag_value(entry, staged[entry.path()]));
    }

    if (gen_data->parsed()) return run_gen_data(cfg);
    if (train_cmd->parsed()) return run_train(cfg, dataset_dir);
    if (eval_cmd->parsed()) return run_eval(cfg, dataset_dir, model_dir);
    if (gradcheck_cmd->parsed()) return run_gradcheck(cfg, fd_step, fd_tol);
    if (bdc_cmd->parsed()) return run_bdc(cfg, in_path, bdc_eps);
    if (mbdc_cmd->parsed()) return run_mbdc(cfg, in_path);
    if (fit_cmd->parsed()) return run_fit_mixlaw(cfg, observations_csv);
    if (solve_cmd->parsed()) return run_solve_mix(cfg, fit1_raw, fit2_raw);
    if (report_cmd->parsed())
      return run_report(cfg, step_csvs, epoch_csvs, labels, mix_csv, with_fit);
    throw ContractError("no subcommand dispatched");
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParamError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    // Numeric failures: divergence, non-finite values, contract breaches.
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal failure: " << e.what() << "\n";
    return 2;
  }
}
