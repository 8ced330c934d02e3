#include "dalip/mbdc.hpp"

#include <fstream>

#include <json.hpp>

#include "dalip/blob.hpp"
#include "dalip/rng.hpp"

namespace dalip {

void MbdcParams::validate() const {
  if (h < 1) throw ConfigError("mbdc: head count must be positive, got " + std::to_string(h));
  if (d < 1 || d % h != 0)
    throw ConfigError("mbdc: h=" + std::to_string(h) + " must divide d=" + std::to_string(d));
  if (d_tilde < 1) throw ConfigError("mbdc: output dimension must be positive");
  if (q < 1) throw ConfigError("mbdc: hidden width must be positive");
  if (eps < 0) throw ParamError("mbdc: eps must be nonnegative");
  const Index hl = concat_width();
  if (w1.rows() != hl || w1.cols() != q)
    throw ShapeError("mbdc: w1 must be " + shape_str(hl, q) + ", got " + shape_str(w1));
  if (w2.rows() != q || w2.cols() != d_tilde)
    throw ShapeError("mbdc: w2 must be " + shape_str(q, d_tilde) + ", got " + shape_str(w2));
  if (ln_gain.rows() != 1 || ln_gain.cols() != hl)
    throw ShapeError("mbdc: ln_gain must be " + shape_str(1, hl) + ", got " + shape_str(ln_gain));
  if (ln_bias.rows() != 1 || ln_bias.cols() != hl)
    throw ShapeError("mbdc: ln_bias must be " + shape_str(1, hl) + ", got " + shape_str(ln_bias));
  require_finite(w1, "mbdc w1");
  require_finite(w2, "mbdc w2");
  require_finite(ln_gain, "mbdc ln_gain");
  require_finite(ln_bias, "mbdc ln_bias");
}

MbdcParams mbdc_init(int h, Index d, Index d_tilde, Index q, std::uint64_t seed) {
  MbdcParams p;
  p.h = h;
  p.d = d;
  p.d_tilde = d_tilde;
  p.q = q;
  if (h < 1 || d < 1 || d % h != 0)
    throw ConfigError("mbdc_init: h=" + std::to_string(h) + " must divide d=" + std::to_string(d));
  const Index hl = p.concat_width();
  CounterRng r1(seed, 1), r2(seed, 2);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(hl));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(q));
  p.w1 = random_uniform(r1, hl, q, -s1, s1);
  p.w2 = random_uniform(r2, q, d_tilde, -s2, s2);
  p.ln_gain = Matrix::Ones(1, hl);
  p.ln_bias = Matrix::Zero(1, hl);
  p.validate();
  return p;
}

std::vector<Matrix> split_heads(const Matrix& x, int h) {
  if (h < 1 || x.cols() % h != 0)
    throw ConfigError("split_heads: h=" + std::to_string(h) + " must divide d=" +
                      std::to_string(x.cols()));
  const Index w = x.cols() / h;
  std::vector<Matrix> out;
  out.reserve(static_cast<size_t>(h));
  for (int j = 0; j < h; ++j) out.push_back(x.middleCols(j * w, w));
  return out;
}

MbdcVals mbdc_register(Tape& t, const MbdcParams& p) {
  p.validate();
  return MbdcVals{t.input(p.w1), t.input(p.w2), t.input(p.ln_gain), t.input(p.ln_bias)};
}

Val mbdc_forward(Val x, const MbdcVals& vals, const MbdcParams& p) {
  Tape& t = *x.tape;
  if (t.value(x).cols() != p.d)
    throw ShapeError("mbdc_forward: input must have " + std::to_string(p.d) +
                     " channels, got " + shape_str(t.value(x)));

  std::vector<Val> pieces;
  pieces.reserve(static_cast<size_t>(p.h));
  for (Val head : split_cols(x, p.h)) pieces.push_back(triu_vec(bdc_forward(head, p.eps)));
  Val flat = concat_cols(pieces);  // 1 x (h*l)
  Val normed = layer_norm(flat, vals.ln_gain, vals.ln_bias, kLnEps);
  Val hidden = relu(matmul(normed, vals.w1));
  return matmul(hidden, vals.w2);
}

Matrix mbdc_forward(const Matrix& x, const MbdcParams& p) {
  Tape t;
  return t.value(mbdc_forward(t.input(x), mbdc_register(t, p), p));
}

namespace {
const char* kManifestName = "manifest.json";
}

void save_mbdc(const std::filesystem::path& dir, const MbdcParams& p) {
  p.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["h"] = p.h;
  manifest["d"] = p.d;
  manifest["d_tilde"] = p.d_tilde;
  manifest["q"] = p.q;
  manifest["eps"] = p.eps;
  std::ofstream out(dir / kManifestName);
  if (!out) throw ParseError("save_mbdc: cannot open " + (dir / kManifestName).string());
  out << manifest.dump(2) << "\n";
  write_blob(dir / "w1.bin", p.w1);
  write_blob(dir / "w2.bin", p.w2);
  write_blob(dir / "ln_gain.bin", p.ln_gain);
  write_blob(dir / "ln_bias.bin", p.ln_bias);
}

MbdcParams load_mbdc(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw ParseError("load_mbdc: cannot open " + (dir / kManifestName).string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_mbdc: bad manifest: " + std::string(e.what()));
  }
  for (const char* key : {"h", "d", "d_tilde", "q", "eps"})
    if (!manifest.contains(key))
      throw ParseError("load_mbdc: manifest missing key '" + std::string(key) + "'");

  MbdcParams p;
  p.h = manifest["h"].get<int>();
  p.d = manifest["d"].get<Index>();
  p.d_tilde = manifest["d_tilde"].get<Index>();
  p.q = manifest["q"].get<Index>();
  p.eps = manifest["eps"].get<double>();
  p.w1 = read_blob(dir / "w1.bin");
  p.w2 = read_blob(dir / "w2.bin");
  p.ln_gain = read_blob(dir / "ln_gain.bin");
  p.ln_bias = read_blob(dir / "ln_bias.bin");
  p.validate();
  return p;
}

}  // namespace dalip
