#include "dalip/tape.hpp"

#include <cmath>

namespace dalip {

namespace {

void require_same_tape(Val a, Val b, const char* op) {
  if (a.tape == nullptr || b.tape == nullptr || a.tape != b.tape)
    throw ContractError(std::string(op) + ": operands live on different tapes");
}

void require_valid(Val a, const char* op) {
  if (a.tape == nullptr || a.id < 0) throw ContractError(std::string(op) + ": empty handle");
}

}  // namespace

Matrix Gradients::wrt(Val v) const {
  const auto i = static_cast<size_t>(v.id);
  if (i < touched_.size() && touched_[i]) return adj_[i];
  const Matrix& val = tape_->value(v);
  return Matrix::Zero(val.rows(), val.cols());
}

bool Gradients::reached(Val v) const {
  const auto i = static_cast<size_t>(v.id);
  return i < touched_.size() && touched_[i];
}

Val Tape::input(Matrix value) {
  require_finite(value, "input");
  return emplace(Op::Input, std::move(value), {});
}

const Matrix& Tape::value(Val v) const {
  if (v.tape != this) throw ContractError("value: handle belongs to a different tape");
  return nodes_.at(static_cast<size_t>(v.id)).value;
}

Val Tape::emplace(Op op, Matrix value, std::vector<int> parents, double aux, Index col_offset,
                  Index col_width) {
  require_finite(value, "tape op result");
  TapeNode n;
  n.op = op;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.aux = aux;
  n.col_offset = col_offset;
  n.col_width = col_width;
  nodes_.push_back(std::move(n));
  return Val{this, static_cast<int>(nodes_.size()) - 1};
}

// --- forward ------------------------------------------------------------------

Val matmul(Val a, Val b) {
  require_same_tape(a, b, "matmul");
  const Matrix& va = a.tape->value(a);
  const Matrix& vb = b.tape->value(b);
  if (va.cols() != vb.rows())
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(va) + " * " + shape_str(vb));
  return a.tape->emplace(Op::Matmul, va * vb, {a.id, b.id});
}

Val transpose(Val a) {
  require_valid(a, "transpose");
  return a.tape->emplace(Op::Transpose, a.tape->value(a).transpose(), {a.id});
}

Val add(Val a, Val b) {
  require_same_tape(a, b, "add");
  const Matrix& va = a.tape->value(a);
  const Matrix& vb = b.tape->value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols())
    throw ShapeError("add: shapes differ, " + shape_str(va) + " vs " + shape_str(vb));
  return a.tape->emplace(Op::Add, va + vb, {a.id, b.id});
}

Val subtract(Val a, Val b) {
  require_same_tape(a, b, "subtract");
  const Matrix& va = a.tape->value(a);
  const Matrix& vb = b.tape->value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols())
    throw ShapeError("subtract: shapes differ, " + shape_str(va) + " vs " + shape_str(vb));
  return a.tape->emplace(Op::Subtract, va - vb, {a.id, b.id});
}

Val scalar_scale(Val a, double c) {
  require_valid(a, "scalar_scale");
  if (!std::isfinite(c)) throw ParamError("scalar_scale: factor must be finite");
  return a.tape->emplace(Op::ScalarScale, a.tape->value(a) * c, {a.id}, c);
}

Val hadamard(Val a, Val b) {
  require_same_tape(a, b, "hadamard");
  const Matrix& va = a.tape->value(a);
  const Matrix& vb = b.tape->value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols())
    throw ShapeError("hadamard: shapes differ, " + shape_str(va) + " vs " + shape_str(vb));
  return a.tape->emplace(Op::Hadamard, va.cwiseProduct(vb), {a.id, b.id});
}

Val safe_sqrt(Val x, double eps) {
  require_valid(x, "safe_sqrt");
  if (eps < 0) throw ParamError("safe_sqrt: eps must be nonnegative, got " + std::to_string(eps));
  const Matrix& v = x.tape->value(x);
  Matrix y = (v.cwiseMax(0.0).array() + eps).sqrt();
  return x.tape->emplace(Op::SafeSqrt, std::move(y), {x.id}, eps);
}

Val relu(Val x) {
  require_valid(x, "relu");
  return x.tape->emplace(Op::Relu, x.tape->value(x).cwiseMax(0.0), {x.id});
}

Val layer_norm(Val x, Val gain, Val bias, double eps_ln) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, bias, "layer_norm");
  if (eps_ln <= 0) throw ParamError("layer_norm: eps_ln must be positive");
  const Matrix& vx = x.tape->value(x);
  const Matrix& vg = x.tape->value(gain);
  const Matrix& vb = x.tape->value(bias);
  if (vg.rows() != 1 || vb.rows() != 1 || vg.cols() != vx.cols() || vb.cols() != vx.cols())
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(vx.cols()) + ", got " +
                     shape_str(vg) + " and " + shape_str(vb));
  const Index n = vx.cols();
  Matrix y(vx.rows(), n);
  for (Index r = 0; r < vx.rows(); ++r) {
    const double mu = vx.row(r).mean();
    const double var = (vx.row(r).array() - mu).square().sum() / static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps_ln);
    y.row(r) = ((vx.row(r).array() - mu) * inv) * vg.array() + vb.array();
  }
  return x.tape->emplace(Op::LayerNorm, std::move(y), {x.id, gain.id, bias.id}, eps_ln);
}

namespace {
constexpr double kNormFloor = 1e-12;
}

Val l2_normalize(Val x) {
  require_valid(x, "l2_normalize");
  const Matrix& vx = x.tape->value(x);
  Matrix y(vx.rows(), vx.cols());
  for (Index r = 0; r < vx.rows(); ++r) {
    const double n = std::max(vx.row(r).norm(), kNormFloor);
    y.row(r) = vx.row(r) / n;
  }
  return x.tape->emplace(Op::L2Normalize, std::move(y), {x.id});
}

Val mean_rows(Val x) {
  require_valid(x, "mean_rows");
  const Matrix& vx = x.tape->value(x);
  if (vx.rows() < 1) throw ShapeError("mean_rows: empty input " + shape_str(vx));
  Matrix y = vx.colwise().mean();
  return x.tape->emplace(Op::MeanRows, std::move(y), {x.id});
}

Val concat_cols(std::span<const Val> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  Tape* tape = parts[0].tape;
  std::vector<int> parents;
  Index rows = tape->value(parts[0]).rows();
  Index cols = 0;
  for (const Val& p : parts) {
    require_same_tape(parts[0], p, "concat_cols");
    const Matrix& v = tape->value(p);
    if (v.rows() != rows)
      throw ShapeError("concat_cols: row counts differ, " + shape_str(v) + " vs " +
                       shape_str(rows, cols));
    parents.push_back(p.id);
    cols += v.cols();
  }
  Matrix y(rows, cols);
  Index at = 0;
  for (const Val& p : parts) {
    const Matrix& v = tape->value(p);
    y.middleCols(at, v.cols()) = v;
    at += v.cols();
  }
  return tape->emplace(Op::ConcatCols, std::move(y), std::move(parents));
}

std::vector<Val> split_cols(Val x, int h) {
  require_valid(x, "split_cols");
  const Index cols = x.tape->value(x).cols();
  if (h < 1 || cols % h != 0)
    throw ConfigError("split_cols: h=" + std::to_string(h) + " does not divide cols=" +
                      std::to_string(cols));
  const Index w = cols / h;
  std::vector<Val> out;
  out.reserve(static_cast<size_t>(h));
  for (int j = 0; j < h; ++j) {
    // Re-fetch the value each round: emplace may relocate the node storage.
    Matrix block = x.tape->value(x).middleCols(j * w, w);
    out.push_back(x.tape->emplace(Op::SplitCols, std::move(block), {x.id}, 0.0, j * w, w));
  }
  return out;
}

Val triu_vec(Val x) {
  require_valid(x, "triu_vec");
  const Matrix& vx = x.tape->value(x);
  if (vx.rows() != vx.cols())
    throw ShapeError("triu_vec: input must be square, got " + shape_str(vx));
  const Index k = vx.rows();
  Matrix y(1, triu_len(k));
  Index p = 0;
  for (Index i = 0; i < k; ++i)
    for (Index j = i; j < k; ++j) y(0, p++) = vx(i, j);
  return x.tape->emplace(Op::TriuVec, std::move(y), {x.id});
}

Val sum_all(Val x) {
  require_valid(x, "sum_all");
  Matrix y(1, 1);
  y(0, 0) = x.tape->value(x).sum();
  return x.tape->emplace(Op::SumAll, std::move(y), {x.id});
}

Val log_sum_exp_rows(Val x) {
  require_valid(x, "log_sum_exp_rows");
  const Matrix& vx = x.tape->value(x);
  Matrix y(vx.rows(), 1);
  for (Index r = 0; r < vx.rows(); ++r) {
    const double m = vx.row(r).maxCoeff();
    y(r, 0) = m + std::log((vx.row(r).array() - m).exp().sum());
  }
  return x.tape->emplace(Op::LogSumExpRows, std::move(y), {x.id});
}

Val exp_elem(Val x) {
  require_valid(x, "exp_elem");
  Matrix y = x.tape->value(x).array().exp();
  return x.tape->emplace(Op::ExpElem, std::move(y), {x.id});
}

// --- compositions ---------------------------------------------------------------

Val broadcast_scalar(Val s, Index rows, Index cols) {
  require_valid(s, "broadcast_scalar");
  const Matrix& v = s.tape->value(s);
  if (v.rows() != 1 || v.cols() != 1)
    throw ShapeError("broadcast_scalar: expected 1x1, got " + shape_str(v));
  Val left = s.tape->input(Matrix::Ones(rows, 1));
  Val right = s.tape->input(Matrix::Ones(1, cols));
  return matmul(matmul(left, s), right);
}

Val scale_by(Val x, Val s) {
  const Matrix& vx = x.tape->value(x);
  return hadamard(x, broadcast_scalar(s, vx.rows(), vx.cols()));
}

Val concat_rows(std::span<const Val> parts) {
  std::vector<Val> cols;
  cols.reserve(parts.size());
  for (const Val& p : parts) cols.push_back(transpose(p));
  return transpose(concat_cols(cols));
}

// --- backward -------------------------------------------------------------------

Gradients Tape::backward(Val root) const {
  if (root.tape != this) throw ContractError("backward: root from a different tape");
  const Matrix& rv = value(root);
  if (rv.rows() != 1 || rv.cols() != 1)
    throw ContractError("backward: root must be a 1x1 scalar, got " + shape_str(rv));

  Gradients g;
  g.tape_ = this;
  g.adj_.resize(nodes_.size());
  g.touched_.assign(nodes_.size(), 0);

  auto accum = [&](int id, const Matrix& delta) {
    const auto i = static_cast<size_t>(id);
    if (!g.touched_[i]) {
      g.adj_[i] = delta;
      g.touched_[i] = 1;
    } else {
      g.adj_[i] += delta;
    }
  };

  accum(root.id, Matrix::Ones(1, 1));

  for (int id = root.id; id >= 0; --id) {
    if (!g.touched_[static_cast<size_t>(id)]) continue;
    const TapeNode& n = nodes_[static_cast<size_t>(id)];
    const Matrix& grad = g.adj_[static_cast<size_t>(id)];
    switch (n.op) {
      case Op::Input:
        break;
      case Op::Matmul: {
        const Matrix& a = nodes_[static_cast<size_t>(n.parents[0])].value;
        const Matrix& b = nodes_[static_cast<size_t>(n.parents[1])].value;
        accum(n.parents[0], grad * b.transpose());
        accum(n.parents[1], a.transpose() * grad);
        break;
      }
      case Op::Transpose:
        accum(n.parents[0], grad.transpose());
        break;
      case Op::Add:
        accum(n.parents[0], grad);
        accum(n.parents[1], grad);
        break;
      case Op::Subtract:
        accum(n.parents[0], grad);
        accum(n.parents[1], -grad);
        break;
      case Op::ScalarScale:
        accum(n.parents[0], grad * n.aux);
        break;
      case Op::Hadamard: {
        const Matrix& a = nodes_[static_cast<size_t>(n.parents[0])].value;
        const Matrix& b = nodes_[static_cast<size_t>(n.parents[1])].value;
        accum(n.parents[0], grad.cwiseProduct(b));
        accum(n.parents[1], grad.cwiseProduct(a));
        break;
      }
      case Op::SafeSqrt: {
        const Matrix& x = nodes_[static_cast<size_t>(n.parents[0])].value;
        // d/dx sqrt(max(x,0)+eps) = 1/(2 sqrt(.)) on x>0, 0 on the clamped side.
        Matrix d(x.rows(), x.cols());
        for (Index i = 0; i < x.rows(); ++i)
          for (Index j = 0; j < x.cols(); ++j)
            d(i, j) = x(i, j) > 0.0 ? grad(i, j) * 0.5 / n.value(i, j) : 0.0;
        accum(n.parents[0], d);
        break;
      }
      case Op::Relu: {
        const Matrix& x = nodes_[static_cast<size_t>(n.parents[0])].value;
        accum(n.parents[0],
              grad.cwiseProduct((x.array() > 0.0).cast<double>().matrix()));
        break;
      }
      case Op::LayerNorm: {
        const Matrix& x = nodes_[static_cast<size_t>(n.parents[0])].value;
        const Matrix& gain = nodes_[static_cast<size_t>(n.parents[1])].value;
        const Index cols = x.cols();
        const double nn = static_cast<double>(cols);
        Matrix dx(x.rows(), cols);
        Matrix dgain = Matrix::Zero(1, cols);
        Matrix dbias = Matrix::Zero(1, cols);
        using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;
        for (Index r = 0; r < x.rows(); ++r) {
          const double mu = x.row(r).mean();
          const double var = (x.row(r).array() - mu).square().sum() / nn;
          const double inv = 1.0 / std::sqrt(var + n.aux);
          RowArray xhat = (x.row(r).array() - mu) * inv;
          RowArray dxhat = grad.row(r).array() * gain.array();
          const double m1 = dxhat.mean();
          const double m2 = (dxhat * xhat).mean();
          dx.row(r) = (inv * (dxhat - m1 - xhat * m2)).matrix();
          dgain.array() += grad.row(r).array() * xhat;
          dbias.array() += grad.row(r).array();
        }
        accum(n.parents[0], dx);
        accum(n.parents[1], dgain);
        accum(n.parents[2], dbias);
        break;
      }
      case Op::L2Normalize: {
        const Matrix& x = nodes_[static_cast<size_t>(n.parents[0])].value;
        Matrix dx(x.rows(), x.cols());
        for (Index r = 0; r < x.rows(); ++r) {
          const double norm = x.row(r).norm();
          if (norm > kNormFloor) {
            const auto y = n.value.row(r);
            const double dot = grad.row(r).dot(y);
            dx.row(r) = (grad.row(r) - dot * y) / norm;
          } else {
            dx.row(r) = grad.row(r) / kNormFloor;
          }
        }
        accum(n.parents[0], dx);
        break;
      }
      case Op::MeanRows: {
        const Matrix& x = nodes_[static_cast<size_t>(n.parents[0])].value;
        const double m = static_cast<double>(x.rows());
        accum(n.parents[0], grad.replicate(x.rows(), 1) / m);
        break;
      }
      case Op::ConcatCols: {
        Index at = 0;
        for (int pid : n.parents) {
          const Matrix& pv = nodes_[static_cast<size_t>(pid)].value;
          accum(pid, grad.middleCols(at, pv.cols()));
          at += pv.cols();
        }
        break;
      }
      case Op::SplitCols: {
        const Matrix& x = nodes_[static_cast<size_t>(n.parents[0])].value;
        Matrix dx = Matrix::Zero(x.rows(), x.cols());
        dx.middleCols(n.col_offset, n.col_width) = grad;
        accum(n.parents[0], dx);
        break;
      }
      case Op::TriuVec: {
        const Matrix& x = nodes_[static_cast<size_t>(n.parents[0])].value;
        const Index k = x.rows();
        Matrix dx = Matrix::Zero(k, k);
        Index p = 0;
        for (Index i = 0; i < k; ++i)
          for (Index j = i; j < k; ++j) dx(i, j) = grad(0, p++);
        accum(n.parents[0], dx);
        break;
      }
      case Op::SumAll: {
        const Matrix& x = nodes_[static_cast<size_t>(n.parents[0])].value;
        accum(n.parents[0], Matrix::Constant(x.rows(), x.cols(), grad(0, 0)));
        break;
      }
      case Op::LogSumExpRows: {
        const Matrix& x = nodes_[static_cast<size_t>(n.parents[0])].value;
        Matrix dx(x.rows(), x.cols());
        for (Index r = 0; r < x.rows(); ++r) {
          const double m = x.row(r).maxCoeff();
          Eigen::ArrayXXd e = (x.row(r).array() - m).exp();
          dx.row(r) = (grad(r, 0) * e / e.sum()).matrix();
        }
        accum(n.parents[0], dx);
        break;
      }
      case Op::ExpElem:
        accum(n.parents[0], grad.cwiseProduct(n.value));
        break;
    }
  }

  // Shapes of adjoints always match their node values.
  for (size_t i = 0; i < g.adj_.size(); ++i) {
    if (g.touched_[i] && (g.adj_[i].rows() != nodes_[i].value.rows() ||
                          g.adj_[i].cols() != nodes_[i].value.cols()))
      throw ContractError("backward: adjoint shape mismatch at node " + std::to_string(i));
  }
  return g;
}

}  // namespace dalip
