#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dalip/types.hpp"

namespace dalip {

// Primitive tags. Every tag has exactly one backward rule in Tape::backward.
enum class Op : std::uint8_t {
  Input,
  Matmul,
  Transpose,
  Add,
  Subtract,
  ScalarScale,
  Hadamard,
  SafeSqrt,
  Relu,
  LayerNorm,
  L2Normalize,
  MeanRows,
  ConcatCols,
  SplitCols,
  TriuVec,
  SumAll,
  LogSumExpRows,
  ExpElem,
};

struct TapeNode {
  Op op = Op::Input;
  Matrix value;
  std::vector<int> parents;  // ids of earlier nodes only (DAG in creation order)
  double aux = 0.0;          // eps (SafeSqrt), eps_ln (LayerNorm), factor (ScalarScale)
  Index col_offset = 0;      // SplitCols
  Index col_width = 0;       // SplitCols
};

class Tape;

// Cheap handle to a tape node.
struct Val {
  Tape* tape = nullptr;
  int id = -1;
};

// Adjoints of one backward pass, keyed by node id.
class Gradients {
 public:
  // Gradient of the root w.r.t. the given node; zero matrix if the node does
  // not feed the root.
  Matrix wrt(Val v) const;
  bool reached(Val v) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<Matrix> adj_;
  std::vector<char> touched_;
};

// Define-by-run tape: forward values are computed eagerly at node creation,
// rebuilt per forward pass. Single-threaded per instance.
class Tape {
 public:
  Val input(Matrix value);

  const Matrix& value(Val v) const;
  const TapeNode& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Exact reverse-mode gradients of a 1x1 root w.r.t. every reachable node,
  // accumulated additively over fan-out.
  Gradients backward(Val root) const;

  Val emplace(Op op, Matrix value, std::vector<int> parents, double aux = 0.0,
              Index col_offset = 0, Index col_width = 0);

 private:
  std::vector<TapeNode> nodes_;
};

// --- primitive set -----------------------------------------------------------

Val matmul(Val a, Val b);
Val transpose(Val a);
Val add(Val a, Val b);
Val subtract(Val a, Val b);
Val scalar_scale(Val a, double c);
Val hadamard(Val a, Val b);
// Element-wise sqrt(max(x, 0) + eps); negatives are rounding debris and clamp
// to zero with zero gradient.
Val safe_sqrt(Val x, double eps);
Val relu(Val x);
// Row-wise normalization with population (1/n) variance; gain/bias are 1 x n
// rows broadcast across the rows of x.
Val layer_norm(Val x, Val gain, Val bias, double eps_ln);
// Row-wise x / max(||x||, 1e-12); zero rows stay zero.
Val l2_normalize(Val x);
Val mean_rows(Val x);
Val concat_cols(std::span<const Val> parts);
std::vector<Val> split_cols(Val x, int h);
// Upper triangle with diagonal of a square matrix, row-major order, as 1 x l.
Val triu_vec(Val x);
Val sum_all(Val x);
// Row-wise log(sum(exp(x))), returned as a column vector.
Val log_sum_exp_rows(Val x);
Val exp_elem(Val x);

// --- compositions (no new backward rules) ------------------------------------

inline Val concat_cols(std::initializer_list<Val> parts) {
  return concat_cols(std::span<const Val>(parts.begin(), parts.size()));
}
// 1x1 node replicated to rows x cols via two matmuls with all-ones leaves.
Val broadcast_scalar(Val s, Index rows, Index cols);
// Element-wise multiply by a 1x1 node.
Val scale_by(Val x, Val s);
// Stack row vectors vertically (transpose + concat_cols + transpose).
Val concat_rows(std::span<const Val> parts);

}  // namespace dalip
