#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace dalip {

// Universal numeric carrier: dense 2-D, 64-bit float, row-major storage
// (matches the on-disk blob layout byte for byte).
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct ParamError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct DeterminismError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

// Raised by the training loop when a loss or gradient goes non-finite.
struct DivergenceError : Error {
  DivergenceError(const std::string& msg, long step_, double lr_)
      : Error(msg), step(step_), lr(lr_) {}
  long step = -1;
  double lr = 0.0;
};

inline std::string shape_str(Index r, Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}
inline std::string shape_str(const Matrix& m) { return shape_str(m.rows(), m.cols()); }

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite())
    throw NumericError(std::string(what) + ": non-finite entry in tensor " + shape_str(m));
}

// Bitwise equality, including shape.
inline bool bits_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0;
}
inline bool bits_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

// Length of the upper triangle (diagonal included) of a k x k matrix.
constexpr Index triu_len(Index k) { return k * (k + 1) / 2; }

}  // namespace dalip
