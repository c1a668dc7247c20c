#pragma once

// Dense row-major matrices and a small reverse-mode tape covering the
// operations used by the attention losses. Everything is double precision.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "loco/errors.hpp"

namespace loco {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix scalar(double v) { return Matrix(1, 1, v); }
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Views are only available on lvalues so they cannot outlive a temporary.
  std::span<double> data() & noexcept { return data_; }
  std::span<const double> data() const& noexcept { return data_; }
  std::span<const double> data() && = delete;
  std::span<const double> row(std::size_t r) const& {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }
  std::span<double> row(std::size_t r) & {
    return std::span<double>(data_).subspan(r * cols_, cols_);
  }
  std::span<const double> row(std::size_t r) && = delete;

  // Value of a 1x1 matrix.
  double item() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Plain (untaped) kernels, shared by the tape and by callers that only need
// forward values.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix row_softmax(const Matrix& m, double scale);

// Index of the first maximal entry in row-major order. Throws ShapeError on
// empty input.
std::size_t argmax_first(std::span<const double> v);
double max_norm(std::span<const double> v);

enum class Op : std::uint8_t {
  variable,
  constant,
  matmul,
  transpose,
  row_softmax,
  column,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  sum,
  square,
  sigmoid,
  log,
  maximum,
  clamp,
  max_norm,
};

std::string_view op_name(Op op);

// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

class Gradients;

// Records operations in creation order, which is a topological order by
// construction. One tape per guided run; not thread-safe.
class Tape {
 public:
  Var variable(Matrix value);
  Var constant(Matrix value);
  // Copy of `x`'s value with no gradient path back to `x`.
  Var detach(Var x);

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var row_softmax(Var a, double scale);
  // Column `j` of `a` as an rows x 1 matrix.
  Var column(Var a, std::size_t j);

  // Elementwise binary ops. Either operand may be 1x1, in which case it is
  // broadcast over the other.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var maximum(Var a, Var b);

  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var sum(Var a);
  Var square(Var a);
  Var sigmoid(Var a);
  Var log(Var a);
  Var clamp(Var a, double lo, double hi);
  // Largest entry, as 1x1. The gradient goes to the first maximal entry.
  Var max_norm(Var a);

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  Op op(Var v) const { return nodes_.at(v.id).op; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Winning index of every max_norm node, in recording order. Two forward
  // passes with equal signatures took the same branch through every max.
  std::vector<std::size_t> max_norm_argmaxes() const;

  // Reverse accumulation from a 1x1 node. Each node is visited once.
  Gradients backward(Var loss) const;

 private:
  struct Node {
    Op op = Op::constant;
    std::size_t lhs = 0;
    std::size_t rhs = 0;
    std::size_t index = 0;  // column index or argmax position
    double p0 = 0.0;        // scale / shift / softmax scale / clamp lo
    double p1 = 0.0;        // clamp hi
    bool requires_grad = false;
    Matrix value;
  };

  Var push(Node node);
  Var binary(Op op, Var a, Var b);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

class Gradients {
 public:
  // d(loss)/d(v), shaped like v. All zeros for detached or constant nodes
  // and for nodes the loss does not depend on.
  Matrix of(Var v) const;

 private:
  friend class Tape;
  std::vector<Matrix> grads_;
  std::vector<std::pair<std::size_t, std::size_t>> shapes_;
};

}  // namespace loco
