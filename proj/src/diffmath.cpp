#include "loco/diffmath.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace loco {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

// Output shape for an elementwise op where either side may be 1x1.
Matrix broadcast_shape(Op op, const Matrix& a, const Matrix& b) {
  if (a.same_shape(b) || b.size() == 1) return Matrix(a.rows(), a.cols());
  if (a.size() == 1) return Matrix(b.rows(), b.cols());
  throw ShapeError(std::string(op_name(op)) + ": cannot broadcast " + shape_str(a) +
                   " with " + shape_str(b));
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

double Matrix::item() const {
  if (size() != 1) throw ShapeError("item() on " + shape_str(*this) + " matrix");
  return data_[0];
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_str(a) + " * " +
                     shape_str(b) + ")");
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
  return out;
}

Matrix row_softmax(const Matrix& m, double scale) {
  if (!(scale > 0.0)) throw ContractError("row_softmax: scale must be positive");
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto o = out.row(r);
    const double hi = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp((in[c] - hi) / scale);
      total += o[c];
    }
    for (double& v : o) v /= total;
  }
  return out;
}

std::size_t argmax_first(std::span<const double> v) {
  if (v.empty()) throw ShapeError("max_norm: empty input");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double max_norm(std::span<const double> v) { return v[argmax_first(v)]; }

std::string_view op_name(Op op) {
  switch (op) {
    case Op::variable: return "variable";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::row_softmax: return "row_softmax";
    case Op::column: return "column";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::scale: return "scale";
    case Op::add_scalar: return "add_scalar";
    case Op::sum: return "sum";
    case Op::square: return "square";
    case Op::sigmoid: return "sigmoid";
    case Op::log: return "log";
    case Op::maximum: return "maximum";
    case Op::clamp: return "clamp";
    case Op::max_norm: return "max_norm";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tape

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw ContractError("Var does not belong to this tape");
  return nodes_[v.id];
}

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::variable(Matrix value) {
  Node n;
  n.op = Op::variable;
  n.requires_grad = true;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(Matrix value) {
  Node n;
  n.op = Op::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::detach(Var x) { return constant(node(x).value); }

Var Tape::matmul(Var a, Var b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  Node n;
  n.op = Op::matmul;
  n.lhs = a.id;
  n.rhs = b.id;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  n.value = loco::matmul(na.value, nb.value);
  return push(std::move(n));
}

Var Tape::transpose(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::transpose;
  n.lhs = a.id;
  n.requires_grad = na.requires_grad;
  n.value = loco::transpose(na.value);
  return push(std::move(n));
}

Var Tape::row_softmax(Var a, double scale) {
  const Node& na = node(a);
  Node n;
  n.op = Op::row_softmax;
  n.lhs = a.id;
  n.p0 = scale;
  n.requires_grad = na.requires_grad;
  n.value = loco::row_softmax(na.value, scale);
  return push(std::move(n));
}

Var Tape::column(Var a, std::size_t j) {
  const Node& na = node(a);
  if (j >= na.value.cols()) {
    throw ShapeError("column: index " + std::to_string(j) + " out of range for " +
                     shape_str(na.value));
  }
  Node n;
  n.op = Op::column;
  n.lhs = a.id;
  n.index = j;
  n.requires_grad = na.requires_grad;
  n.value = Matrix(na.value.rows(), 1);
  for (std::size_t r = 0; r < na.value.rows(); ++r) n.value[r] = na.value(r, j);
  return push(std::move(n));
}

Var Tape::binary(Op op, Var a, Var b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  Node n;
  n.op = op;
  n.lhs = a.id;
  n.rhs = b.id;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  n.value = broadcast_shape(op, na.value, nb.value);
  const bool sa = na.value.size() == 1;
  const bool sb = nb.value.size() == 1;
  for (std::size_t k = 0; k < n.value.size(); ++k) {
    const double x = na.value[sa ? 0 : k];
    const double y = nb.value[sb ? 0 : k];
    double r = 0.0;
    switch (op) {
      case Op::add: r = x + y; break;
      case Op::sub: r = x - y; break;
      case Op::mul: r = x * y; break;
      case Op::div: r = x / y; break;
      case Op::maximum: r = x >= y ? x : y; break;
      default: throw ContractError("binary: unsupported op");
    }
    n.value[k] = r;
  }
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) { return binary(Op::add, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::sub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(Op::mul, a, b); }
Var Tape::div(Var a, Var b) { return binary(Op::div, a, b); }
Var Tape::maximum(Var a, Var b) { return binary(Op::maximum, a, b); }

Var Tape::scale(Var a, double c) {
  const Node& na = node(a);
  Node n;
  n.op = Op::scale;
  n.lhs = a.id;
  n.p0 = c;
  n.requires_grad = na.requires_grad;
  n.value = na.value;
  for (double& v : n.value.data()) v *= c;
  return push(std::move(n));
}

Var Tape::add_scalar(Var a, double c) {
  const Node& na = node(a);
  Node n;
  n.op = Op::add_scalar;
  n.lhs = a.id;
  n.p0 = c;
  n.requires_grad = na.requires_grad;
  n.value = na.value;
  for (double& v : n.value.data()) v += c;
  return push(std::move(n));
}

Var Tape::sum(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::sum;
  n.lhs = a.id;
  n.requires_grad = na.requires_grad;
  double total = 0.0;
  for (double v : na.value.data()) total += v;
  n.value = Matrix::scalar(total);
  return push(std::move(n));
}

Var Tape::square(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::square;
  n.lhs = a.id;
  n.requires_grad = na.requires_grad;
  n.value = na.value;
  for (double& v : n.value.data()) v *= v;
  return push(std::move(n));
}

Var Tape::sigmoid(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::sigmoid;
  n.lhs = a.id;
  n.requires_grad = na.requires_grad;
  n.value = na.value;
  for (double& v : n.value.data()) v = sigmoid_scalar(v);
  return push(std::move(n));
}

Var Tape::log(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::log;
  n.lhs = a.id;
  n.requires_grad = na.requires_grad;
  n.value = na.value;
  for (double& v : n.value.data()) v = std::log(v);
  return push(std::move(n));
}

Var Tape::clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
  const Node& na = node(a);
  Node n;
  n.op = Op::clamp;
  n.lhs = a.id;
  n.p0 = lo;
  n.p1 = hi;
  n.requires_grad = na.requires_grad;
  n.value = na.value;
  for (double& v : n.value.data()) v = std::clamp(v, lo, hi);
  return push(std::move(n));
}

Var Tape::max_norm(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::max_norm;
  n.lhs = a.id;
  n.index = argmax_first(na.value.data());
  n.requires_grad = na.requires_grad;
  n.value = Matrix::scalar(na.value[n.index]);
  return push(std::move(n));
}

std::vector<std::size_t> Tape::max_norm_argmaxes() const {
  std::vector<std::size_t> out;
  for (const Node& n : nodes_)
    if (n.op == Op::max_norm) out.push_back(n.index);
  return out;
}

Gradients Tape::backward(Var loss) const {
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " + shape_str(root.value));
  }
  Gradients out;
  out.grads_.resize(loss.id + 1);
  out.shapes_.reserve(nodes_.size());
  for (const Node& n : nodes_) out.shapes_.emplace_back(n.value.rows(), n.value.cols());
  if (!root.requires_grad) return out;

  auto& g = out.grads_;
  auto acc = [&](std::size_t id) -> Matrix& {
    if (g[id].size() == 0) g[id] = Matrix(nodes_[id].value.rows(), nodes_[id].value.cols());
    return g[id];
  };
  g[loss.id] = Matrix::scalar(1.0);

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || g[id].size() == 0) continue;
    const Matrix& up = g[id];
    switch (n.op) {
      case Op::variable:
      case Op::constant:
        break;
      case Op::matmul: {
        const Node& a = nodes_[n.lhs];
        const Node& b = nodes_[n.rhs];
        if (a.requires_grad) {
          Matrix d = loco::matmul(up, loco::transpose(b.value));
          Matrix& ga = acc(n.lhs);
          for (std::size_t k = 0; k < d.size(); ++k) ga[k] += d[k];
        }
        if (b.requires_grad) {
          Matrix d = loco::matmul(loco::transpose(a.value), up);
          Matrix& gb = acc(n.rhs);
          for (std::size_t k = 0; k < d.size(); ++k) gb[k] += d[k];
        }
        break;
      }
      case Op::transpose: {
        Matrix& ga = acc(n.lhs);
        for (std::size_t r = 0; r < up.rows(); ++r)
          for (std::size_t c = 0; c < up.cols(); ++c) ga(c, r) += up(r, c);
        break;
      }
      case Op::row_softmax: {
        // dx_j = y_j (g_j - sum_k g_k y_k) / scale
        Matrix& ga = acc(n.lhs);
        const Matrix& y = n.value;
        for (std::size_t r = 0; r < y.rows(); ++r) {
          auto yr = y.row(r);
          auto gr = up.row(r);
          double dot = 0.0;
          for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
          auto out_r = ga.row(r);
          for (std::size_t c = 0; c < yr.size(); ++c)
            out_r[c] += yr[c] * (gr[c] - dot) / n.p0;
        }
        break;
      }
      case Op::column: {
        Matrix& ga = acc(n.lhs);
        for (std::size_t r = 0; r < up.rows(); ++r) ga(r, n.index) += up[r];
        break;
      }
      case Op::add:
      case Op::sub:
      case Op::mul:
      case Op::div:
      case Op::maximum: {
        const Node& a = nodes_[n.lhs];
        const Node& b = nodes_[n.rhs];
        const bool sa = a.value.size() == 1;
        const bool sb = b.value.size() == 1;
        Matrix* ga = a.requires_grad ? &acc(n.lhs) : nullptr;
        Matrix* gb = b.requires_grad ? &acc(n.rhs) : nullptr;
        for (std::size_t k = 0; k < up.size(); ++k) {
          const std::size_t ia = sa ? 0 : k;
          const std::size_t ib = sb ? 0 : k;
          const double x = a.value[ia];
          const double y = b.value[ib];
          double da = 0.0;
          double db = 0.0;
          switch (n.op) {
            case Op::add: da = 1.0; db = 1.0; break;
            case Op::sub: da = 1.0; db = -1.0; break;
            case Op::mul: da = y; db = x; break;
            case Op::div: da = 1.0 / y; db = -x / (y * y); break;
            default:  // maximum: ties go to the left operand
              if (x >= y) da = 1.0; else db = 1.0;
              break;
          }
          if (ga) (*ga)[ia] += up[k] * da;
          if (gb) (*gb)[ib] += up[k] * db;
        }
        break;
      }
      case Op::scale: {
        Matrix& ga = acc(n.lhs);
        for (std::size_t k = 0; k < up.size(); ++k) ga[k] += n.p0 * up[k];
        break;
      }
      case Op::add_scalar: {
        Matrix& ga = acc(n.lhs);
        for (std::size_t k = 0; k < up.size(); ++k) ga[k] += up[k];
        break;
      }
      case Op::sum: {
        Matrix& ga = acc(n.lhs);
        const double s = up[0];
        for (double& v : ga.data()) v += s;
        break;
      }
      case Op::square: {
        Matrix& ga = acc(n.lhs);
        const Matrix& x = nodes_[n.lhs].value;
        for (std::size_t k = 0; k < up.size(); ++k) ga[k] += 2.0 * x[k] * up[k];
        break;
      }
      case Op::sigmoid: {
        Matrix& ga = acc(n.lhs);
        for (std::size_t k = 0; k < up.size(); ++k) {
          const double y = n.value[k];
          ga[k] += y * (1.0 - y) * up[k];
        }
        break;
      }
      case Op::log: {
        Matrix& ga = acc(n.lhs);
        const Matrix& x = nodes_[n.lhs].value;
        for (std::size_t k = 0; k < up.size(); ++k) ga[k] += up[k] / x[k];
        break;
      }
      case Op::clamp: {
        Matrix& ga = acc(n.lhs);
        const Matrix& x = nodes_[n.lhs].value;
        for (std::size_t k = 0; k < up.size(); ++k)
          if (x[k] >= n.p0 && x[k] <= n.p1) ga[k] += up[k];
        break;
      }
      case Op::max_norm: {
        acc(n.lhs)[n.index] += up[0];
        break;
      }
    }
  }
  return out;
}

Matrix Gradients::of(Var v) const {
  if (v.id >= shapes_.size()) throw ContractError("Gradients::of: unknown Var");
  if (v.id < grads_.size() && grads_[v.id].size() != 0) return grads_[v.id];
  return Matrix(shapes_[v.id].first, shapes_[v.id].second);
}

}  // namespace loco
