#include "qfd/ndmath.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace qfd {

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

std::string shape_str(const Mat& m) {
  return shape_str(std::vector<std::size_t>{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
}

bool all_finite(const Mat& m) { return m.allFinite(); }

// ---------------------------------------------------------------------------
// Array

namespace {
std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}
}  // namespace

Array::Array(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Array::Array(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw MathError("array shape " + shape_str(shape_) + " does not match " +
                    std::to_string(data_.size()) + " elements");
  }
}

Array Array::from_mat(const Mat& m, std::size_t rank) {
  std::vector<std::size_t> shape;
  const auto r = static_cast<std::size_t>(m.rows());
  const auto c = static_cast<std::size_t>(m.cols());
  switch (rank) {
    case 0:
      if (r * c != 1) throw MathError("rank-0 array from matrix of shape " + shape_str(m));
      break;
    case 1:
      if (r != 1) throw MathError("rank-1 array from matrix of shape " + shape_str(m));
      shape = {c};
      break;
    case 2:
      shape = {r, c};
      break;
    default:
      throw MathError("from_mat supports rank <= 2");
  }
  return Array(std::move(shape), std::vector<double>(m.data(), m.data() + m.size()));
}

std::size_t Array::rows() const {
  switch (rank()) {
    case 0:
    case 1:
      return 1;
    case 2:
      return shape_[0];
    default:
      throw MathError("matrix view of rank-" + std::to_string(rank()) + " array");
  }
}

std::size_t Array::cols() const {
  switch (rank()) {
    case 0:
      return 1;
    case 1:
      return shape_[0];
    case 2:
      return shape_[1];
    default:
      throw MathError("matrix view of rank-" + std::to_string(rank()) + " array");
  }
}

Eigen::Map<const Mat> Array::mat() const {
  return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

Eigen::Map<Mat> Array::mat() {
  return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::set(const std::string& name, Array value) { params_[name] = std::move(value); }

const Array& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw MathError("unknown parameter '" + name + "'");
  return it->second;
}

Array& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw MathError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_) {
    if (name.compare(0, prefix.size(), prefix) == 0) out.push_back(name);
  }
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, a] : params_) n += a.size();
  return n;
}

// ---------------------------------------------------------------------------
// Activations

Activation activation_from_string(const std::string& name) {
  if (name == "identity") return Activation::Identity;
  if (name == "relu") return Activation::ReLU;
  if (name == "mish") return Activation::Mish;
  if (name == "gelu") return Activation::GeLU;
  if (name == "softplus") return Activation::Softplus;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::ReLU: return "relu";
    case Activation::Mish: return "mish";
    case Activation::GeLU: return "gelu";
    case Activation::Softplus: return "softplus";
  }
  return "?";
}

namespace {

// tanh approximation of GeLU
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Mish(x) = x tanh(softplus(x)) = x n / (n + 2) with n = e^x (e^x + 2); e^x is
// capped where the ratio is already 1 in double precision.
constexpr double kMishCap = 20.0;

}  // namespace

Mat activate(Activation kind, const Mat& x) {
  const auto a = x.array();
  switch (kind) {
    case Activation::Identity: return x;
    case Activation::ReLU: return a.max(0.0).matrix();
    case Activation::Mish: {
      const Eigen::ArrayXXd e = a.min(kMishCap).exp();
      const Eigen::ArrayXXd n = e * (e + 2.0);
      return (a * n / (n + 2.0)).matrix();
    }
    case Activation::GeLU: {
      // 0.5 (1 + tanh(u)) = sigmoid(2u), which keeps precision in both tails.
      const Eigen::ArrayXXd u2 = 2.0 * kGeluC * (a + kGeluA * a.cube());
      return (a / (1.0 + (-u2).exp())).matrix();
    }
    case Activation::Softplus: return (a.max(0.0) + (-a.abs()).exp().log1p()).matrix();
  }
  return x;
}

Mat activate_derivative(Activation kind, const Mat& x) {
  const auto a = x.array();
  switch (kind) {
    case Activation::Identity: return Mat::Ones(x.rows(), x.cols());
    case Activation::ReLU: return (a > 0.0).cast<double>().matrix();
    case Activation::Mish: {
      const Eigen::ArrayXXd e = a.min(kMishCap).exp();
      const Eigen::ArrayXXd d = e * (e + 2.0) + 2.0;
      return ((d - 2.0) / d + a * 4.0 * e * (e + 1.0) / d.square()).matrix();
    }
    case Activation::GeLU: {
      const Eigen::ArrayXXd u2 = 2.0 * kGeluC * (a + kGeluA * a.cube());
      const Eigen::ArrayXXd s = 1.0 / (1.0 + (-u2).exp());
      const Eigen::ArrayXXd sm = 1.0 / (1.0 + u2.exp());
      const Eigen::ArrayXXd du = kGeluC * (1.0 + 3.0 * kGeluA * a.square());
      return (s + 2.0 * a * s * sm * du).matrix();
    }
    case Activation::Softplus: return (1.0 / (1.0 + (-a).exp())).matrix();
  }
  return Mat::Ones(x.rows(), x.cols());
}

double activate(Activation kind, double x) { return activate(kind, Mat::Constant(1, 1, x))(0, 0); }

double activate_derivative(Activation kind, double x) {
  return activate_derivative(kind, Mat::Constant(1, 1, x))(0, 0);
}

// ---------------------------------------------------------------------------
// Gradients

const Mat& Gradients::input(Var v) const {
  auto it = inputs.find(v.id);
  if (it == inputs.end()) throw MathError("no gradient recorded for input node " + std::to_string(v.id));
  return it->second;
}

const Array& Gradients::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw MathError("no gradient recorded for parameter '" + name + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Tape

namespace {

const char* op_name(Tape::Op op) {
  switch (op) {
    case Tape::Op::Constant: return "constant";
    case Tape::Op::Input: return "input";
    case Tape::Op::Param: return "param";
    case Tape::Op::MatMul: return "matmul";
    case Tape::Op::AddBias: return "add_bias";
    case Tape::Op::Add: return "add";
    case Tape::Op::Sub: return "sub";
    case Tape::Op::Mul: return "mul";
    case Tape::Op::Div: return "div";
    case Tape::Op::Scale: return "scale";
    case Tape::Op::ScaleRows: return "scale_rows";
    case Tape::Op::Act: return "activation";
    case Tape::Op::ConcatCols: return "concat_cols";
    case Tape::Op::SliceCols: return "slice_cols";
    case Tape::Op::Min: return "min";
    case Tape::Op::Sum: return "sum";
    case Tape::Op::Mean: return "mean";
    case Tape::Op::Square: return "square";
    case Tape::Op::Log: return "log";
    case Tape::Op::RowNorm: return "row_norm";
    case Tape::Op::RowSum: return "row_sum";
    case Tape::Op::Clip: return "clip";
  }
  return "?";
}

Mat apply(const Mat& x, Activation kind) { return activate(kind, x); }

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw MathError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw MathError("tape variable " + std::to_string(v.id) + " out of range");
  return nodes_[v.id];
}

const Mat& Tape::value(Var v) const { return node(v).value; }

double Tape::scalar(Var v) const {
  const Mat& m = value(v);
  if (m.size() != 1) throw MathError("scalar() on value of shape " + shape_str(m));
  return m(0, 0);
}

bool Tape::requires_grad(Var v) const { return node(v).grad; }

Var Tape::push(Node n) {
  if (n.op != Op::Constant && n.op != Op::Input && n.op != Op::Param) {
    n.value = forward(n);
    if (!all_finite(n.value)) {
      throw MathError(std::string("non-finite result from ") + op_name(n.op) + " (shape " +
                      shape_str(n.value) + ")");
    }
  } else if (!all_finite(n.value)) {
    throw MathError(std::string("non-finite ") + op_name(n.op) + " leaf " + n.name);
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Mat value) {
  Node n; n.op = Op::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Mat value) {
  Node n; n.op = Op::Input;
  n.value = std::move(value);
  n.grad = true;
  return push(std::move(n));
}

Var Tape::param(const std::string& name, const Array& value, bool trainable) {
  if (auto it = param_index_.find(name); it != param_index_.end()) {
    return Var{it->second};
  }
  Node n; n.op = trainable ? Op::Param : Op::Constant;
  n.value = value.mat();
  n.grad = trainable;
  n.name = name;
  n.i0 = value.rank();
  Var v = push(std::move(n));
  param_index_[name] = v.id;
  return v;
}

#define QFD_BINARY(fn, OP)                          \
  Var Tape::fn(Var a, Var b) {                      \
    Node n; n.op = Op::OP;                           \
    n.a = a.id;                                     \
    n.b = b.id;                                     \
    n.grad = node(a).grad || node(b).grad;          \
    return push(std::move(n));                      \
  }

QFD_BINARY(matmul, MatMul)
QFD_BINARY(add_bias, AddBias)
QFD_BINARY(add, Add)
QFD_BINARY(sub, Sub)
QFD_BINARY(mul, Mul)
QFD_BINARY(div, Div)
QFD_BINARY(min, Min)

#undef QFD_BINARY

#define QFD_UNARY(fn, OP)             \
  Var Tape::fn(Var a) {               \
    Node n; n.op = Op::OP;             \
    n.a = a.id;                       \
    n.grad = node(a).grad;            \
    return push(std::move(n));        \
  }

QFD_UNARY(sum, Sum)
QFD_UNARY(mean, Mean)
QFD_UNARY(square, Square)
QFD_UNARY(log, Log)
QFD_UNARY(row_norm, RowNorm)
QFD_UNARY(row_sum, RowSum)

#undef QFD_UNARY

Var Tape::scale(Var a, double k) {
  Node n; n.op = Op::Scale;
  n.a = a.id;
  n.k0 = k;
  n.grad = node(a).grad;
  return push(std::move(n));
}

Var Tape::scale_rows(Var a, const Vec& factors) {
  if (factors.size() != value(a).rows()) {
    throw MathError("scale_rows: " + std::to_string(factors.size()) + " factors for value of shape " +
                    shape_str(value(a)));
  }
  Node n; n.op = Op::ScaleRows;
  n.a = a.id;
  n.factors = factors;
  n.grad = node(a).grad;
  return push(std::move(n));
}

Var Tape::act(Var a, Activation kind) {
  Node n; n.op = Op::Act;
  n.a = a.id;
  n.activation = kind;
  n.grad = node(a).grad;
  return push(std::move(n));
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw MathError("concat_cols of nothing");
  Node n; n.op = Op::ConcatCols;
  for (Var p : parts) {
    n.parts.push_back(p.id);
    n.grad = n.grad || node(p).grad;
  }
  return push(std::move(n));
}

Var Tape::slice_cols(Var a, std::size_t start, std::size_t count) {
  if (start + count > static_cast<std::size_t>(value(a).cols())) {
    throw MathError("slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) +
                    ") out of range for shape " + shape_str(value(a)));
  }
  Node n; n.op = Op::SliceCols;
  n.a = a.id;
  n.i0 = start;
  n.i1 = count;
  n.grad = node(a).grad;
  return push(std::move(n));
}

Var Tape::clip(Var a, double lo, double hi) {
  Node n; n.op = Op::Clip;
  n.a = a.id;
  n.k0 = lo;
  n.k1 = hi;
  n.grad = node(a).grad;
  return push(std::move(n));
}

Mat Tape::forward(const Node& n) const {
  auto val = [this](std::size_t id) -> const Mat& { return nodes_[id].value; };
  switch (n.op) {
    case Op::Constant:
    case Op::Input:
    case Op::Param:
      return n.value;
    case Op::MatMul: {
      const Mat& x = val(n.a);
      const Mat& w = val(n.b);
      if (x.cols() != w.rows()) {
        throw MathError("matmul: shape mismatch " + shape_str(x) + " x " + shape_str(w));
      }
      return x * w;
    }
    case Op::AddBias: {
      const Mat& x = val(n.a);
      const Mat& b = val(n.b);
      if (b.rows() != 1 || b.cols() != x.cols()) {
        throw MathError("add_bias: shape mismatch " + shape_str(x) + " + " + shape_str(b));
      }
      Mat out = x;
      out.rowwise() += b.row(0);
      return out;
    }
    case Op::Add:
      require_same_shape(val(n.a), val(n.b), "add");
      return val(n.a) + val(n.b);
    case Op::Sub:
      require_same_shape(val(n.a), val(n.b), "sub");
      return val(n.a) - val(n.b);
    case Op::Mul:
      require_same_shape(val(n.a), val(n.b), "mul");
      return val(n.a).cwiseProduct(val(n.b));
    case Op::Div:
      require_same_shape(val(n.a), val(n.b), "div");
      return val(n.a).cwiseQuotient(val(n.b));
    case Op::Scale:
      return val(n.a) * n.k0;
    case Op::ScaleRows:
      return n.factors.asDiagonal() * val(n.a);
    case Op::Act:
      return apply(val(n.a), n.activation);
    case Op::ConcatCols: {
      const Eigen::Index rows = val(n.parts.front()).rows();
      Eigen::Index cols = 0;
      for (auto p : n.parts) {
        if (val(p).rows() != rows) {
          throw MathError("concat_cols: row mismatch " + shape_str(val(n.parts.front())) + " vs " +
                          shape_str(val(p)));
        }
        cols += val(p).cols();
      }
      Mat out(rows, cols);
      Eigen::Index c = 0;
      for (auto p : n.parts) {
        out.middleCols(c, val(p).cols()) = val(p);
        c += val(p).cols();
      }
      return out;
    }
    case Op::SliceCols:
      return val(n.a).middleCols(static_cast<Eigen::Index>(n.i0), static_cast<Eigen::Index>(n.i1));
    case Op::Min:
      require_same_shape(val(n.a), val(n.b), "min");
      return val(n.a).cwiseMin(val(n.b));
    case Op::Sum:
      return Mat::Constant(1, 1, val(n.a).sum());
    case Op::Mean:
      return Mat::Constant(1, 1, val(n.a).mean());
    case Op::Square:
      return val(n.a).cwiseAbs2();
    case Op::Log:
      return val(n.a).array().log().matrix();
    case Op::RowNorm:
      return val(n.a).rowwise().norm();
    case Op::RowSum:
      return val(n.a).rowwise().sum();
    case Op::Clip:
      return val(n.a).cwiseMax(n.k0).cwiseMin(n.k1);
  }
  throw MathError("unknown tape op");
}

Gradients Tape::backward() const {
  if (nodes_.empty()) throw MathError("backward on empty tape");
  return backward(Var{nodes_.size() - 1});
}

Gradients Tape::backward(Var output) const {
  const Mat& out = value(output);
  return backward(output, Mat::Ones(out.rows(), out.cols()));
}

Gradients Tape::backward(Var output, const Mat& seed) const {
  if (nodes_.empty()) throw MathError("backward on empty tape");
  const Node& top = node(output);
  if (seed.rows() != top.value.rows() || seed.cols() != top.value.cols()) {
    throw MathError("backward: seed shape " + shape_str(seed) + " does not match output shape " +
                    shape_str(top.value));
  }

  std::vector<Mat> adj(output.id + 1);
  adj[output.id] = seed;

  auto accumulate = [&](std::size_t id, const Mat& contribution) {
    if (!nodes_[id].grad) return;
    if (adj[id].size() == 0) {
      adj[id] = contribution;
    } else {
      adj[id] += contribution;
    }
  };

  for (std::size_t i = output.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.grad || adj[i].size() == 0) continue;
    const Mat& g = adj[i];
    auto val = [this](std::size_t id) -> const Mat& { return nodes_[id].value; };

    switch (n.op) {
      case Op::Constant:
      case Op::Input:
      case Op::Param:
        break;
      case Op::MatMul:
        if (nodes_[n.a].grad) accumulate(n.a, g * val(n.b).transpose());
        if (nodes_[n.b].grad) accumulate(n.b, val(n.a).transpose() * g);
        break;
      case Op::AddBias:
        accumulate(n.a, g);
        if (nodes_[n.b].grad) accumulate(n.b, g.colwise().sum());
        break;
      case Op::Add:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::Sub:
        accumulate(n.a, g);
        if (nodes_[n.b].grad) accumulate(n.b, -g);
        break;
      case Op::Mul:
        if (nodes_[n.a].grad) accumulate(n.a, g.cwiseProduct(val(n.b)));
        if (nodes_[n.b].grad) accumulate(n.b, g.cwiseProduct(val(n.a)));
        break;
      case Op::Div:
        if (nodes_[n.a].grad) accumulate(n.a, g.cwiseQuotient(val(n.b)));
        if (nodes_[n.b].grad) {
          accumulate(n.b, (-g.array() * val(n.a).array() / val(n.b).array().square()).matrix());
        }
        break;
      case Op::Scale:
        accumulate(n.a, g * n.k0);
        break;
      case Op::ScaleRows:
        accumulate(n.a, n.factors.asDiagonal() * g);
        break;
      case Op::Act: {
        const Mat& x = val(n.a);
        if (n.activation == Activation::Identity) {
          accumulate(n.a, g);
        } else {
          accumulate(n.a, g.cwiseProduct(activate_derivative(n.activation, x)));
        }
        break;
      }
      case Op::ConcatCols: {
        Eigen::Index c = 0;
        for (auto p : n.parts) {
          const Eigen::Index w = val(p).cols();
          if (nodes_[p].grad) accumulate(p, g.middleCols(c, w));
          c += w;
        }
        break;
      }
      case Op::SliceCols: {
        Mat full = Mat::Zero(val(n.a).rows(), val(n.a).cols());
        full.middleCols(static_cast<Eigen::Index>(n.i0), static_cast<Eigen::Index>(n.i1)) = g;
        accumulate(n.a, full);
        break;
      }
      case Op::Min: {
        const Mat& a = val(n.a);
        const Mat& b = val(n.b);
        const auto pick_a = (a.array() <= b.array());
        if (nodes_[n.a].grad) accumulate(n.a, pick_a.select(g.array(), 0.0).matrix());
        if (nodes_[n.b].grad) accumulate(n.b, pick_a.select(0.0, g.array()).matrix());
        break;
      }
      case Op::Sum:
        accumulate(n.a, Mat::Constant(val(n.a).rows(), val(n.a).cols(), g(0, 0)));
        break;
      case Op::Mean: {
        const Mat& x = val(n.a);
        accumulate(n.a, Mat::Constant(x.rows(), x.cols(), g(0, 0) / static_cast<double>(x.size())));
        break;
      }
      case Op::Square:
        accumulate(n.a, 2.0 * g.cwiseProduct(val(n.a)));
        break;
      case Op::Log:
        accumulate(n.a, g.cwiseQuotient(val(n.a)));
        break;
      case Op::RowNorm: {
        const Mat& x = val(n.a);
        Mat d = Mat::Zero(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          const double norm = n.value(r, 0);
          if (norm > 0.0) d.row(r) = x.row(r) * (g(r, 0) / norm);
        }
        accumulate(n.a, d);
        break;
      }
      case Op::RowSum: {
        const Mat& x = val(n.a);
        Mat d(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) d.row(r).setConstant(g(r, 0));
        accumulate(n.a, d);
        break;
      }
      case Op::Clip: {
        const auto inside = (val(n.a).array() > n.k0) && (val(n.a).array() < n.k1);
        accumulate(n.a, inside.select(g.array(), 0.0).matrix());
        break;
      }
    }
  }

  Gradients out;
  for (std::size_t i = 0; i <= output.id; ++i) {
    const Node& n = nodes_[i];
    if (n.op == Op::Param) {
      Mat g = adj[i].size() ? adj[i] : Mat::Zero(n.value.rows(), n.value.cols());
      out.params.emplace(n.name, Array::from_mat(g, n.i0));
    } else if (n.op == Op::Input) {
      out.inputs.emplace(i, adj[i].size() ? adj[i] : Mat::Zero(n.value.rows(), n.value.cols()));
    }
  }
  for (const auto& [name, g] : out.params) {
    if (!all_finite(g.mat())) throw MathError("non-finite gradient for parameter '" + name + "'");
  }
  return out;
}

bool Tape::replay_matches() const {
  for (const Node& n : nodes_) {
    const Mat again = forward(n);
    if (again.rows() != n.value.rows() || again.cols() != n.value.cols()) return false;
    if (!(again.array() == n.value.array()).all()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// MLP

void MlpSpec::validate() const {
  if (layer_widths.size() < 3) {
    throw MathError("MLP needs at least one hidden layer, got widths " + shape_str(layer_widths));
  }
  for (auto w : layer_widths) {
    if (w == 0) throw MathError("MLP widths must be >= 1, got " + shape_str(layer_widths));
  }
}

std::string weight_name(const std::string& prefix, std::size_t layer) {
  return prefix + "/l" + std::to_string(layer) + "/w";
}

std::string bias_name(const std::string& prefix, std::size_t layer) {
  return prefix + "/l" + std::to_string(layer) + "/b";
}

void mlp_init(const MlpSpec& spec, const std::string& prefix, ParamStore& store, std::mt19937_64& rng) {
  spec.validate();
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t in = spec.layer_widths[l];
    const std::size_t out = spec.layer_widths[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Array w({in, out});
    for (auto& x : w.data()) x = u(rng);
    Array b({out});
    for (auto& x : b.data()) x = u(rng);
    store.set(weight_name(prefix, l), std::move(w));
    store.set(bias_name(prefix, l), std::move(b));
  }
}

Mat mlp_forward(const MlpSpec& spec, const ParamStore& store, const std::string& prefix, const Mat& input) {
  if (static_cast<std::size_t>(input.cols()) != spec.input_dim()) {
    throw MathError("mlp_forward(" + prefix + "): input shape " + shape_str(input) +
                    " does not match input width " + std::to_string(spec.input_dim()));
  }
  Mat h = input;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const auto w = store.at(weight_name(prefix, l)).mat();
    const auto b = store.at(bias_name(prefix, l)).mat();
    Mat z = h * w;
    z.rowwise() += b.row(0);
    const bool last = l + 1 == spec.layer_count();
    h = apply(z, last ? spec.output_activation : spec.hidden_activation);
  }
  if (!all_finite(h)) throw MathError("mlp_forward(" + prefix + "): non-finite output");
  return h;
}

Var mlp_forward(const MlpSpec& spec, const ParamStore& store, const std::string& prefix, Tape& tape,
                Var input, bool trainable) {
  const Mat& x = tape.value(input);
  if (static_cast<std::size_t>(x.cols()) != spec.input_dim()) {
    throw MathError("mlp_forward(" + prefix + "): input shape " + shape_str(x) +
                    " does not match input width " + std::to_string(spec.input_dim()));
  }
  Var h = input;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    Var w = tape.param(weight_name(prefix, l), store.at(weight_name(prefix, l)), trainable);
    Var b = tape.param(bias_name(prefix, l), store.at(bias_name(prefix, l)), trainable);
    h = tape.add_bias(tape.matmul(h, w), b);
    const bool last = l + 1 == spec.layer_count();
    const Activation kind = last ? spec.output_activation : spec.hidden_activation;
    if (kind != Activation::Identity) h = tape.act(h, kind);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Adam

double l2_norm(const Array& a) { return a.mat().norm(); }

void adam_step(ParamStore& params, const std::map<std::string, Array>& grads, AdamMoments& moments,
               const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    const Array& p = params.at(name);
    if (p.shape() != g.shape()) {
      throw MathError("adam_step: gradient shape " + shape_str(g.shape()) + " for parameter '" + name +
                      "' of shape " + shape_str(p.shape()));
    }
    if (!all_finite(g.mat())) throw MathError("adam_step: non-finite gradient for parameter '" + name + "'");
  }
  ++moments.step;
  const double t = static_cast<double>(moments.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, g] : grads) {
    Array& p = params.at(name);
    auto [mit, m_new] = moments.m.try_emplace(name, Array(p.shape()));
    auto [vit, v_new] = moments.v.try_emplace(name, Array(p.shape()));
    auto& m = mit->second.data();
    auto& v = vit->second.data();
    auto& x = p.data();
    const auto& gd = g.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      x[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace qfd
