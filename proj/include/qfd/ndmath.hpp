#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace qfd {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

/// Raised by any math routine that would otherwise produce or accept a
/// malformed or non-finite value.
class MathError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const std::vector<std::size_t>& shape);
std::string shape_str(const Mat& m);

bool all_finite(const Mat& m);

/// Dense row-major array of doubles with an explicit shape.
///
/// Rank 0 is a scalar, rank 1 a vector and rank 2 a matrix; the MLP code only
/// ever needs those, but any rank round-trips through checkpoints.
class Array {
 public:
  Array() = default;
  explicit Array(std::vector<std::size_t> shape, double fill = 0.0);
  Array(std::vector<std::size_t> shape, std::vector<double> data);

  static Array scalar(double v) { return Array({}, std::vector<double>{v}); }
  static Array from_mat(const Mat& m, std::size_t rank = 2);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Matrix view: rank 2 as-is, rank 1 as a single row, rank 0 as 1x1.
  std::size_t rows() const;
  std::size_t cols() const;
  Eigen::Map<const Mat> mat() const;
  Eigen::Map<Mat> mat();

  bool operator==(const Array& other) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Flat, name-ordered collection of learnable arrays.
class ParamStore {
 public:
  void set(const std::string& name, Array value);
  const Array& at(const std::string& name) const;
  Array& at(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  /// Names that start with `prefix`, in lexicographic order.
  std::vector<std::string> names(const std::string& prefix = "") const;

  const std::map<std::string, Array>& all() const { return params_; }
  std::size_t scalar_count() const;

  bool operator==(const ParamStore& other) const = default;

 private:
  std::map<std::string, Array> params_;
};

// ---------------------------------------------------------------------------
// Activations

enum class Activation { Identity, ReLU, Mish, GeLU, Softplus };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

/// Element-wise on matrices; the scalar overloads evaluate a 1x1 matrix.
Mat activate(Activation kind, const Mat& x);
Mat activate_derivative(Activation kind, const Mat& x);
double activate(Activation kind, double x);
double activate_derivative(Activation kind, double x);

// ---------------------------------------------------------------------------
// Tape

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

struct Gradients {
  std::map<std::string, Array> params;
  std::map<std::size_t, Mat> inputs;

  const Mat& input(Var v) const;
  const Array& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return params.count(name) != 0; }
};

/// Reverse-mode recording of matrix-level primitives.
///
/// Every node holds its forward value; `backward` walks nodes in reverse
/// insertion order, which is a valid reverse topological order because a node
/// can only reference nodes recorded before it. Adjoints are computed only
/// for nodes that depend on a trainable leaf.
class Tape {
 public:
  enum class Op {
    Constant, Input, Param,
    MatMul, AddBias, Add, Sub, Mul, Div, Scale, ScaleRows,
    Act, ConcatCols, SliceCols, Min, Sum, Mean, Square, Log, RowNorm, RowSum, Clip
  };

  Var constant(Mat value);
  /// Leaf whose gradient is reported in Gradients::inputs.
  Var input(Mat value);
  /// Leaf bound to a named parameter. Recording the same name twice returns
  /// the first node so gradients accumulate across reuse.
  Var param(const std::string& name, const Array& value, bool trainable = true);

  Var matmul(Var x, Var w);
  Var add_bias(Var x, Var bias);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double k);
  Var scale_rows(Var a, const Vec& factors);
  Var act(Var a, Activation kind);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_cols(Var a, std::size_t start, std::size_t count);
  /// Elementwise minimum; ties select the first argument.
  Var min(Var a, Var b);
  Var sum(Var a);
  Var mean(Var a);
  Var square(Var a);
  Var log(Var a);
  Var row_norm(Var a);
  Var row_sum(Var a);
  /// Clamp to [lo, hi]; the derivative is zero outside the open interval.
  Var clip(Var a, double lo, double hi);

  const Mat& value(Var v) const;
  double scalar(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  bool requires_grad(Var v) const;

  Gradients backward(Var output, const Mat& seed) const;
  /// Seed of ones; `output` is normally a 1x1 loss.
  Gradients backward(Var output) const;
  Gradients backward() const;

  /// Recomputes every non-leaf node from its parents and reports whether all
  /// recomputed values match the recorded ones bit for bit.
  bool replay_matches() const;

 private:
  struct Node {
    Op op = Op::Constant;
    std::size_t a = 0;
    std::size_t b = 0;
    std::vector<std::size_t> parts;
    Mat value;
    bool grad = false;
    std::string name;
    Activation activation = Activation::Identity;
    double k0 = 0.0;
    double k1 = 0.0;
    std::size_t i0 = 0;
    std::size_t i1 = 0;
    Vec factors;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  Mat forward(const Node& n) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_index_;
};

// ---------------------------------------------------------------------------
// MLP

struct MlpSpec {
  std::vector<std::size_t> layer_widths;
  Activation hidden_activation = Activation::ReLU;
  Activation output_activation = Activation::Identity;

  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t output_dim() const { return layer_widths.back(); }
  std::size_t layer_count() const { return layer_widths.size() - 1; }
  void validate() const;
};

std::string weight_name(const std::string& prefix, std::size_t layer);
std::string bias_name(const std::string& prefix, std::size_t layer);

/// Adds `prefix/l{i}/w` and `prefix/l{i}/b` with uniform(-1/sqrt(fan_in),
/// 1/sqrt(fan_in)) entries.
void mlp_init(const MlpSpec& spec, const std::string& prefix, ParamStore& store,
              std::mt19937_64& rng);

/// Untaped forward pass over a batch (rows are samples).
Mat mlp_forward(const MlpSpec& spec, const ParamStore& store, const std::string& prefix,
                const Mat& input);

/// Taped forward pass. Parameters are trainable leaves unless `trainable`
/// is false, in which case they are recorded as constants.
Var mlp_forward(const MlpSpec& spec, const ParamStore& store, const std::string& prefix,
                Tape& tape, Var input, bool trainable = true);

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::map<std::string, Array> m;
  std::map<std::string, Array> v;
  long step = 0;
};

/// One bias-corrected Adam update for every parameter named in `grads`.
/// Throws MathError naming the first parameter with a non-finite gradient;
/// nothing is modified in that case.
void adam_step(ParamStore& params, const std::map<std::string, Array>& grads,
               AdamMoments& moments, const AdamConfig& cfg);

double l2_norm(const Array& a);

}  // namespace qfd
