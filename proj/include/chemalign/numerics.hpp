#pragma once

// Dense tensors, a reverse-mode gradient tape and an Adam optimizer.
//
// All values are row-major Eigen matrices. A tensor of rank r is viewed as a
// matrix with shape (prod(shape[0..r-1)), shape[r-1]); scalars are 1x1.

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "chemalign/errors.hpp"

namespace chemalign {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = RowMatrix<double>;

namespace detail {

inline Index shape_rows(const std::vector<Index>& shape) {
  if (shape.size() < 2) return 1;
  return std::accumulate(shape.begin(), shape.end() - 1, Index{1}, std::multiplies<>());
}

inline Index shape_cols(const std::vector<Index>& shape) {
  return shape.empty() ? 1 : shape.back();
}

}  // namespace detail

template <typename Scalar>
class BasicTensor {
 public:
  using MatrixType = RowMatrix<Scalar>;

  BasicTensor() : BasicTensor(std::vector<Index>{}) {}

  explicit BasicTensor(std::vector<Index> shape, bool requires_grad = false)
      : shape_(std::move(shape)),
        data_(MatrixType::Zero(detail::shape_rows(shape_), detail::shape_cols(shape_))),
        requires_grad_(requires_grad) {
    for (Index d : shape_) {
      if (d < 0) throw ContractError("tensor dimension must be non-negative");
    }
  }

  BasicTensor(std::vector<Index> shape, MatrixType values, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::move(values)), requires_grad_(requires_grad) {
    if (data_.rows() != detail::shape_rows(shape_) || data_.cols() != detail::shape_cols(shape_)) {
      throw ContractError("tensor values do not match shape");
    }
  }

  static BasicTensor scalar(Scalar v) {
    MatrixType m(1, 1);
    m(0, 0) = v;
    return BasicTensor({}, std::move(m));
  }

  static BasicTensor from_matrix(MatrixType m, bool requires_grad = false) {
    std::vector<Index> shape{m.rows(), m.cols()};
    return BasicTensor(std::move(shape), std::move(m), requires_grad);
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  Index rank() const { return static_cast<Index>(shape_.size()); }

  MatrixType& matrix() { return data_; }
  const MatrixType& matrix() const { return data_; }

  std::span<Scalar> data() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> data() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Scalar item() const {
    if (data_.size() != 1) throw ContractError("item() requires a single-element tensor");
    return data_(0, 0);
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  template <typename Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(shape_, data_.template cast<Other>(), requires_grad_);
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  std::vector<Index> shape_;
  MatrixType data_;
  bool requires_grad_ = false;
};

using Tensor = BasicTensor<double>;

class GradTape;

// Handle to a node on a GradTape. Cheap to copy; valid while the tape lives
// and has not been reset.
class Var {
 public:
  Var() = default;
  Var(GradTape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const;
  bool requires_grad() const;

  GradTape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  GradTape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Ordered record of primitive applications. Nodes are appended in evaluation
// order, so inputs always precede their consumers.
class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, const Matrix& out_grad)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var leaf(const Tensor& t) { return leaf(t.matrix(), t.requires_grad()); }
  Var leaf(Matrix value, bool requires_grad);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  // Appends an op output. `backward` is only invoked when the output received
  // a gradient and at least one input requires one.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward,
             const char* op_name);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward, const char* op_name);

  const Matrix& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  // Gradient of the last backward root w.r.t. `v`; zeros if no path exists.
  Matrix grad(Var v) const;

  // Adds `g` into the gradient slot of `v` (no-op when `v` needs no gradient).
  void accumulate(Var v, const Matrix& g);

  bool spent() const { return spent_; }
  std::size_t size() const { return nodes_.size(); }
  void reset();

 private:
  friend void backward(GradTape& tape, Var root);

  struct Node {
    Matrix value;
    Matrix grad;  // empty until a gradient arrives
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool spent_ = false;
};

// Runs reverse accumulation from a scalar root. Gradients sum over all paths.
void backward(GradTape& tape, Var root);

// ---- primitives ----------------------------------------------------------

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
// Adds a 1 x cols row vector to every row of `a`.
Var add_row(Var a, Var row);
Var sub(Var a, Var b);
Var multiply(Var a, Var b);
Var scale(Var a, double s);
Var negate(Var a);
// Row lookup: out.row(i) = table.row(ids[i]).
Var gather_rows(Var table, std::span<const int> ids);
// Per-row element selection: out(i, 0) = a(i, cols[i]).
Var pick(Var a, std::span<const int> cols);
Var log_softmax(Var logits);
// Row-wise softmax where query row i (absolute position query_start + i) may
// only attend to key columns j (absolute position key_start + j) with
// pos_q - window < pos_k <= pos_q. Masked entries are exactly zero.
Var causal_softmax(Var scores, Index query_start, Index key_start, Index window);
// Multi-head scaled dot-product attention over a causal sliding window.
// q is m x d (rows at absolute positions query_start..), k and v are n x d
// (rows from key_start..); columns split into `heads` equal blocks. Query at
// position p attends to keys at positions (p - window, p], all of which must
// be present. Only the band is evaluated.
Var windowed_attention(Var q, Var k, Var v, int heads, Index query_start, Index key_start,
                       Index window);
Var sigmoid(Var a);
Var log(Var a);
Var exp(Var a);
// log(1 + e^a), overflow-safe.
Var softplus(Var a);
Var gelu(Var a);
Var sum(Var a);
Var mean(Var a);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, Index start, Index count);
Var slice_cols(Var a, Index start, Index count);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return negate(a); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// ---- value-level helpers ---------------------------------------------------

// Row-wise log-softmax with max subtraction. Throws NumericError on non-finite
// input.
Matrix log_softmax(const Matrix& logits);
Tensor log_softmax(const Tensor& logits);

// log(1 + e^z) without overflow.
double softplus(double z);
// log sigmoid(z) == -softplus(-z).
double log_sigmoid(double z);
double sigmoid(double z);

void require_finite(const Matrix& m, const char* what);

// ---- gradient oracle --------------------------------------------------------

using TapeFunction = std::function<Var(GradTape&, std::span<const Var>)>;

// Central-difference check of the tape gradient of `f` at `params`.
// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
// `params` is restored to its original values before returning.
double grad_check(const TapeFunction& f, std::vector<Tensor>& params, double h = 1e-5);

// Evaluates `f` once and returns the value and gradients for every parameter.
double value_and_grad(const TapeFunction& f, const std::vector<Tensor>& params,
                      std::vector<Matrix>& grads);

// ---- optimizer ---------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  long step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;

  OptimizerState() = default;
  explicit OptimizerState(AdamConfig cfg) : config(cfg) {}
};

// Bias-corrected Adam update in place. Moments are lazily sized on the first
// call; later calls must present the same shapes.
void adam_step(OptimizerState& state, std::span<Tensor> params, std::span<const Matrix> grads);

// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
// norm before clipping.
double clip_grad_norm(std::span<Matrix> grads, double max_norm);

}  // namespace chemalign
