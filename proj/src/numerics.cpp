#include "chemalign/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace chemalign {

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw NumericError(std::string("non-finite value in ") + what);
  }
}

// ---- Var / GradTape --------------------------------------------------------

const Matrix& Var::value() const {
  if (tape_ == nullptr) throw StateError("Var is not bound to a tape");
  return tape_->value(*this);
}

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("item() requires a 1x1 value");
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_ != nullptr && tape_->requires_grad(*this); }

Var GradTape::leaf(Matrix value, bool requires_grad) {
  require_finite(value, "leaf");
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var GradTape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn,
                     const char* op_name) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn), op_name);
}

Var GradTape::record(Matrix value, std::span<const Var> inputs, BackwardFn fn,
                     const char* op_name) {
  if (spent_) throw StateError("tape already consumed by backward(); reset it first");
  require_finite(value, op_name);
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw ContractError(std::string(op_name) + ": input from another tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs, needs ? std::move(fn) : nullptr});
  return Var(this, nodes_.size() - 1);
}

Matrix GradTape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void GradTape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_.at(v.id());
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void GradTape::reset() {
  nodes_.clear();
  spent_ = false;
}

void backward(GradTape& tape, Var root) {
  if (root.tape() != &tape) throw ContractError("backward: root belongs to another tape");
  if (tape.spent_) throw StateError("backward: tape already spent");
  const Matrix& rv = tape.value(root);
  if (rv.size() != 1) throw ContractError("backward: root must be a scalar");
  tape.spent_ = true;
  auto& nodes = tape.nodes_;
  if (!nodes[root.id()].requires_grad) return;
  nodes[root.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    auto& node = nodes[i];
    if (!node.backward || node.grad.size() == 0) continue;
    node.backward(tape, node.grad);
  }
}

// ---- primitives ---------------------------------------------------------------

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) throw ContractError("matmul: inner dimensions differ");
  Matrix out = av * bv;
  return a.tape()->record(
      std::move(out), {a, b},
      [a, b](GradTape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
        if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
      },
      "matmul");
}

Var matmul_nt(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) throw ContractError("matmul_nt: inner dimensions differ");
  Matrix out = av * bv.transpose();
  return a.tape()->record(
      std::move(out), {a, b},
      [a, b](GradTape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g * t.value(b));
        if (t.requires_grad(b)) t.accumulate(b, g.transpose() * t.value(a));
      },
      "matmul_nt");
}

Var transpose(Var a) {
  Matrix out = a.value().transpose();
  return a.tape()->record(
      std::move(out), {a},
      [a](GradTape& t, const Matrix& g) { t.accumulate(a, g.transpose()); }, "transpose");
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value() + b.value();
  return a.tape()->record(
      std::move(out), {a, b},
      [a, b](GradTape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
      },
      "add");
}

Var add_row(Var a, Var row) {
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != a.cols()) throw ContractError("add_row: bad row shape");
  Matrix out = a.value().rowwise() + rv.row(0);
  return a.tape()->record(
      std::move(out), {a, row},
      [a, row](GradTape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
      },
      "add_row");
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value() - b.value();
  return a.tape()->record(
      std::move(out), {a, b},
      [a, b](GradTape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(b)) t.accumulate(b, -g);
      },
      "sub");
}

Var multiply(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "multiply");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape()->record(
      std::move(out), {a, b},
      [a, b](GradTape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
        if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
      },
      "multiply");
}

Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  return a.tape()->record(
      std::move(out), {a}, [a, s](GradTape& t, const Matrix& g) { t.accumulate(a, g * s); },
      "scale");
}

Var negate(Var a) { return scale(a, -1.0); }

Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw ContractError("gather_rows: id out of range");
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return table.tape()->record(
      std::move(out), {table},
      [table, saved = std::move(saved)](GradTape& t, const Matrix& g) {
        Matrix dt = Matrix::Zero(t.value(table).rows(), t.value(table).cols());
        for (std::size_t i = 0; i < saved.size(); ++i) dt.row(saved[i]) += g.row(static_cast<Index>(i));
        t.accumulate(table, dt);
      },
      "gather_rows");
}

Var pick(Var a, std::span<const int> cols) {
  const Matrix& av = a.value();
  if (static_cast<Index>(cols.size()) != av.rows()) throw ContractError("pick: one column per row");
  Matrix out(av.rows(), 1);
  for (Index r = 0; r < av.rows(); ++r) {
    int c = cols[static_cast<std::size_t>(r)];
    if (c < 0 || c >= av.cols()) throw ContractError("pick: column out of range");
    out(r, 0) = av(r, c);
  }
  std::vector<int> saved(cols.begin(), cols.end());
  return a.tape()->record(
      std::move(out), {a},
      [a, saved = std::move(saved)](GradTape& t, const Matrix& g) {
        Matrix da = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
        for (std::size_t r = 0; r < saved.size(); ++r) da(static_cast<Index>(r), saved[r]) = g(static_cast<Index>(r), 0);
        t.accumulate(a, da);
      },
      "pick");
}

Matrix log_softmax(const Matrix& logits) {
  if (logits.cols() < 1) throw ContractError("log_softmax: need at least one column");
  require_finite(logits, "log_softmax input");
  Matrix out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    auto shifted = (logits.row(r).array() - mx).eval();
    const double lse = std::log(shifted.exp().sum());
    out.row(r) = (shifted - lse).matrix();
  }
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  return Tensor(logits.shape(), log_softmax(logits.matrix()), logits.requires_grad());
}

Var log_softmax(Var logits) {
  Matrix out = log_softmax(logits.value());
  GradTape* tape = logits.tape();
  const std::size_t self = tape->size();
  return tape->record(
      std::move(out), {logits},
      [logits, self](GradTape& t, const Matrix& g) {
        const Matrix& y = t.value(Var(&t, self));
        Matrix p = y.array().exp();
        Eigen::VectorXd gs = g.rowwise().sum();
        Matrix d = g - (p.array().colwise() * gs.array()).matrix();
        t.accumulate(logits, d);
      },
      "log_softmax");
}

Var causal_softmax(Var scores, Index query_start, Index key_start, Index window) {
  if (window < 1) throw ContractError("causal_softmax: window must be positive");
  const Matrix& s = scores.value();
  Matrix out = Matrix::Zero(s.rows(), s.cols());
  for (Index i = 0; i < s.rows(); ++i) {
    const Index pos = query_start + i;
    const Index lo = std::max<Index>(0, pos - window + 1 - key_start);
    const Index hi = std::min<Index>(s.cols() - 1, pos - key_start);
    if (hi < lo) throw ContractError("causal_softmax: query row sees no keys");
    const Index n = hi - lo + 1;
    auto seg = s.row(i).segment(lo, n);
    const double mx = seg.maxCoeff();
    Eigen::RowVectorXd e = (seg.array() - mx).exp();
    out.row(i).segment(lo, n) = e / e.sum();
  }
  GradTape* tape = scores.tape();
  const std::size_t self = tape->size();
  return tape->record(
      std::move(out), {scores},
      [scores, self](GradTape& t, const Matrix& g) {
        const Matrix& a = t.value(Var(&t, self));
        Eigen::VectorXd dots = g.cwiseProduct(a).rowwise().sum();
        Matrix d = a.cwiseProduct((g.colwise() - dots));
        t.accumulate(scores, d);
      },
      "causal_softmax");
}

Var windowed_attention(Var q, Var k, Var v, int heads, Index query_start, Index key_start,
                       Index window) {
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  if (heads < 1 || Q.cols() % heads != 0) throw ContractError("windowed_attention: bad head count");
  if (K.cols() != Q.cols() || V.cols() != Q.cols() || K.rows() != V.rows()) {
    throw ContractError("windowed_attention: q, k, v shapes disagree");
  }
  if (window < 1) throw ContractError("windowed_attention: window must be positive");
  const Index m = Q.rows();
  const Index n = K.rows();
  const Index dh = Q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (m > 0 && query_start + m - 1 > key_start + n - 1) {
    throw ContractError("windowed_attention: keys end before the last query");
  }
  // Row i attends to key columns [lo[i], lo[i] + span[i]).
  std::vector<Index> lo(static_cast<std::size_t>(m));
  std::vector<Index> span(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) {
    const Index pos = query_start + i;
    const Index first_pos = std::max<Index>(0, pos - window + 1);
    if (first_pos < key_start) throw ContractError("windowed_attention: keys start too late");
    lo[i] = first_pos - key_start;
    span[i] = pos - first_pos + 1;
  }
  // Attention weights per (row, head), stored densely in m x (heads * window).
  auto weights = std::make_shared<Matrix>(Matrix::Zero(m, heads * window));
  Matrix out = Matrix::Zero(m, Q.cols());
  for (Index i = 0; i < m; ++i) {
    for (int h = 0; h < heads; ++h) {
      auto qi = Q.row(i).segment(h * dh, dh);
      auto w = weights->row(i).segment(h * window, span[i]);
      for (Index j = 0; j < span[i]; ++j) w(j) = scale * qi.dot(K.row(lo[i] + j).segment(h * dh, dh));
      w = (w.array() - w.maxCoeff()).exp();
      w /= w.sum();
      auto oi = out.row(i).segment(h * dh, dh);
      for (Index j = 0; j < span[i]; ++j) oi += w(j) * V.row(lo[i] + j).segment(h * dh, dh);
    }
  }
  GradTape* tape = q.tape();
  return tape->record(
      std::move(out), {q, k, v},
      [q, k, v, heads, window, dh, scale, weights, lo = std::move(lo), span = std::move(span)](
          GradTape& t, const Matrix& g) {
        const Matrix& Q = t.value(q);
        const Matrix& K = t.value(k);
        const Matrix& V = t.value(v);
        Matrix dq = Matrix::Zero(Q.rows(), Q.cols());
        Matrix dk = Matrix::Zero(K.rows(), K.cols());
        Matrix dv = Matrix::Zero(V.rows(), V.cols());
        Eigen::RowVectorXd da(window);
        for (Index i = 0; i < Q.rows(); ++i) {
          for (int h = 0; h < heads; ++h) {
            auto gi = g.row(i).segment(h * dh, dh);
            auto w = weights->row(i).segment(h * window, span[i]);
            for (Index j = 0; j < span[i]; ++j) {
              da(j) = gi.dot(V.row(lo[i] + j).segment(h * dh, dh));
              dv.row(lo[i] + j).segment(h * dh, dh) += w(j) * gi;
            }
            const double dot = w.dot(da.head(span[i]));
            auto qi = Q.row(i).segment(h * dh, dh);
            auto dqi = dq.row(i).segment(h * dh, dh);
            for (Index j = 0; j < span[i]; ++j) {
              const double ds = scale * w(j) * (da(j) - dot);
              dqi += ds * K.row(lo[i] + j).segment(h * dh, dh);
              dk.row(lo[i] + j).segment(h * dh, dh) += ds * qi;
            }
          }
        }
        t.accumulate(q, dq);
        t.accumulate(k, dk);
        t.accumulate(v, dv);
      },
      "windowed_attention");
}

Var sigmoid(Var a) {
  Matrix out = a.value().unaryExpr([](double z) { return sigmoid(z); });
  GradTape* tape = a.tape();
  const std::size_t self = tape->size();
  return tape->record(
      std::move(out), {a},
      [a, self](GradTape& t, const Matrix& g) {
        const Matrix& y = t.value(Var(&t, self));
        t.accumulate(a, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
      },
      "sigmoid");
}

Var log(Var a) {
  if ((a.value().array() <= 0.0).any()) throw NumericError("log of non-positive value");
  Matrix out = a.value().array().log();
  return a.tape()->record(
      std::move(out), {a},
      [a](GradTape& t, const Matrix& g) { t.accumulate(a, g.cwiseQuotient(t.value(a))); }, "log");
}

Var exp(Var a) {
  Matrix out = a.value().array().exp();
  GradTape* tape = a.tape();
  const std::size_t self = tape->size();
  return tape->record(
      std::move(out), {a},
      [a, self](GradTape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseProduct(t.value(Var(&t, self))));
      },
      "exp");
}

Var softplus(Var a) {
  Matrix out = a.value().unaryExpr([](double z) { return softplus(z); });
  return a.tape()->record(
      std::move(out), {a},
      [a](GradTape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseProduct(t.value(a).unaryExpr([](double z) { return sigmoid(z); })));
      },
      "softplus");
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double th = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

}  // namespace

Var gelu(Var a) {
  Matrix out = a.value().unaryExpr(&gelu_value);
  return a.tape()->record(
      std::move(out), {a},
      [a](GradTape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseProduct(t.value(a).unaryExpr(&gelu_grad)));
      },
      "gelu");
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(
      std::move(out), {a},
      [a](GradTape& t, const Matrix& g) {
        t.accumulate(a, Matrix::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0)));
      },
      "sum");
}

Var mean(Var a) {
  const Index n = a.value().size();
  if (n == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ContractError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index c = 0;
  for (const Var& p : parts) {
    offsets.push_back(c);
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape()->record(
      std::move(out), parts,
      [saved, offsets](GradTape& t, const Matrix& g) {
        for (std::size_t i = 0; i < saved.size(); ++i) {
          if (t.requires_grad(saved[i])) {
            t.accumulate(saved[i], g.middleCols(offsets[i], saved[i].cols()));
          }
        }
      },
      "concat_cols");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ContractError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index r = 0;
  for (const Var& p : parts) {
    offsets.push_back(r);
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape()->record(
      std::move(out), parts,
      [saved, offsets](GradTape& t, const Matrix& g) {
        for (std::size_t i = 0; i < saved.size(); ++i) {
          if (t.requires_grad(saved[i])) {
            t.accumulate(saved[i], g.middleRows(offsets[i], saved[i].rows()));
          }
        }
      },
      "concat_rows");
}

Var slice_rows(Var a, Index start, Index count) {
  const Matrix& av = a.value();
  if (start < 0 || count < 0 || start + count > av.rows()) throw ContractError("slice_rows: out of range");
  if (start == 0 && count == av.rows()) return a;
  Matrix out = av.middleRows(start, count);
  return a.tape()->record(
      std::move(out), {a},
      [a, start, count](GradTape& t, const Matrix& g) {
        Matrix d = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
        d.middleRows(start, count) = g;
        t.accumulate(a, d);
      },
      "slice_rows");
}

Var slice_cols(Var a, Index start, Index count) {
  const Matrix& av = a.value();
  if (start < 0 || count < 0 || start + count > av.cols()) throw ContractError("slice_cols: out of range");
  if (start == 0 && count == av.cols()) return a;
  Matrix out = av.middleCols(start, count);
  return a.tape()->record(
      std::move(out), {a},
      [a, start, count](GradTape& t, const Matrix& g) {
        Matrix d = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
        d.middleCols(start, count) = g;
        t.accumulate(a, d);
      },
      "slice_cols");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = x.value();
  const Index cols = xv.cols();
  if (gain.rows() != 1 || gain.cols() != cols || bias.rows() != 1 || bias.cols() != cols) {
    throw ContractError("layer_norm: gain/bias must be 1 x cols");
  }
  Matrix xhat(xv.rows(), cols);
  Eigen::VectorXd inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    auto centered = (xv.row(r).array() - mu).eval();
    const double var = centered.square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (centered * inv_std(r)).matrix();
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape()->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](GradTape& t,
                                                                            const Matrix& g) {
        if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (t.requires_grad(x)) {
          Matrix dxhat = (g.array().rowwise() * t.value(gain).row(0).array()).matrix();
          const double n = static_cast<double>(dxhat.cols());
          Eigen::VectorXd m1 = dxhat.rowwise().sum() / n;
          Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / n;
          Matrix dx = dxhat;
          dx.colwise() -= m1;
          dx -= (xhat.array().colwise() * m2.array()).matrix();
          dx = (dx.array().colwise() * inv_std.array()).matrix();
          t.accumulate(x, dx);
        }
      },
      "layer_norm");
}

// ---- scalar helpers -------------------------------------------------------------

double softplus(double z) {
  if (z > 0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

double log_sigmoid(double z) { return -softplus(-z); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// ---- gradient oracle -----------------------------------------------------------

double value_and_grad(const TapeFunction& f, const std::vector<Tensor>& params,
                      std::vector<Matrix>& grads) {
  GradTape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p.matrix(), true));
  Var out = f(tape, leaves);
  const double value = out.item();
  if (!std::isfinite(value)) throw NumericError("function value is not finite");
  backward(tape, out);
  grads.clear();
  for (const Var& v : leaves) grads.push_back(tape.grad(v));
  return value;
}

namespace {

double evaluate(const TapeFunction& f, const std::vector<Tensor>& params) {
  GradTape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p.matrix(), false));
  const double v = f(tape, leaves).item();
  if (!std::isfinite(v)) throw NumericError("function value is not finite");
  return v;
}

}  // namespace

double grad_check(const TapeFunction& f, std::vector<Tensor>& params, double h) {
  if (!(h > 0.0)) throw ContractError("grad_check: step h must be positive");
  std::vector<Matrix> analytic;
  value_and_grad(f, params, analytic);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = evaluate(f, params);
      data[i] = orig - h;
      const double down = evaluate(f, params);
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p].data()[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

// ---- optimizer ------------------------------------------------------------------

void adam_step(OptimizerState& state, std::span<Tensor> params, std::span<const Matrix> grads) {
  if (params.size() != grads.size()) throw ContractError("adam_step: params/grads count mismatch");
  if (state.step < 0) throw ContractError("adam_step: negative step counter");
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.push_back(Matrix::Zero(p.matrix().rows(), p.matrix().cols()));
      state.second_moment.push_back(Matrix::Zero(p.matrix().rows(), p.matrix().cols()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks a different parameter count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& p = params[i].matrix();
    if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols() ||
        state.first_moment[i].rows() != p.rows() || state.first_moment[i].cols() != p.cols()) {
      throw ContractError("adam_step: shape mismatch at parameter " + std::to_string(i));
    }
  }
  const AdamConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = c.beta1 * m + (1.0 - c.beta1) * grads[i];
    v = c.beta2 * v + (1.0 - c.beta2) * grads[i].cwiseAbs2();
    auto update = (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.epsilon);
    params[i].matrix().array() -= c.learning_rate * update;
  }
}

double clip_grad_norm(std::span<Matrix> grads, double max_norm) {
  double sq = 0.0;
  for (const Matrix& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Matrix& g : grads) g *= s;
  }
  return norm;
}

}  // namespace chemalign
