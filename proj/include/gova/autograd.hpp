#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records one forward pass; backward() walks it in reverse.
// Parameters enter as leaves that reference external storage and accumulate
// into an external gradient buffer, so a forward pass never copies weights.

#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gova/error.hpp"

namespace gova::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  /// A recording tape builds the backward graph; a non-recording tape only
  /// evaluates values.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Mat m) {
    Node& n = push();
    n.own = std::move(m);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf referencing `value`; backward accumulates into `*grad_sink` when
  /// non-null (the sink must already be sized like `value`).
  Var parameter(const Mat& value, Mat* grad_sink) {
    Node& n = push();
    n.ref = &value;
    n.needs_grad = record_ && grad_sink != nullptr;
    if (n.needs_grad) {
      n.backward = [grad_sink](Tape& t, int self) { *grad_sink += t.grad(self); };
    }
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ref ? *n.ref : n.own;
  }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  /// Gradient buffer of a node, zero-initialised on first access.
  Mat& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      const Mat& v = value(id);
      n.grad = Mat::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  /// Records a derived node. `backward` receives the tape and node id and
  /// must push gradients into its inputs; it is dropped when no input needs
  /// a gradient or the tape is not recording.
  template <class Fn>
  Var derived(Mat value, std::initializer_list<Var> inputs, Fn&& backward) {
    bool any = false;
    if (record_)
      for (const Var& v : inputs) any |= needs_grad(v.id);
    Node& n = push();
    n.own = std::move(value);
    n.needs_grad = any;
    if (any) n.backward = std::forward<Fn>(backward);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Seeds d(out)/d(out) = 1 for a 1x1 node and propagates to every leaf.
  void backward(Var out) {
    require(record_, ErrorKind::kContract, "backward on a non-recording tape");
    require(out.rows() == 1 && out.cols() == 1, ErrorKind::kContract, "backward needs a scalar output");
    if (!needs_grad(out.id)) return;
    grad(out.id)(0, 0) += 1.0;
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const Mat* ref = nullptr;
    Mat own;
    Mat grad;
    bool needs_grad = false;
    std::function<void(Tape&, int)> backward;
  };
  Node& push() { return nodes_.emplace_back(); }

  bool record_;
  std::deque<Node> nodes_;
};

inline const Mat& Var::value() const { return tape->value(id); }

namespace detail {
inline void accumulate(Tape& t, const Var& v, const Mat& g) {
  if (t.needs_grad(v.id)) t.grad(v.id) += g;
}
inline void same_shape(const Var& a, const Var& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kContract, std::string(op) + ": shape mismatch");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  return a.tape->derived(a.value() + b.value(), {a, b}, [a, b](Tape& t, int s) {
    const Mat g = t.grad(s);
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  return a.tape->derived(a.value() - b.value(), {a, b}, [a, b](Tape& t, int s) {
    const Mat g = t.grad(s);
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, -g);
  });
}

inline Var scale(Var a, double k) {
  return a.tape->derived(a.value() * k, {a}, [a, k](Tape& t, int s) { detail::accumulate(t, a, t.grad(s) * k); });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  return a.tape->derived(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, int s) {
    const Mat g = t.grad(s);
    detail::accumulate(t, a, g.cwiseProduct(b.value()));
    detail::accumulate(t, b, g.cwiseProduct(a.value()));
  });
}

/// a (n x k) * b (k x m).
inline Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), ErrorKind::kContract, "matmul: inner dimension mismatch");
  Mat out = a.value() * b.value();
  return a.tape->derived(std::move(out), {a, b}, [a, b](Tape& t, int s) {
    const Mat& g = t.grad(s);
    if (t.needs_grad(a.id)) t.grad(a.id).noalias() += g * b.value().transpose();
    if (t.needs_grad(b.id)) t.grad(b.id).noalias() += a.value().transpose() * g;
  });
}

/// x (n x in) * W (in x out) + bias (1 x out) broadcast over rows.
inline Var linear(Var x, Var w, Var bias) {
  require(x.cols() == w.rows() && bias.rows() == 1 && bias.cols() == w.cols(), ErrorKind::kContract,
          "linear: shape mismatch");
  Mat out = x.value() * w.value();
  out.rowwise() += bias.value().row(0);
  return x.tape->derived(std::move(out), {x, w, bias}, [x, w, bias](Tape& t, int s) {
    const Mat& g = t.grad(s);
    if (t.needs_grad(x.id)) t.grad(x.id).noalias() += g * w.value().transpose();
    if (t.needs_grad(w.id)) t.grad(w.id).noalias() += x.value().transpose() * g;
    if (t.needs_grad(bias.id)) t.grad(bias.id) += g.colwise().sum();
  });
}

/// Adds a row vector (1 x m) to every row of a (n x m).
inline Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorKind::kContract, "add_row: shape mismatch");
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape->derived(std::move(out), {a, row}, [a, row](Tape& t, int s) {
    const Mat& g = t.grad(s);
    detail::accumulate(t, a, g);
    if (t.needs_grad(row.id)) t.grad(row.id) += g.colwise().sum();
  });
}

inline Var gelu(Var a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  Mat out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); });
  return a.tape->derived(std::move(out), {a}, [a](Tape& t, int s) {
    const Mat& x = a.value();
    Mat d = x.unaryExpr([](double v) {
      const double th = std::tanh(k * (v + c * v * v * v));
      return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * c * v * v);
    });
    detail::accumulate(t, a, t.grad(s).cwiseProduct(d));
  });
}

inline Var sigmoid(Var a) {
  Mat out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  Mat y = out;
  return a.tape->derived(std::move(out), {a}, [a, y = std::move(y)](Tape& t, int s) {
    detail::accumulate(t, a, t.grad(s).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

/// log(x / (1 - x)) elementwise; inputs must lie in (0, 1).
inline Var logit(Var a) {
  Mat out = a.value().unaryExpr([](double x) { return std::log(x / (1.0 - x)); });
  return a.tape->derived(std::move(out), {a}, [a](Tape& t, int s) {
    detail::accumulate(t, a, t.grad(s).cwiseQuotient(a.value().unaryExpr([](double x) { return x * (1.0 - x); })));
  });
}

/// Row-wise layer normalisation with affine gain (1 x d) and bias (1 x d).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  const Mat& xv = x.value();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  require(gain.cols() == d && bias.cols() == d, ErrorKind::kContract, "layer_norm: shape mismatch");
  Mat xhat(n, d);
  Vec inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Mat out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return x.tape->derived(std::move(out), {x, gain, bias},
                         [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int s) {
                           const Mat& g = t.grad(s);
                           if (t.needs_grad(gain.id)) t.grad(gain.id) += g.cwiseProduct(xhat).colwise().sum();
                           if (t.needs_grad(bias.id)) t.grad(bias.id) += g.colwise().sum();
                           if (t.needs_grad(x.id)) {
                             Mat dxhat = g.array().rowwise() * gain.value().row(0).array();
                             Mat& gx = t.grad(x.id);
                             for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                               const double m1 = dxhat.row(r).mean();
                               const double m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(dxhat.cols());
                               gx.row(r).array() += inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                             }
                           }
                         });
}

namespace detail {
inline Mat softmax_rows_value(const Mat& z) {
  Mat p(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    p.row(r) = (z.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}
}  // namespace detail

inline Var softmax_rows(Var z) {
  Mat p = detail::softmax_rows_value(z.value());
  Mat keep = p;
  return z.tape->derived(std::move(p), {z}, [z, p = std::move(keep)](Tape& t, int s) {
    const Mat& g = t.grad(s);
    Mat dz = p.cwiseProduct(g);
    for (Eigen::Index r = 0; r < dz.rows(); ++r) dz.row(r) -= p.row(r) * dz.row(r).sum();
    detail::accumulate(t, z, dz);
  });
}

inline Var log_softmax_rows(Var z) {
  const Mat& zv = z.value();
  Mat out(zv.rows(), zv.cols());
  for (Eigen::Index r = 0; r < zv.rows(); ++r) {
    const double m = zv.row(r).maxCoeff();
    const double lse = m + std::log((zv.row(r).array() - m).exp().sum());
    out.row(r) = zv.row(r).array() - lse;
  }
  Mat p = out.array().exp();
  return z.tape->derived(std::move(out), {z}, [z, p = std::move(p)](Tape& t, int s) {
    const Mat& g = t.grad(s);
    Mat dz = g;
    for (Eigen::Index r = 0; r < dz.rows(); ++r) dz.row(r) -= p.row(r) * g.row(r).sum();
    detail::accumulate(t, z, dz);
  });
}

/// Sum over rows r of weight[r] * H(target[r], softmax(logits[r])), where
/// targets are (soft) distributions over columns. Returns 1x1.
inline Var cross_entropy_rows(Var logits, const Mat& targets, const Vec& row_weights) {
  const Mat& z = logits.value();
  require(targets.rows() == z.rows() && targets.cols() == z.cols() && row_weights.size() == z.rows(),
          ErrorKind::kContract, "cross_entropy_rows: shape mismatch");
  Mat p(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    p.row(r) = (z.row(r).array() - lse).exp();
    if (row_weights(r) != 0.0) total -= row_weights(r) * (targets.row(r).array() * (z.row(r).array() - lse)).sum();
  }
  Mat out(1, 1);
  out(0, 0) = total;
  return logits.tape->derived(std::move(out), {logits}, [logits, p = std::move(p), targets, row_weights](Tape& t, int s) {
    const double g = t.grad(s)(0, 0);
    Mat dz(p.rows(), p.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      dz.row(r) = row_weights(r) * g * (p.row(r) * targets.row(r).sum() - targets.row(r));
    detail::accumulate(t, logits, dz);
  });
}

/// L2-normalises every row.
inline Var normalize_rows(Var a, double eps = 1e-12) {
  const Mat& x = a.value();
  Vec norm(x.rows());
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    norm(r) = std::sqrt(x.row(r).squaredNorm() + eps);
    out.row(r) = x.row(r) / norm(r);
  }
  Mat y = out;
  return a.tape->derived(std::move(out), {a}, [a, y = std::move(y), norm = std::move(norm)](Tape& t, int s) {
    const Mat& g = t.grad(s);
    Mat dx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) dx.row(r) = (g.row(r) - y.row(r) * g.row(r).dot(y.row(r))) / norm(r);
    detail::accumulate(t, a, dx);
  });
}

inline Var sum_all(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->derived(std::move(out), {a}, [a](Tape& t, int s) {
    const double g = t.grad(s)(0, 0);
    detail::accumulate(t, a, Mat::Constant(a.rows(), a.cols(), g));
  });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

/// Rows of `table` selected by `ids` (embedding lookup / row gather).
inline Var gather_rows(Var table, const std::vector<int>& ids) {
  const Mat& tv = table.value();
  Mat out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < tv.rows(), ErrorKind::kContract, "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  return table.tape->derived(std::move(out), {table}, [table, ids](Tape& t, int s) {
    const Mat& g = t.grad(s);
    Mat& gt = t.grad(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorKind::kContract, "slice_rows: out of range");
  return a.tape->derived(a.value().middleRows(start, count), {a}, [a, start, count](Tape& t, int s) {
    t.grad(a.id).middleRows(start, count) += t.grad(s);
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorKind::kContract, "slice_cols: out of range");
  return a.tape->derived(a.value().middleCols(start, count), {a}, [a, start, count](Tape& t, int s) {
    t.grad(a.id).middleCols(start, count) += t.grad(s);
  });
}

inline Var transpose(Var a) {
  return a.tape->derived(a.value().transpose(), {a}, [a](Tape& t, int s) {
    detail::accumulate(t, a, t.grad(s).transpose());
  });
}

inline Var concat_cols(Var a, Var b) {
  require(a.rows() == b.rows(), ErrorKind::kContract, "concat_cols: row mismatch");
  Mat out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.value();
  out.rightCols(b.cols()) = b.value();
  const Eigen::Index na = a.cols(), nb = b.cols();
  return a.tape->derived(std::move(out), {a, b}, [a, b, na, nb](Tape& t, int s) {
    const Mat& g = t.grad(s);
    if (t.needs_grad(a.id)) t.grad(a.id) += g.leftCols(na);
    if (t.needs_grad(b.id)) t.grad(b.id) += g.rightCols(nb);
  });
}

inline Var concat_rows(Var a, Var b) {
  require(a.cols() == b.cols(), ErrorKind::kContract, "concat_rows: column mismatch");
  Mat out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.value();
  out.bottomRows(b.rows()) = b.value();
  const Eigen::Index na = a.rows(), nb = b.rows();
  return a.tape->derived(std::move(out), {a, b}, [a, b, na, nb](Tape& t, int s) {
    const Mat& g = t.grad(s);
    if (t.needs_grad(a.id)) t.grad(a.id) += g.topRows(na);
    if (t.needs_grad(b.id)) t.grad(b.id) += g.bottomRows(nb);
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention. q (n x d), k and v (m x d);
/// `key_valid` (size m or empty) masks keys out. Returns n x d.
inline Var attention(Var q, Var k, Var v, int heads, const std::vector<char>& key_valid = {}) {
  const Eigen::Index n = q.rows(), m = k.rows(), d = q.cols();
  require(k.cols() == d && v.cols() == d && v.rows() == m && heads > 0 && d % heads == 0, ErrorKind::kContract,
          "attention: shape mismatch");
  require(key_valid.empty() || static_cast<Eigen::Index>(key_valid.size()) == m, ErrorKind::kContract,
          "attention: mask length mismatch");
  const Eigen::Index dh = d / heads;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Mat> probs(static_cast<std::size_t>(heads));
  Mat out(n, d);
  for (int h = 0; h < heads; ++h) {
    Mat sc = (q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose()) * scale_f;
    if (!key_valid.empty())
      for (Eigen::Index j = 0; j < m; ++j)
        if (!key_valid[static_cast<std::size_t>(j)]) sc.col(j).setConstant(-1e30);
    Mat p = detail::softmax_rows_value(sc);
    out.middleCols(h * dh, dh).noalias() = p * v.value().middleCols(h * dh, dh);
    probs[static_cast<std::size_t>(h)] = std::move(p);
  }
  return q.tape->derived(std::move(out), {q, k, v}, [q, k, v, heads, dh, scale_f, probs = std::move(probs)](Tape& t, int s) {
    const Mat& g = t.grad(s);
    for (int h = 0; h < heads; ++h) {
      const Mat& p = probs[static_cast<std::size_t>(h)];
      const auto go = g.middleCols(h * dh, dh);
      if (t.needs_grad(v.id)) t.grad(v.id).middleCols(h * dh, dh).noalias() += p.transpose() * go;
      if (!t.needs_grad(q.id) && !t.needs_grad(k.id)) continue;
      Mat dp = go * v.value().middleCols(h * dh, dh).transpose();
      Mat ds = p.cwiseProduct(dp);
      for (Eigen::Index r = 0; r < ds.rows(); ++r) ds.row(r) -= p.row(r) * ds.row(r).sum();
      ds *= scale_f;
      if (t.needs_grad(q.id)) t.grad(q.id).middleCols(h * dh, dh).noalias() += ds * k.value().middleCols(h * dh, dh);
      if (t.needs_grad(k.id)) t.grad(k.id).middleCols(h * dh, dh).noalias() += ds.transpose() * q.value().middleCols(h * dh, dh);
    }
  });
}

// ---------------------------------------------------------------------------
// Box regression terms

/// Forward-mode dual number with four tangent directions; used to
/// differentiate GIoU through the shared geometry template.
struct Dual4 {
  double v = 0.0;
  std::array<double, 4> d{};
  Dual4() = default;
  Dual4(double x) : v(x) {}  // NOLINT(google-explicit-constructor)
  friend Dual4 operator+(Dual4 a, const Dual4& b) {
    a.v += b.v;
    for (int i = 0; i < 4; ++i) a.d[i] += b.d[i];
    return a;
  }
  friend Dual4 operator-(Dual4 a, const Dual4& b) {
    a.v -= b.v;
    for (int i = 0; i < 4; ++i) a.d[i] -= b.d[i];
    return a;
  }
  friend Dual4 operator*(const Dual4& a, const Dual4& b) {
    Dual4 r(a.v * b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual4 operator/(const Dual4& a, const Dual4& b) {
    Dual4 r(a.v / b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
  }
  friend bool operator<(const Dual4& a, const Dual4& b) { return a.v < b.v; }
};
inline const Dual4& max(const Dual4& a, const Dual4& b) { return (a.v < b.v) ? b : a; }
inline const Dual4& min(const Dual4& a, const Dual4& b) { return (b.v < a.v) ? b : a; }

}  // namespace gova::ad
