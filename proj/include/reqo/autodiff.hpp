#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "reqo/common.hpp"
#include "reqo/rng.hpp"

namespace reqo::ad {

using Mat = Eigen::MatrixXd;

// Handle into a Tape. Cheap to copy; only meaningful with its owning tape.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape over dense matrices. Operations record a closure that
// propagates the adjoint to their arguments; backward() replays the tape in
// reverse. Gradients accumulate, so a Var may feed any number of downstream
// ops. One tape per forward pass; tapes are single-threaded.
class Tape {
 public:
  Tape() { nodes_.reserve(1024); }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  const Mat& value(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].value; }
  double scalar(Var v) const { return value(v)(0, 0); }

  // Gradient of the last backward() root w.r.t. v (zero matrix if v was
  // never reached).
  Mat grad(Var v) const {
    const auto& n = nodes_[static_cast<std::size_t>(v.idx)];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var leaf(Mat value, int param_id = -1) {
    nodes_.push_back(Node{std::move(value), Mat(), nullptr, param_id});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var scalar_leaf(double v) { return leaf(Mat::Constant(1, 1, v)); }

  // ---- arithmetic ----

  Var matmul(Var a, Var b) {
    Var out = leaf(value(a) * value(b));
    record(out, [this, a, b, out]() {
      const Mat& g = grad_ref(out);
      grad_buf(a).noalias() += g * value(b).transpose();
      grad_buf(b).noalias() += value(a).transpose() * g;
    });
    return out;
  }

  Var add(Var a, Var b) {
    Var out = leaf(value(a) + value(b));
    record(out, [this, a, b, out]() {
      grad_buf(a) += grad_ref(out);
      grad_buf(b) += grad_ref(out);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    Var out = leaf(value(a) - value(b));
    record(out, [this, a, b, out]() {
      grad_buf(a) += grad_ref(out);
      grad_buf(b) -= grad_ref(out);
    });
    return out;
  }

  Var cwise_mul(Var a, Var b) {
    Var out = leaf(value(a).cwiseProduct(value(b)));
    record(out, [this, a, b, out]() {
      grad_buf(a) += grad_ref(out).cwiseProduct(value(b));
      grad_buf(b) += grad_ref(out).cwiseProduct(value(a));
    });
    return out;
  }

  Var cwise_div(Var a, Var b) {
    Var out = leaf(value(a).cwiseQuotient(value(b)));
    record(out, [this, a, b, out]() {
      const Mat& g = grad_ref(out);
      grad_buf(a) += g.cwiseQuotient(value(b));
      grad_buf(b) -= g.cwiseProduct(value(out)).cwiseQuotient(value(b));
    });
    return out;
  }

  // Broadcasts a 1xC row (typically a bias) over every row of a.
  Var add_rowvec(Var a, Var row) {
    Mat v = value(a);
    v.rowwise() += value(row).row(0);
    Var out = leaf(std::move(v));
    record(out, [this, a, row, out]() {
      const Mat& g = grad_ref(out);
      grad_buf(a) += g;
      grad_buf(row) += g.colwise().sum();
    });
    return out;
  }

  // k*a + c, elementwise.
  Var affine(Var a, double k, double c) {
    Var out = leaf((value(a).array() * k + c).matrix());
    record(out, [this, a, k, out]() { grad_buf(a) += k * grad_ref(out); });
    return out;
  }

  Var scale(Var a, double k) { return affine(a, k, 0.0); }

  Var cwise_mul_const(Var a, Mat c) {
    Var out = leaf(value(a).cwiseProduct(c));
    record(out, [this, a, out, c = std::move(c)]() { grad_buf(a) += grad_ref(out).cwiseProduct(c); });
    return out;
  }

  // m scaled by a 1x1 variable.
  Var mul_scalar_var(Var m, Var s) {
    Var out = leaf(value(m) * value(s)(0, 0));
    record(out, [this, m, s, out]() {
      const Mat& g = grad_ref(out);
      grad_buf(m) += g * value(s)(0, 0);
      grad_buf(s)(0, 0) += g.cwiseProduct(value(m)).sum();
    });
    return out;
  }

  // m with each column scaled by the matching entry of a 1xC row variable.
  Var cwise_mul_rowvec(Var m, Var row) {
    Mat v = value(m);
    v.array().rowwise() *= value(row).row(0).array();
    Var out = leaf(std::move(v));
    record(out, [this, m, row, out]() {
      const Mat& g = grad_ref(out);
      Mat gm = g;
      gm.array().rowwise() *= value(row).row(0).array();
      grad_buf(m) += gm;
      grad_buf(row) += g.cwiseProduct(value(m)).colwise().sum();
    });
    return out;
  }

  // ---- pointwise nonlinearities ----

  Var tanh(Var a) {
    Var out = leaf(value(a).array().tanh().matrix());
    record(out, [this, a, out]() {
      grad_buf(a).array() += grad_ref(out).array() * (1.0 - value(out).array().square());
    });
    return out;
  }

  Var logistic(Var a) {
    Var out = leaf(value(a).unaryExpr([](double x) { return stable_logistic(x); }));
    record(out, [this, a, out]() {
      grad_buf(a).array() += grad_ref(out).array() * value(out).array() * (1.0 - value(out).array());
    });
    return out;
  }

  Var softplus(Var a) {
    Var out = leaf(value(a).unaryExpr([](double x) { return stable_softplus(x); }));
    record(out, [this, a, out]() {
      grad_buf(a).array() +=
          grad_ref(out).array() * value(a).unaryExpr([](double x) { return stable_logistic(x); }).array();
    });
    return out;
  }

  Var relu(Var a) {
    Var out = leaf(value(a).cwiseMax(0.0));
    record(out, [this, a, out]() {
      grad_buf(a).array() += grad_ref(out).array() * (value(a).array() > 0.0).cast<double>();
    });
    return out;
  }

  Var exp(Var a) {
    Var out = leaf(value(a).array().exp().matrix());
    record(out, [this, a, out]() {
      grad_buf(a).array() += grad_ref(out).array() * value(out).array();
    });
    return out;
  }

  Var log(Var a) {
    Var out = leaf(value(a).array().log().matrix());
    record(out, [this, a, out]() {
      grad_buf(a).array() += grad_ref(out).array() / value(a).array();
    });
    return out;
  }

  Var square(Var a) {
    Var out = leaf(value(a).array().square().matrix());
    record(out, [this, a, out]() {
      grad_buf(a).array() += 2.0 * grad_ref(out).array() * value(a).array();
    });
    return out;
  }

  Var clamp_min(Var a, double lo) {
    Var out = leaf(value(a).cwiseMax(lo));
    record(out, [this, a, out, lo]() {
      grad_buf(a).array() += grad_ref(out).array() * (value(a).array() > lo).cast<double>();
    });
    return out;
  }

  // Inverted dropout: keep with probability 1-rate and rescale, so eval-mode
  // forward needs no correction. The mask is drawn from the supplied RNG.
  Var dropout(Var a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    const double keep = 1.0 - rate;
    Mat mask(value(a).rows(), value(a).cols());
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      for (Eigen::Index i = 0; i < mask.rows(); ++i)
        mask(i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
    return cwise_mul_const(a, std::move(mask));
  }

  // ---- reductions ----

  Var sum(Var a) {
    Var out = leaf(Mat::Constant(1, 1, value(a).sum()));
    record(out, [this, a, out]() { grad_buf(a).array() += grad_ref(out)(0, 0); });
    return out;
  }

  Var mean(Var a) {
    const double n = static_cast<double>(value(a).size());
    Var out = leaf(Mat::Constant(1, 1, value(a).sum() / n));
    record(out, [this, a, out, n]() { grad_buf(a).array() += grad_ref(out)(0, 0) / n; });
    return out;
  }

  // ---- shape ops ----

  Var concat_rows(Var a, Var b) {
    Mat v(value(a).rows() + value(b).rows(), value(a).cols());
    v.topRows(value(a).rows()) = value(a);
    v.bottomRows(value(b).rows()) = value(b);
    Var out = leaf(std::move(v));
    record(out, [this, a, b, out]() {
      const Mat& g = grad_ref(out);
      grad_buf(a) += g.topRows(value(a).rows());
      grad_buf(b) += g.bottomRows(value(b).rows());
    });
    return out;
  }

  Var concat_cols(Var a, Var b) {
    Mat v(value(a).rows(), value(a).cols() + value(b).cols());
    v.leftCols(value(a).cols()) = value(a);
    v.rightCols(value(b).cols()) = value(b);
    Var out = leaf(std::move(v));
    record(out, [this, a, b, out]() {
      const Mat& g = grad_ref(out);
      grad_buf(a) += g.leftCols(value(a).cols());
      grad_buf(b) += g.rightCols(value(b).cols());
    });
    return out;
  }

  Var slice_rows(Var a, int start, int count) {
    Var out = leaf(value(a).middleRows(start, count));
    record(out, [this, a, out, start, count]() {
      grad_buf(a).middleRows(start, count) += grad_ref(out);
    });
    return out;
  }

  Var gather_rows(Var a, std::vector<int> idx) {
    Mat v(static_cast<Eigen::Index>(idx.size()), value(a).cols());
    for (std::size_t r = 0; r < idx.size(); ++r) v.row(static_cast<Eigen::Index>(r)) = value(a).row(idx[r]);
    Var out = leaf(std::move(v));
    record(out, [this, a, out, idx = std::move(idx)]() {
      const Mat& g = grad_ref(out);
      Mat& ga = grad_buf(a);
      for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
    });
    return out;
  }

  // ---- graph-attention primitives ----

  // Rowwise per-head dot product: a and b are R x (heads*dh); output is
  // R x heads with out(r,k) = <a(r, k-th block), b(r, k-th block)>.
  Var head_row_dot(Var a, Var b, int heads) {
    const Eigen::Index cols = value(a).cols();
    const Eigen::Index dh = cols / heads;
    Mat v(value(a).rows(), heads);
    for (int k = 0; k < heads; ++k)
      v.col(k) = value(a).middleCols(k * dh, dh).cwiseProduct(value(b).middleCols(k * dh, dh)).rowwise().sum();
    Var out = leaf(std::move(v));
    record(out, [this, a, b, out, heads, dh]() {
      const Mat& g = grad_ref(out);
      Mat& ga = grad_buf(a);
      Mat& gb = grad_buf(b);
      for (int k = 0; k < heads; ++k) {
        ga.middleCols(k * dh, dh).array() +=
            value(b).middleCols(k * dh, dh).array().colwise() * g.col(k).array();
        gb.middleCols(k * dh, dh).array() +=
            value(a).middleCols(k * dh, dh).array().colwise() * g.col(k).array();
      }
    });
    return out;
  }

  // Column-wise softmax within contiguous row segments. seg_starts has S+1
  // entries delimiting each segment's row range; rows must be pre-grouped.
  Var segment_softmax(Var scores, std::vector<int> seg_starts) {
    Mat v = value(scores);
    for (std::size_t s = 0; s + 1 < seg_starts.size(); ++s) {
      const int lo = seg_starts[s], n = seg_starts[s + 1] - seg_starts[s];
      if (n <= 0) continue;
      auto block = v.middleRows(lo, n);
      const Eigen::RowVectorXd mx = block.colwise().maxCoeff();
      block = (block.rowwise() - mx).array().exp().matrix();
      const Eigen::RowVectorXd z = block.colwise().sum();
      block.array().rowwise() /= z.array();
    }
    Var out = leaf(std::move(v));
    record(out, [this, scores, out, seg = std::move(seg_starts)]() {
      const Mat& g = grad_ref(out);
      const Mat& y = value(out);
      Mat& gs = grad_buf(scores);
      for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
        const int lo = seg[s], n = seg[s + 1] - seg[s];
        if (n <= 0) continue;
        const Eigen::RowVectorXd dot = g.middleRows(lo, n).cwiseProduct(y.middleRows(lo, n)).colwise().sum();
        gs.middleRows(lo, n).array() +=
            y.middleRows(lo, n).array() * (g.middleRows(lo, n).rowwise() - dot).array();
      }
    });
    return out;
  }

  // Per-head weighted scatter-add: for edge e with weight alpha(e,k) and
  // value row values(e), adds alpha(e,k) * values(e, k-th block) into
  // out(dst[e], k-th block). This is the attention message aggregation.
  Var head_weighted_scatter(Var alpha, Var values, std::vector<int> dst, int out_rows) {
    const int heads = static_cast<int>(value(alpha).cols());
    const Eigen::Index cols = value(values).cols();
    const Eigen::Index dh = cols / heads;
    Mat v = Mat::Zero(out_rows, cols);
    for (std::size_t e = 0; e < dst.size(); ++e)
      for (int k = 0; k < heads; ++k)
        v.row(dst[e]).segment(k * dh, dh) +=
            value(alpha)(static_cast<Eigen::Index>(e), k) *
            value(values).row(static_cast<Eigen::Index>(e)).segment(k * dh, dh);
    Var out = leaf(std::move(v));
    record(out, [this, alpha, values, out, heads, dh, dst = std::move(dst)]() {
      const Mat& g = grad_ref(out);
      Mat& galpha = grad_buf(alpha);
      Mat& gvalues = grad_buf(values);
      for (std::size_t e = 0; e < dst.size(); ++e) {
        const auto ei = static_cast<Eigen::Index>(e);
        for (int k = 0; k < heads; ++k) {
          const auto gseg = g.row(dst[e]).segment(k * dh, dh);
          galpha(ei, k) += gseg.dot(value(values).row(ei).segment(k * dh, dh));
          gvalues.row(ei).segment(k * dh, dh) += value(alpha)(ei, k) * gseg;
        }
      }
    });
    return out;
  }

  // Elementwise max over contiguous row segments; ties route the gradient to
  // the first maximal row.
  Var segment_max(Var rows, std::vector<int> seg_starts) {
    const auto S = static_cast<Eigen::Index>(seg_starts.size()) - 1;
    const Eigen::Index d = value(rows).cols();
    Mat v(S, d);
    std::vector<int> argmax(static_cast<std::size_t>(S * d));
    for (Eigen::Index s = 0; s < S; ++s) {
      const int lo = seg_starts[static_cast<std::size_t>(s)];
      const int n = seg_starts[static_cast<std::size_t>(s) + 1] - lo;
      for (Eigen::Index j = 0; j < d; ++j) {
        double best = value(rows)(lo, j);
        int best_r = lo;
        for (int r = lo + 1; r < lo + n; ++r) {
          if (value(rows)(r, j) > best) {
            best = value(rows)(r, j);
            best_r = r;
          }
        }
        v(s, j) = best;
        argmax[static_cast<std::size_t>(s * d + j)] = best_r;
      }
    }
    Var out = leaf(std::move(v));
    record(out, [this, rows, out, d, argmax = std::move(argmax)]() {
      const Mat& g = grad_ref(out);
      Mat& gr = grad_buf(rows);
      for (Eigen::Index s = 0; s < g.rows(); ++s)
        for (Eigen::Index j = 0; j < d; ++j)
          gr(argmax[static_cast<std::size_t>(s * d + j)], j) += g(s, j);
    });
    return out;
  }

  // Places each row r of `rows` (R x w) into out[out_row[r], out_col[r] .. +w).
  // Target blocks must be disjoint.
  Var scatter_rows_to_blocks(Var rows, std::vector<int> out_row, std::vector<int> out_col, int out_rows,
                             int out_cols) {
    const Eigen::Index w = value(rows).cols();
    Mat v = Mat::Zero(out_rows, out_cols);
    for (std::size_t r = 0; r < out_row.size(); ++r)
      v.row(out_row[r]).segment(out_col[r], w) = value(rows).row(static_cast<Eigen::Index>(r));
    Var out = leaf(std::move(v));
    record(out, [this, rows, out, w, out_row = std::move(out_row), out_col = std::move(out_col)]() {
      const Mat& g = grad_ref(out);
      Mat& gr = grad_buf(rows);
      for (std::size_t r = 0; r < out_row.size(); ++r)
        gr.row(static_cast<Eigen::Index>(r)) += g.row(out_row[r]).segment(out_col[r], w);
    });
    return out;
  }

  // ---- backward ----

  void backward(Var root) {
    auto& rn = nodes_[static_cast<std::size_t>(root.idx)];
    if (rn.value.rows() != 1 || rn.value.cols() != 1) throw ConfigError("backward() root must be scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    rn.grad = Mat::Constant(1, 1, 1.0);
    for (int i = root.idx; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.size() != 0 && n.backward) n.backward();
    }
  }

  // Visits every parameter leaf that received gradient.
  template <typename Fn>  // Fn(int param_id, const Mat& grad)
  void for_each_param_grad(Fn&& fn) const {
    for (const auto& n : nodes_) {
      if (n.param_id >= 0 && n.grad.size() != 0) fn(n.param_id, n.grad);
    }
  }

  static double stable_logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double stable_softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void()> backward;
    int param_id = -1;
  };

  void record(Var v, std::function<void()> fn) {
    nodes_[static_cast<std::size_t>(v.idx)].backward = std::move(fn);
  }

  const Mat& grad_ref(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].grad; }

  Mat& grad_buf(Var v) {
    auto& n = nodes_[static_cast<std::size_t>(v.idx)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::vector<Node> nodes_;
};

}  // namespace reqo::ad
