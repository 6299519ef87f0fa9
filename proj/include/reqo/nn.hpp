#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "reqo/autodiff.hpp"
#include "reqo/common.hpp"
#include "reqo/rng.hpp"

namespace reqo::nn {

using ad::Mat;
using ad::Tape;
using ad::Var;

// Flat, ordered collection of named parameter tensors. Names and order are
// deterministic for a given model configuration, which is what makes the
// checkpoint format and the optimizer state line up.
class ParamStore {
 public:
  int add(std::string name, Mat value) {
    tensors_.push_back(std::move(value));
    names_.push_back(std::move(name));
    return static_cast<int>(tensors_.size()) - 1;
  }

  int size() const { return static_cast<int>(tensors_.size()); }
  Mat& value(int id) { return tensors_[static_cast<std::size_t>(id)]; }
  const Mat& value(int id) const { return tensors_[static_cast<std::size_t>(id)]; }
  const std::string& name(int id) const { return names_[static_cast<std::size_t>(id)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
    return n;
  }

  // Puts a parameter on a tape as a leaf tagged with its id, so gradients can
  // be routed back after backward().
  Var on(Tape& tape, int id) const { return tape.leaf(value(id), id); }

 private:
  std::vector<Mat> tensors_;
  std::vector<std::string> names_;
};

// Per-parameter gradient accumulator shaped like a ParamStore.
class GradBuffer {
 public:
  explicit GradBuffer(const ParamStore& store) {
    grads_.reserve(static_cast<std::size_t>(store.size()));
    for (int i = 0; i < store.size(); ++i)
      grads_.push_back(Mat::Zero(store.value(i).rows(), store.value(i).cols()));
  }

  void accumulate_from(const Tape& tape) {
    tape.for_each_param_grad([this](int id, const Mat& g) { grads_[static_cast<std::size_t>(id)] += g; });
  }

  void add(const GradBuffer& other) {
    for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += other.grads_[i];
  }

  void zero() {
    for (auto& g : grads_) g.setZero();
  }

  const Mat& at(int id) const { return grads_[static_cast<std::size_t>(id)]; }
  Mat& at(int id) { return grads_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Mat> grads_;
};

inline Mat xavier_uniform(int rows, int cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-limit, limit);
  return m;
}

// y = x * W (+ b). W is (in x out), b is (1 x out).
struct Linear {
  int w = -1;
  int b = -1;  // -1 = no bias
};

inline Linear make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                          bool bias = true) {
  Linear l;
  l.w = store.add(name + ".w", xavier_uniform(in, out, rng));
  if (bias) l.b = store.add(name + ".b", Mat::Zero(1, out));
  return l;
}

inline Var apply_linear(Tape& tape, const ParamStore& store, const Linear& l, Var x) {
  Var y = tape.matmul(x, store.on(tape, l.w));
  if (l.b >= 0) y = tape.add_rowvec(y, store.on(tape, l.b));
  return y;
}

enum class FinalSquash { none, logistic, softplus };

// Fully connected stack: tanh between layers, configurable squash after the
// last one. Optional inverted dropout on hidden activations (training only).
struct Mlp {
  std::vector<Linear> layers;
  FinalSquash squash = FinalSquash::none;
};

inline Mlp make_mlp(ParamStore& store, const std::string& name, int in, const std::vector<int>& widths,
                    FinalSquash squash, Rng& rng) {
  Mlp mlp;
  mlp.squash = squash;
  int prev = in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    mlp.layers.push_back(make_linear(store, name + ".fc" + std::to_string(i), prev, widths[i], rng));
    prev = widths[i];
  }
  return mlp;
}

inline Var apply_mlp(Tape& tape, const ParamStore& store, const Mlp& mlp, Var x, double dropout_rate = 0.0,
                     Rng* dropout_rng = nullptr) {
  Var h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    h = apply_linear(tape, store, mlp.layers[i], h);
    if (i + 1 < mlp.layers.size()) {
      h = tape.tanh(h);
      if (dropout_rate > 0.0 && dropout_rng != nullptr) h = tape.dropout(h, dropout_rate, *dropout_rng);
    }
  }
  switch (mlp.squash) {
    case FinalSquash::none: break;
    case FinalSquash::logistic: h = tape.logistic(h); break;
    case FinalSquash::softplus: h = tape.softplus(h); break;
  }
  return h;
}

// First-order adaptive-moment optimizer with bias correction.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (int i = 0; i < store.size(); ++i) {
      m_.push_back(Mat::Zero(store.value(i).rows(), store.value(i).cols()));
      v_.push_back(Mat::Zero(store.value(i).rows(), store.value(i).cols()));
    }
  }

  void step(ParamStore& store, const GradBuffer& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (int i = 0; i < store.size(); ++i) {
      const Mat& g = grads.at(i);
      auto& m = m_[static_cast<std::size_t>(i)];
      auto& v = v_[static_cast<std::size_t>(i)];
      m = beta1_ * m + (1.0 - beta1_) * g;
      v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
      store.value(i).array() -=
          lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

}  // namespace reqo::nn
