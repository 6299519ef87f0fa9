#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <vector>

#include "reqo/autodiff.hpp"
#include "reqo/nn.hpp"

namespace reqo::testutil {

inline void expect_close(double analytic, double fd, double rel_tol, double abs_tol,
                         const std::string& where) {
  const double err = std::abs(analytic - fd);
  const double bound = rel_tol * std::max(std::abs(analytic), std::abs(fd)) + abs_tol;
  EXPECT_LE(err, bound) << where << ": analytic " << analytic << " vs finite-difference " << fd;
}

// Central-difference check of a scalar function of leaf matrices.
// build(tape, vars) must return a 1x1 Var.
inline void check_input_gradients(
    const std::vector<ad::Mat>& inputs,
    const std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>& build, double rel_tol = 1e-4,
    double abs_tol = 1e-8, double h = 1e-5) {
  auto eval = [&](const std::vector<ad::Mat>& xs) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x));
    return tape.scalar(build(tape, vars));
  };

  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  tape.backward(build(tape, vars));
  std::vector<ad::Mat> grads;
  for (const auto& v : vars) grads.push_back(tape.grad(v));

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index r = 0; r < inputs[i].rows(); ++r) {
      for (Eigen::Index c = 0; c < inputs[i].cols(); ++c) {
        std::vector<ad::Mat> plus = inputs, minus = inputs;
        plus[i](r, c) += h;
        minus[i](r, c) -= h;
        const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
        expect_close(grads[i](r, c), fd, rel_tol, abs_tol,
                     "input " + std::to_string(i) + "(" + std::to_string(r) + "," + std::to_string(c) + ")");
      }
    }
  }
}

// Central-difference check against every parameter in the store (optionally a
// seeded sample of coordinates per parameter, for larger models).
inline void check_param_gradients(nn::ParamStore& store,
                                  const std::function<ad::Var(ad::Tape&, const nn::ParamStore&)>& build,
                                  double rel_tol = 1e-4, double abs_tol = 1e-8, double h = 1e-5,
                                  int coords_per_param = -1, Rng* rng = nullptr) {
  auto eval = [&]() {
    ad::Tape tape;
    return tape.scalar(build(tape, store));
  };

  nn::GradBuffer grads(store);
  {
    ad::Tape tape;
    tape.backward(build(tape, store));
    grads.accumulate_from(tape);
  }

  for (int id = 0; id < store.size(); ++id) {
    ad::Mat& m = store.value(id);
    std::vector<std::pair<Eigen::Index, Eigen::Index>> coords;
    if (coords_per_param < 0 || m.size() <= coords_per_param) {
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) coords.emplace_back(r, c);
    } else {
      for (int k = 0; k < coords_per_param; ++k)
        coords.emplace_back(static_cast<Eigen::Index>(rng->uniform_int(0, m.rows() - 1)),
                            static_cast<Eigen::Index>(rng->uniform_int(0, m.cols() - 1)));
    }
    for (const auto& [r, c] : coords) {
      const double orig = m(r, c);
      m(r, c) = orig + h;
      const double fp = eval();
      m(r, c) = orig - h;
      const double fm = eval();
      m(r, c) = orig;
      const double fd = (fp - fm) / (2.0 * h);
      expect_close(grads.at(id)(r, c), fd, rel_tol, abs_tol,
                   store.name(id) + "(" + std::to_string(r) + "," + std::to_string(c) + ")");
    }
  }
}

inline ad::Mat random_mat(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
  ad::Mat m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

}  // namespace reqo::testutil
