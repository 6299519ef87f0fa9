#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "reqo/autodiff.hpp"

using namespace reqo;
using namespace reqo::testutil;
using ad::Mat;
using ad::Tape;
using ad::Var;

TEST(TapeValues, StableSquashes) {
  Tape t;
  Var x = t.leaf(Mat::Zero(1, 1));
  EXPECT_DOUBLE_EQ(t.scalar(t.logistic(x)), 0.5);
  EXPECT_DOUBLE_EQ(t.scalar(t.softplus(x)), std::log(2.0));
  // No overflow at extremes.
  Var big = t.leaf(Mat::Constant(1, 1, 800.0));
  Var small = t.leaf(Mat::Constant(1, 1, -800.0));
  EXPECT_DOUBLE_EQ(t.scalar(t.logistic(big)), 1.0);
  EXPECT_DOUBLE_EQ(t.scalar(t.logistic(small)), 0.0);
  EXPECT_DOUBLE_EQ(t.scalar(t.softplus(big)), 800.0);
  EXPECT_DOUBLE_EQ(t.scalar(t.softplus(small)), 0.0);
}

TEST(TapeGrad, ArithmeticChain) {
  Rng rng(1);
  check_input_gradients({random_mat(rng, 3, 4), random_mat(rng, 4, 2)}, [](Tape& t, const std::vector<Var>& v) {
    return t.sum(t.tanh(t.matmul(v[0], v[1])));
  });
}

TEST(TapeGrad, CwiseOps) {
  Rng rng(2);
  const Mat a = random_mat(rng, 3, 3, 0.5, 2.0);
  const Mat b = random_mat(rng, 3, 3, 0.5, 2.0);
  check_input_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
    Var x = t.cwise_mul(v[0], v[1]);
    x = t.cwise_div(x, t.affine(v[1], 1.0, 3.0));
    x = t.add(t.square(x), t.log(v[0]));
    return t.mean(x);
  });
}

TEST(TapeGrad, SquashChain) {
  Rng rng(3);
  check_input_gradients({random_mat(rng, 2, 5)}, [](Tape& t, const std::vector<Var>& v) {
    Var x = t.logistic(v[0]);
    x = t.add(x, t.softplus(v[0]));
    x = t.add(x, t.exp(t.scale(v[0], 0.3)));
    return t.sum(x);
  });
}

TEST(TapeGrad, RowvecBroadcastAndScalarVar) {
  Rng rng(4);
  check_input_gradients({random_mat(rng, 4, 3), random_mat(rng, 1, 3), random_mat(rng, 1, 1)},
                        [](Tape& t, const std::vector<Var>& v) {
                          Var x = t.add_rowvec(v[0], v[1]);
                          x = t.mul_scalar_var(x, v[2]);
                          x = t.cwise_mul_rowvec(x, v[1]);
                          return t.sum(t.tanh(x));
                        });
}

TEST(TapeGrad, ShapeOps) {
  Rng rng(5);
  check_input_gradients({random_mat(rng, 4, 3), random_mat(rng, 2, 3)},
                        [](Tape& t, const std::vector<Var>& v) {
                          Var stacked = t.concat_rows(v[0], v[1]);
                          Var g = t.gather_rows(stacked, {5, 0, 3, 3});
                          Var s = t.slice_rows(g, 1, 2);
                          Var wide = t.concat_cols(s, s);
                          return t.sum(t.square(wide));
                        });
}

TEST(TapeGrad, HeadRowDotAndSegmentSoftmax) {
  Rng rng(6);
  // 5 edge rows, 2 heads of width 3; segments {0,1,2} and {3,4}.
  check_input_gradients({random_mat(rng, 5, 6), random_mat(rng, 5, 6)},
                        [](Tape& t, const std::vector<Var>& v) {
                          Var scores = t.head_row_dot(v[0], v[1], 2);
                          Var alpha = t.segment_softmax(scores, {0, 3, 5});
                          return t.sum(t.square(alpha));
                        });
}

TEST(TapeGrad, HeadWeightedScatter) {
  Rng rng(7);
  check_input_gradients({random_mat(rng, 4, 2), random_mat(rng, 4, 6)},
                        [](Tape& t, const std::vector<Var>& v) {
                          Var out = t.head_weighted_scatter(v[0], v[1], {0, 1, 1, 2}, 3);
                          return t.sum(t.tanh(out));
                        });
}

TEST(TapeGrad, SegmentMaxRoutesToArgmax) {
  Rng rng(8);
  // Distinct values so the max has a unique argmax everywhere.
  Mat rows(5, 3);
  int k = 0;
  for (Eigen::Index r = 0; r < 5; ++r)
    for (Eigen::Index c = 0; c < 3; ++c) rows(r, c) = 0.1 * (k++) * (r % 2 == 0 ? 1.0 : -1.0);
  check_input_gradients({rows}, [](Tape& t, const std::vector<Var>& v) {
    Var m = t.segment_max(v[0], {0, 2, 5});
    return t.sum(t.square(m));
  });
}

TEST(TapeGrad, ScatterRowsToBlocks) {
  Rng rng(9);
  check_input_gradients({random_mat(rng, 3, 2)}, [](Tape& t, const std::vector<Var>& v) {
    Var out = t.scatter_rows_to_blocks(v[0], {0, 2, 1}, {0, 2, 4}, 3, 6);
    return t.sum(t.tanh(out));
  });
}

TEST(TapeGrad, ReluAndClamp) {
  Rng rng(10);
  // Keep values away from the kinks.
  Mat x = random_mat(rng, 3, 3, 0.2, 1.0);
  x(0, 0) = -0.7;
  x(1, 2) = -0.4;
  check_input_gradients({x}, [](Tape& t, const std::vector<Var>& v) {
    return t.sum(t.add(t.relu(v[0]), t.clamp_min(v[0], 0.1)));
  });
}

TEST(TapeSemantics, GradAccumulatesOverReuse) {
  Tape t;
  Var x = t.leaf(Mat::Constant(1, 1, 3.0));
  Var y = t.add(t.square(x), t.square(x));  // d/dx = 4x = 12
  t.backward(t.sum(y));
  EXPECT_DOUBLE_EQ(t.grad(x)(0, 0), 12.0);
}

TEST(TapeSemantics, SegmentSoftmaxNormalizesPerSegment) {
  Tape t;
  Rng rng(11);
  Var s = t.leaf(random_mat(rng, 6, 2, -3.0, 3.0));
  Var a = t.segment_softmax(s, {0, 2, 6});
  const Mat& v = t.value(a);
  for (Eigen::Index c = 0; c < 2; ++c) {
    EXPECT_NEAR(v.block(0, c, 2, 1).sum(), 1.0, 1e-12);
    EXPECT_NEAR(v.block(2, c, 4, 1).sum(), 1.0, 1e-12);
  }
}

TEST(TapeSemantics, DropoutMaskScalesAndZeroes) {
  Tape t;
  Rng rng(12);
  Var x = t.leaf(Mat::Constant(100, 10, 1.0));
  Var d = t.dropout(x, 0.4, rng);
  const Mat& v = t.value(d);
  int zeros = 0;
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (v(i, j) == 0.0) {
        ++zeros;
      } else {
        EXPECT_NEAR(v(i, j), 1.0 / 0.6, 1e-12);
      }
    }
  }
  EXPECT_GT(zeros, 250);
  EXPECT_LT(zeros, 550);
  // rate 0 is the identity.
  Var same = t.dropout(x, 0.0, rng);
  EXPECT_EQ(same.idx, x.idx);
}

TEST(TapeSemantics, BackwardRequiresScalarRoot) {
  Tape t;
  Var x = t.leaf(Mat::Zero(2, 2));
  EXPECT_THROW(t.backward(x), ConfigError);
}
