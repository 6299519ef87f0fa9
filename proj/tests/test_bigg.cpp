#include <gtest/gtest.h>

#include <numeric>

#include "gradcheck.hpp"
#include "reqo/bigg.hpp"
#include "test_util.hpp"

using namespace reqo;
using namespace reqo::testutil;
using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

// Naive per-node attention oracle, independent of the tape implementation.
Mat attention_oracle(const Mat& x, const std::vector<std::pair<int, int>>& edges, const Mat& wq,
                     const Mat& wk, const Mat& wv, const Mat& wself, int heads) {
  const Eigen::Index n = x.rows();
  const Eigen::Index dim = x.cols();
  const Eigen::Index dh = dim / heads;
  const Mat q = x * wq, k = x * wk, v = x * wv;
  Mat out = x * wself;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int h = 0; h < heads; ++h) {
      std::vector<double> scores;
      std::vector<int> sources;
      for (const auto& [src, dst] : edges) {
        if (dst != i) continue;
        sources.push_back(src);
        scores.push_back(q.row(i).segment(h * dh, dh).dot(k.row(src).segment(h * dh, dh)) /
                         std::sqrt(static_cast<double>(dh)));
      }
      if (sources.empty()) continue;
      const double mx = *std::max_element(scores.begin(), scores.end());
      double z = 0.0;
      for (double& s : scores) {
        s = std::exp(s - mx);
        z += s;
      }
      for (std::size_t e = 0; e < sources.size(); ++e)
        out.row(i).segment(h * dh, dh) += (scores[e] / z) * v.row(sources[e]).segment(h * dh, dh);
    }
  }
  return out;
}

struct ConvFixture {
  nn::ParamStore store;
  AttentionConvParams params;
  int dim, heads;

  ConvFixture(int dim_, int heads_, std::uint64_t seed) : dim(dim_), heads(heads_) {
    Rng rng(seed);
    params = detail::make_attention_conv(store, "conv", dim, rng);
  }

  Mat run(const Mat& states, const std::vector<std::pair<int, int>>& edges) {
    Tape tape;
    Var out = attention_conv(tape, store, params, tape.leaf(states), EdgeArrays::from_pairs(edges), heads);
    return tape.value(out);
  }

  Mat oracle(const Mat& states, const std::vector<std::pair<int, int>>& edges) {
    return attention_oracle(states, edges, store.value(params.wq), store.value(params.wk),
                            store.value(params.wv), store.value(params.wself), heads);
  }
};

}  // namespace

TEST(AttentionConv, EmptyEdgesIsSelfTransform) {
  ConvFixture fx(6, 2, 1);
  Rng rng(2);
  const Mat x = random_mat(rng, 4, 6);
  const Mat out = fx.run(x, {});
  const Mat expect = x * fx.store.value(fx.params.wself);
  EXPECT_LT((out - expect).norm(), 1e-12);
}

TEST(AttentionConv, SingleInNeighbourGetsWeightOne) {
  ConvFixture fx(4, 2, 3);
  Rng rng(4);
  const Mat x = random_mat(rng, 2, 4);
  // Edge 0 -> 1: node 1 attends to node 0 only.
  const Mat out = fx.run(x, {{0, 1}});
  const Mat expect1 = x.row(1) * fx.store.value(fx.params.wself) + x.row(0) * fx.store.value(fx.params.wv);
  EXPECT_LT((out.row(1) - expect1).norm(), 1e-12);
}

TEST(AttentionConv, IdenticalNeighboursSplitAttentionEvenly) {
  ConvFixture fx(4, 1, 5);
  Rng rng(6);
  Mat x = random_mat(rng, 3, 4);
  x.row(2) = x.row(1);  // identical key/value rows
  const Mat out = fx.run(x, {{1, 0}, {2, 0}});
  // alpha = 0.5 each; message = W_val x_1.
  const Mat expect0 = x.row(0) * fx.store.value(fx.params.wself) + x.row(1) * fx.store.value(fx.params.wv);
  EXPECT_LT((out.row(0) - expect0).norm(), 1e-12);
}

TEST(AttentionConv, MatchesOracleOnRandomTrees) {
  ConvFixture fx(8, 4, 7);
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const PlanTree t = random_tree(rng, static_cast<int>(rng.uniform_int(1, 12)));
    const auto views = directed_edge_views(t);
    const Mat x = random_mat(rng, t.size(), 8);
    EXPECT_LT((fx.run(x, views.down_edges) - fx.oracle(x, views.down_edges)).norm(), 1e-10);
    EXPECT_LT((fx.run(x, views.up_edges) - fx.oracle(x, views.up_edges)).norm(), 1e-10);
  }
}

TEST(Blend, EndpointsAndMidpoint) {
  Mat down(1, 2), up(1, 2);
  down << 2.0, 0.0;
  up << 0.0, 2.0;
  EXPECT_LT((blend(down, up, 1.0) - down).norm(), 1e-15);
  EXPECT_LT((blend(down, up, 0.0) - up).norm(), 1e-15);
  Mat mid(1, 2);
  mid << 1.0, 1.0;
  EXPECT_LT((blend(down, up, 0.5) - mid).norm(), 1e-15);
}

TEST(Blend, OutputInsideIntervalHull) {
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    const Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 3, 4);
    const double lambda = rng.uniform();
    const Mat out = blend(a, b, lambda);
    for (Eigen::Index r = 0; r < 3; ++r)
      for (Eigen::Index c = 0; c < 4; ++c) {
        EXPECT_GE(out(r, c), std::min(a(r, c), b(r, c)) - 1e-12);
        EXPECT_LE(out(r, c), std::max(a(r, c), b(r, c)) + 1e-12);
      }
  }
}

namespace {

struct BiggFixture {
  nn::ParamStore store;
  BiGGParams params;

  BiggFixture(int feature_len, BiGGConfig cfg, std::uint64_t seed) {
    Rng rng(seed);
    params = make_bigg_params(store, feature_len, cfg, rng);
  }

  Eigen::VectorXd embed(const PlanTree& t, const Mat& features) {
    return embed_plan(t, features, store, params);
  }
};

BiGGConfig small_cfg(int hidden, int heads, int layers) {
  BiGGConfig cfg;
  cfg.hidden_dim = hidden;
  cfg.num_heads = heads;
  cfg.num_layers = layers;
  return cfg;
}

}  // namespace

namespace {

GraphBatch single_node_batch(TreeStructure& storage) {
  storage.n = 1;
  storage.order = {0};
  storage.down_edges.clear();
  return GraphBatch::build({&storage});
}

}  // namespace

TEST(BiggLayer, SingleNodeReducesToBlendedSelfTransforms) {
  BiGGConfig cfg = small_cfg(4, 2, 1);
  cfg.use_residual = false;  // exposes the bare activated blend
  BiggFixture fx(4, cfg, 11);
  Rng rng(12);
  const Mat x = random_mat(rng, 1, 4);

  TreeStructure single;
  const GraphBatch b = single_node_batch(single);
  Tape tape;
  Var out = bigg_layer(tape, fx.store, fx.params.layers[0], cfg, tape.leaf(x), b.down, b.up);

  const Mat down = x * fx.store.value(fx.params.layers[0].down.wself);
  const Mat up = x * fx.store.value(fx.params.layers[0].up.wself);
  const Mat expect = blend(down, up, 0.5).array().tanh().matrix();  // lambda_raw = 0 -> 0.5
  EXPECT_LT((tape.value(out) - expect).norm(), 1e-12);
}

// With identical parameter sets for both views the two conv outputs coincide
// (both reduce to the self transform on a single node), so the blend weight
// drops out.
TEST(BiggLayer, IdenticalViewParamsMakeBlendWeightIrrelevant) {
  BiGGConfig cfg = small_cfg(4, 2, 1);
  BiggFixture fx(4, cfg, 13);
  auto& store = fx.store;
  const auto& lp = fx.params.layers[0];
  store.value(lp.up.wq) = store.value(lp.down.wq);
  store.value(lp.up.wk) = store.value(lp.down.wk);
  store.value(lp.up.wv) = store.value(lp.down.wv);
  store.value(lp.up.wself) = store.value(lp.down.wself);

  Rng rng(14);
  TreeStructure single;
  const GraphBatch b = single_node_batch(single);
  const Mat x = random_mat(rng, 1, 4);
  auto run_with_lambda = [&](double lraw) {
    store.value(lp.lambda_raw)(0, 0) = lraw;
    Tape tape;
    return Mat(tape.value(bigg_layer(tape, store, lp, cfg, tape.leaf(x), b.down, b.up)));
  };
  const Mat at_neg = run_with_lambda(-2.0);
  const Mat at_pos = run_with_lambda(3.0);
  EXPECT_LT((at_neg - at_pos).norm(), 1e-12);
}

namespace {

// Independent scalar GRU recurrence (hidden_dim = 1).
double scalar_gru_oracle(const std::vector<double>& xs, double wz, double uz, double bz, double wr,
                         double ur, double br, double wn, double un, double bn) {
  double h = 0.0;
  auto sigma = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (double x : xs) {
    const double z = sigma(x * wz + h * uz + bz);
    const double r = sigma(x * wr + h * ur + br);
    const double n = std::tanh(x * wn + r * (h * un) + bn);
    h = z * h + (1.0 - z) * n;
  }
  return h;
}

}  // namespace

TEST(AggregateGru, MatchesScalarOracle) {
  Rng rng(15);
  nn::ParamStore store;
  BiGGConfig cfg = small_cfg(1, 1, 1);
  const BiGGParams params = make_bigg_params(store, 1, cfg, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const int steps = static_cast<int>(rng.uniform_int(1, 6));
    Mat states(steps, 1);
    std::vector<double> xs;
    std::vector<int> order;
    for (int i = 0; i < steps; ++i) {
      states(i, 0) = rng.uniform(-2.0, 2.0);
      xs.push_back(states(i, 0));
      order.push_back(i);
    }
    const auto emb = aggregate_gru(states, order, store, params.gru);
    const double expect = scalar_gru_oracle(
        xs, store.value(params.gru.wz)(0, 0), store.value(params.gru.uz)(0, 0),
        store.value(params.gru.bz)(0, 0), store.value(params.gru.wr)(0, 0), store.value(params.gru.ur)(0, 0),
        store.value(params.gru.br)(0, 0), store.value(params.gru.wn)(0, 0), store.value(params.gru.un)(0, 0),
        store.value(params.gru.bn)(0, 0));
    EXPECT_NEAR(emb(0), expect, 1e-9);
  }
}

TEST(AggregateGru, SaturatedUpdateGateCarriesZeroState) {
  Rng rng(16);
  nn::ParamStore store;
  const BiGGParams params = make_bigg_params(store, 4, small_cfg(4, 1, 1), rng);
  store.value(params.gru.wz).setZero();
  store.value(params.gru.uz).setZero();
  store.value(params.gru.bz).setConstant(200.0);  // z = 1: carry
  const Mat states = random_mat(rng, 5, 4);
  const auto emb = aggregate_gru(states, {0, 1, 2, 3, 4}, store, params.gru);
  EXPECT_LT(emb.norm(), 1e-12);
}

TEST(EmbedPlan, SingleNodeFiniteAndFixedLength) {
  BiggFixture fx(5, small_cfg(8, 2, 2), 17);
  Rng rng(18);
  const PlanTree t = tree_from_parents({-1});
  const auto emb = fx.embed(t, random_mat(rng, 1, 5));
  EXPECT_EQ(emb.size(), 8);
  EXPECT_TRUE(emb.allFinite());
}

TEST(EmbedPlan, DimensionMismatchThrows) {
  BiggFixture fx(5, small_cfg(8, 2, 1), 19);
  Rng rng(20);
  const PlanTree t = tree_from_parents({-1});
  EXPECT_THROW(fx.embed(t, random_mat(rng, 1, 7)), ConfigError);
}

namespace {

// Renumbers node ids by `perm` (new_id = perm[old_id]) preserving topology
// and child order.
PlanTree relabel(const PlanTree& t, const std::vector<int>& perm) {
  PlanTree out;
  out.query_id = t.query_id;
  out.nodes.resize(t.nodes.size());
  for (int old_id = 0; old_id < t.size(); ++old_id) {
    PlanNode node = t.node(old_id);
    node.node_id = perm[static_cast<std::size_t>(old_id)];
    for (int& c : node.children) c = perm[static_cast<std::size_t>(c)];
    out.nodes[static_cast<std::size_t>(node.node_id)] = std::move(node);
  }
  out.root_id = perm[static_cast<std::size_t>(t.root_id)];
  return out;
}

}  // namespace

TEST(EmbedPlan, InvariantUnderNodeRelabeling) {
  BiggFixture fx(6, small_cfg(16, 4, 2), 21);
  Rng rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 12));
    const PlanTree t = random_tree(rng, n);
    const Mat features = random_mat(rng, n, 6);

    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    const PlanTree relabeled = relabel(t, perm);
    Mat relabeled_features(n, 6);
    for (int i = 0; i < n; ++i) relabeled_features.row(perm[static_cast<std::size_t>(i)]) = features.row(i);

    const auto a = fx.embed(t, features);
    const auto b = fx.embed(relabeled, relabeled_features);
    EXPECT_LT((a - b).lpNorm<Eigen::Infinity>(), 1e-6);
  }
}

TEST(EmbedPlan, TopologySensitive) {
  BiggFixture fx(4, small_cfg(8, 2, 2), 23);
  Rng rng(24);
  // Same multiset of features, bushy vs left-deep 4-node shapes.
  const PlanTree bushy = tree_from_parents({-1, 0, 0, 1});
  const PlanTree chain = tree_from_parents({-1, 0, 1, 2});
  const Mat features = random_mat(rng, 4, 4);
  const auto a = fx.embed(bushy, features);
  const auto b = fx.embed(chain, features);
  EXPECT_GT((a - b).norm(), 1e-8);
}

TEST(EmbedPlan, FiniteOverRandomInstances) {
  BiggFixture fx(6, small_cfg(16, 4, 4), 25);
  Rng rng(26);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 20));
    const PlanTree t = random_tree(rng, n);
    const auto emb = fx.embed(t, random_mat(rng, n, 6, -3.0, 3.0));
    EXPECT_TRUE(emb.allFinite());
  }
}

TEST(EmbedPlan, BatchedMatchesSinglePlanPath) {
  BiggFixture fx(5, small_cfg(8, 2, 2), 27);
  Rng rng(28);
  std::vector<PlanTree> trees;
  std::vector<Mat> feats;
  std::vector<TreeStructure> structures;
  for (int i = 0; i < 7; ++i) {
    const int n = static_cast<int>(rng.uniform_int(1, 9));
    trees.push_back(random_tree(rng, n));
    feats.push_back(random_mat(rng, n, 5));
    structures.push_back(TreeStructure::of(trees.back()));
  }
  int total = 0;
  std::vector<const TreeStructure*> ptrs;
  for (auto& s : structures) {
    ptrs.push_back(&s);
    total += s.n;
  }
  Mat all(total, 5);
  int row = 0;
  for (const auto& f : feats) {
    all.middleRows(row, f.rows()) = f;
    row += static_cast<int>(f.rows());
  }
  Tape tape;
  Var emb = embed_graphs(tape, fx.store, fx.params, tape.leaf(all), GraphBatch::build(ptrs));
  for (std::size_t i = 0; i < trees.size(); ++i) {
    const auto single = fx.embed(trees[i], feats[i]);
    EXPECT_LT((tape.value(emb).row(static_cast<Eigen::Index>(i)).transpose() - single).norm(), 1e-10);
  }
}

TEST(EmbedPlan, GradientsMatchFiniteDifferences) {
  Rng rng(29);
  nn::ParamStore store;
  BiGGParams params = make_bigg_params(store, 4, small_cfg(8, 2, 2), rng);
  const PlanTree t = random_tree(rng, 5);
  const Mat features = random_mat(rng, 5, 4);
  const Mat head = random_mat(rng, 1, 8);
  TreeStructure structure = TreeStructure::of(t);
  check_param_gradients(
      store,
      [&](Tape& tape, const nn::ParamStore& s) {
        const GraphBatch b = GraphBatch::build({&structure});
        Var emb = embed_graphs(tape, s, params, tape.leaf(features), b);
        return tape.sum(tape.cwise_mul_const(emb, head));
      },
      1e-4, 1e-8, 1e-5, 40, &rng);
}
