#include <gtest/gtest.h>

#include <sstream>

#include "reqo/oracle.hpp"
#include "reqo/plan_json.hpp"
#include "test_util.hpp"

using namespace reqo;
using namespace reqo::testutil;

namespace {

OracleConfig small_config(std::uint64_t seed = 42) {
  OracleConfig cfg;
  cfg.seed = seed;
  cfg.num_queries = 12;
  cfg.plans_per_query = 3;
  cfg.min_nodes = 3;
  cfg.max_nodes = 12;
  return cfg;
}

}  // namespace

TEST(OracleCost, SingleNodeIsLocalCost) {
  OracleConfig cfg = small_config();
  const Catalog cat = oracle_catalog(cfg);
  PlanTree t = tree_from_parents({-1});
  t.node(0).op_type = "Sort";  // no tables, no predicates: cost = base
  t.node(0).tables.clear();
  Rng rng(1);
  const auto cost = oracle_cost(t, cfg, cat, rng);
  EXPECT_DOUBLE_EQ(cost[0], oracle_base_costs(cfg).at("Sort"));
}

TEST(OracleCost, AdditiveRecursion) {
  OracleConfig cfg = small_config();
  const Catalog cat = oracle_catalog(cfg);
  // A over B, C; all plain unary/scans with no tables so costs are bases.
  PlanTree t = tree_from_parents({-1, 0, 0});
  t.node(0).op_type = "Sort";         // base 5
  t.node(1).op_type = "Aggregate";    // base 3
  t.node(2).op_type = "Materialize";  // base 1.5
  for (auto& n : t.nodes) n.tables.clear();
  Rng rng(2);
  const auto cost = oracle_cost(t, cfg, cat, rng);
  EXPECT_DOUBLE_EQ(cost[1], 3.0);
  EXPECT_DOUBLE_EQ(cost[2], 1.5);
  EXPECT_DOUBLE_EQ(cost[0], 5.0 + 3.0 + 1.5);
}

TEST(OracleCost, UnknownOperatorThrows) {
  OracleConfig cfg = small_config();
  const Catalog cat = oracle_catalog(cfg);
  PlanTree t = tree_from_parents({-1});
  t.node(0).op_type = "Window Agg";
  Rng rng(3);
  EXPECT_THROW(oracle_cost(t, cfg, cat, rng), ConfigError);
}

TEST(OracleCost, NoiseZeroIsDeterministic) {
  OracleConfig cfg = small_config();
  const Catalog cat = oracle_catalog(cfg);
  PlanTree t = tree_from_parents({-1, 0});
  t.node(0).op_type = "Sort";
  t.node(1).op_type = "Aggregate";
  for (auto& n : t.nodes) n.tables.clear();
  Rng r1(7), r2(99);  // different noise streams must not matter at sigma 0
  EXPECT_EQ(oracle_cost(t, cfg, cat, r1), oracle_cost(t, cfg, cat, r2));
}

TEST(GenerateWorkload, CardinalityAndValidity) {
  OracleConfig cfg = small_config();
  cfg.num_queries = 1;
  cfg.plans_per_query = 2;
  const auto sets = generate_workload(cfg);
  ASSERT_EQ(sets.size(), 1u);
  EXPECT_EQ(sets[0].plans.size(), 2u);
  validate_candidate_set(sets[0]);
}

TEST(GenerateWorkload, SameSeedGivesByteIdenticalFiles) {
  const OracleConfig cfg = small_config(123);
  std::stringstream a, b;
  write_candidate_sets(a, generate_workload(cfg));
  write_candidate_sets(b, generate_workload(cfg));
  EXPECT_EQ(a.str(), b.str());
  OracleConfig other = small_config(124);
  std::stringstream c;
  write_candidate_sets(c, generate_workload(other));
  EXPECT_NE(a.str(), c.str());
}

TEST(GenerateWorkload, RespectsNodeCountRangeAndSchema) {
  OracleConfig cfg = small_config(5);
  cfg.num_queries = 40;
  const Catalog cat = oracle_catalog(cfg);
  for (const auto& set : generate_workload(cfg)) {
    for (const auto& plan : set.plans) {
      EXPECT_GE(plan.size(), cfg.min_nodes);
      EXPECT_LE(plan.size(), cfg.max_nodes);
      for (const auto& node : plan.nodes) {
        EXPECT_GE(cat.node_type_index(node.op_type), 0);
        for (const auto& tb : node.tables) EXPECT_GE(cat.table_index(tb), 0);
        for (const auto& atom : node.predicates) EXPECT_GE(cat.column_index(atom.column), 0);
      }
    }
  }
}

TEST(GenerateWorkload, ZeroNoiseInvariants) {
  OracleConfig cfg = small_config(9);
  cfg.num_queries = 30;
  const Catalog cat = oracle_catalog(cfg);
  const auto base = oracle_base_costs(cfg);
  const auto sizes = oracle_table_sizes(cfg);
  for (const auto& set : generate_workload(cfg)) {
    for (const auto& plan : set.plans) {
      // Parent cumulative >= child cumulative everywhere.
      for (const auto& node : plan.nodes)
        for (int c : node.children)
          EXPECT_GE(node.actual_total_ms, plan.node(c).actual_total_ms);
      // Node-local shares sum to exactly the root total.
      double local_sum = 0.0;
      for (const auto& node : plan.nodes) local_sum += oracle_local_cost(node, cfg, cat, base, sizes);
      EXPECT_NEAR(local_sum, plan.node(plan.root_id).actual_total_ms,
                  1e-9 * plan.node(plan.root_id).actual_total_ms);
    }
  }
}

TEST(GenerateWorkload, NoiseChangesLabelsButKeepsMonotonicity) {
  OracleConfig noisy = small_config(11);
  noisy.noise_sigma = 0.3;
  OracleConfig clean = small_config(11);
  const auto a = generate_workload(noisy);
  const auto b = generate_workload(clean);
  bool any_diff = false;
  for (std::size_t s = 0; s < a.size(); ++s) {
    for (std::size_t p = 0; p < a[s].plans.size(); ++p) {
      if (a[s].plans[p].node(0).actual_total_ms != b[s].plans[p].node(0).actual_total_ms) any_diff = true;
      for (const auto& node : a[s].plans[p].nodes)
        for (int c : node.children)
          EXPECT_GE(node.actual_total_ms, a[s].plans[p].node(c).actual_total_ms);
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST(GenerateWorkload, SiblingAcOrderingMatchesOracleCosts) {
  OracleConfig cfg = small_config(13);
  cfg.num_queries = 25;
  for (const auto& set : generate_workload(cfg)) {
    for (const auto& plan : set.plans) {
      const auto subs = extract_subtrees(plan, true);
      for (const auto& node : plan.nodes) {
        for (std::size_t i = 0; i + 1 < node.children.size(); ++i) {
          const int a = node.children[i], b = node.children[i + 1];
          const double ac_a = actual_contribution(plan, subs[static_cast<std::size_t>(a)]);
          const double ac_b = actual_contribution(plan, subs[static_cast<std::size_t>(b)]);
          // AC ordering of sibling subtrees mirrors cumulative-cost ordering.
          EXPECT_EQ(ac_a < ac_b, plan.node(a).actual_total_ms < plan.node(b).actual_total_ms);
        }
      }
    }
  }
}

TEST(GenerateWorkload, RoundTripsThroughJsonl) {
  OracleConfig cfg = small_config(17);
  cfg.num_queries = 4;
  const auto sets = generate_workload(cfg);
  std::stringstream buf;
  write_candidate_sets(buf, sets);
  const auto again = read_candidate_sets(buf);
  ASSERT_EQ(again.size(), sets.size());
  for (std::size_t s = 0; s < sets.size(); ++s) {
    ASSERT_EQ(again[s].plans.size(), sets[s].plans.size());
    for (std::size_t p = 0; p < sets[s].plans.size(); ++p) {
      const auto& x = sets[s].plans[p];
      const auto& y = again[s].plans[p];
      ASSERT_EQ(x.size(), y.size());
      for (int v = 0; v < x.size(); ++v) {
        EXPECT_EQ(x.node(v).op_type, y.node(v).op_type);
        EXPECT_EQ(x.node(v).children, y.node(v).children);
        EXPECT_EQ(x.node(v).tables, y.node(v).tables);
        EXPECT_DOUBLE_EQ(x.node(v).actual_total_ms, y.node(v).actual_total_ms);
        EXPECT_EQ(x.node(v).predicates.size(), y.node(v).predicates.size());
      }
    }
  }
}
