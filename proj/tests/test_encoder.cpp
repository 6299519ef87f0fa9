#include <gtest/gtest.h>

#include <set>

#include "gradcheck.hpp"
#include "reqo/encoder.hpp"

using namespace reqo;
using namespace reqo::testutil;

namespace {

Catalog two_table_catalog() {
  Catalog cat;
  cat.node_types = {"Seq Scan", "Hash Join", "Sort"};
  cat.tables.push_back(TableDef{"t0",
                                {ColumnDef{"c0", ColumnKind::numeric, 0.0, 10.0},
                                 ColumnDef{"c1", ColumnKind::numeric, 0.0, 1.0},
                                 ColumnDef{"s0", ColumnKind::text}}});
  cat.tables.push_back(TableDef{"t1", {ColumnDef{"c0", ColumnKind::numeric, 5.0, 10.0}}});
  cat.finalize();
  return cat;
}

PlanNode scan_node(const std::string& table) {
  PlanNode n;
  n.node_id = 0;
  n.op_type = "Seq Scan";
  n.tables = {table};
  return n;
}

}  // namespace

TEST(NormalizeValue, Endpoints) {
  EXPECT_DOUBLE_EQ(normalize_value(5.0, 5.0, 10.0), 0.0);
  EXPECT_DOUBLE_EQ(normalize_value(10.0, 5.0, 10.0), 1.0);
  EXPECT_DOUBLE_EQ(normalize_value(7.5, 5.0, 10.0), 0.5);
  EXPECT_DOUBLE_EQ(normalize_value(-3.0, 5.0, 10.0), 0.0);  // clamps
}

TEST(TextToNumeric, DeterministicAndSpread) {
  EXPECT_DOUBLE_EQ(text_to_numeric(""), 0.0);
  EXPECT_DOUBLE_EQ(text_to_numeric("hash me"), text_to_numeric("hash me"));
  std::set<double> seen;
  for (int i = 0; i < 100; ++i) {
    const double v = text_to_numeric("s" + std::to_string(i));
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 100u);
  // Single-character differences change the value.
  EXPECT_NE(text_to_numeric("abcdef"), text_to_numeric("abcdeg"));
}

TEST(CaseVector, NoPredicatesIsZero) {
  const Catalog cat = two_table_catalog();
  const auto cv = encode_case_vector({}, "t0.c0", cat);
  for (double v : cv.values) EXPECT_EQ(v, 0.0);
}

TEST(CaseVector, NumericSlotNormalizes) {
  const Catalog cat = two_table_catalog();
  PredicateAtom atom{"t0.c0", PredCase::gt, 5.0};
  const auto cv = encode_case_vector({atom}, "t0.c0", cat);
  EXPECT_DOUBLE_EQ(cv.values[static_cast<int>(PredCase::gt)], 0.5);
  for (int k = 0; k < kNumPredCases; ++k)
    if (k != static_cast<int>(PredCase::gt)) EXPECT_EQ(cv.values[static_cast<std::size_t>(k)], 0.0);
}

TEST(CaseVector, JoinAndMembershipAreIndicators) {
  const Catalog cat = two_table_catalog();
  PredicateAtom join{"t0.c0", PredCase::join, ColumnRef{"t1.c0"}};
  PredicateAtom member{"t0.c0", PredCase::membership, 3.0};
  const auto cv = encode_case_vector({join, member}, "t0.c0", cat);
  EXPECT_DOUBLE_EQ(cv.values[static_cast<int>(PredCase::join)], 1.0);
  EXPECT_DOUBLE_EQ(cv.values[static_cast<int>(PredCase::membership)], 1.0);
}

TEST(CaseVector, OutOfRangeClampsWithWarning) {
  const Catalog cat = two_table_catalog();
  int warnings = 0;
  set_warn_handler([&](const std::string&) { ++warnings; });
  PredicateAtom atom{"t0.c0", PredCase::lt, 25.0};
  const auto cv = encode_case_vector({atom}, "t0.c0", cat);
  EXPECT_DOUBLE_EQ(cv.values[static_cast<int>(PredCase::lt)], 1.0);
  EXPECT_EQ(warnings, 1);
  set_warn_handler(nullptr);
}

TEST(CaseVector, LastWriteWinsAndUnknownColumnThrows) {
  const Catalog cat = two_table_catalog();
  PredicateAtom a{"t0.c0", PredCase::eq, 2.0};
  PredicateAtom b{"t0.c0", PredCase::eq, 8.0};
  const auto cv = encode_case_vector({a, b}, "t0.c0", cat);
  EXPECT_DOUBLE_EQ(cv.values[static_cast<int>(PredCase::eq)], 0.8);
  EXPECT_THROW(encode_case_vector({}, "t9.c0", cat), CatalogError);
}

TEST(CaseVector, TextOperandUsesHash) {
  const Catalog cat = two_table_catalog();
  PredicateAtom atom{"t0.s0", PredCase::eq, std::string("hello")};
  const auto cv = encode_case_vector({atom}, "t0.s0", cat);
  EXPECT_DOUBLE_EQ(cv.values[static_cast<int>(PredCase::eq)], text_to_numeric("hello"));
}

TEST(EncodeNode, LayoutAndTableOneHot) {
  const Catalog cat = two_table_catalog();
  nn::ParamStore store;
  Rng rng(3);
  const auto params = make_encoder_params(store, cat, 4, 2, rng);
  const int d = feature_length(cat, params);
  EXPECT_EQ(d, 4 + 2 + 2 * 2);

  const auto f = encode_node(scan_node("t1"), cat, store, params);
  ASSERT_EQ(f.size(), d);
  // Table one-hot: only t1's slot set.
  EXPECT_EQ(f(4 + 0), 0.0);
  EXPECT_EQ(f(4 + 1), 1.0);
  // No predicates: both per-table pooled blocks are zero.
  for (int i = 4 + 2; i < d; ++i) EXPECT_EQ(f(i), 0.0);
}

TEST(EncodeNode, MultiTableNodeSetsTwoOnes) {
  const Catalog cat = two_table_catalog();
  nn::ParamStore store;
  Rng rng(4);
  const auto params = make_encoder_params(store, cat, 4, 2, rng);
  PlanNode join;
  join.op_type = "Hash Join";
  join.tables = {"t0", "t1"};
  const auto f = encode_node(join, cat, store, params);
  EXPECT_EQ(f(4 + 0), 1.0);
  EXPECT_EQ(f(4 + 1), 1.0);
}

TEST(EncodeNode, MaxPoolsColumnEmbeddingsPerTable) {
  const Catalog cat = two_table_catalog();
  nn::ParamStore store;
  Rng rng(5);
  auto params = make_encoder_params(store, cat, 4, 2, rng);
  // Force deterministic column embeddings: E(c) = eq-row of M(c).
  // Columns of t0: global ids 0 (c0), 1 (c1).
  store.value(params.column_mats[0]).setZero();
  store.value(params.column_mats[1]).setZero();
  store.value(params.column_mats[0]).row(static_cast<int>(PredCase::eq)) << 1.0, 0.0;
  store.value(params.column_mats[1]).row(static_cast<int>(PredCase::eq)) << 0.0, 2.0;

  PlanNode node = scan_node("t0");
  node.predicates.push_back(PredicateAtom{"t0.c0", PredCase::eq, 10.0});  // F slot = 1.0
  node.predicates.push_back(PredicateAtom{"t0.c1", PredCase::eq, 1.0});   // F slot = 1.0
  const auto f = encode_node(node, cat, store, params);
  // t0's pooled block is the elementwise max [1, 2].
  EXPECT_DOUBLE_EQ(f(4 + 2 + 0), 1.0);
  EXPECT_DOUBLE_EQ(f(4 + 2 + 1), 2.0);
  // t1's block untouched.
  EXPECT_DOUBLE_EQ(f(4 + 2 + 2), 0.0);
  EXPECT_DOUBLE_EQ(f(4 + 2 + 3), 0.0);
}

TEST(EncodeNode, PureAndPredicateBlockLocal) {
  const Catalog cat = two_table_catalog();
  nn::ParamStore store;
  Rng rng(6);
  const auto params = make_encoder_params(store, cat, 8, 3, rng);
  PlanNode node = scan_node("t0");
  node.predicates.push_back(PredicateAtom{"t0.c0", PredCase::lt, 4.0});
  const auto f1 = encode_node(node, cat, store, params);
  const auto f2 = encode_node(node, cat, store, params);
  EXPECT_EQ(f1, f2);

  PlanNode bare = scan_node("t0");
  const auto f0 = encode_node(bare, cat, store, params);
  // Type and table blocks identical; only the predicate block moved.
  for (int i = 0; i < 8 + 2; ++i) EXPECT_EQ(f0(i), f1(i));
  EXPECT_NE((f0 - f1).norm(), 0.0);
}

TEST(EncodeNode, PoolingInvariantToPredicateOrder) {
  const Catalog cat = two_table_catalog();
  nn::ParamStore store;
  Rng rng(7);
  const auto params = make_encoder_params(store, cat, 4, 3, rng);
  PlanNode node = scan_node("t0");
  node.predicates = {PredicateAtom{"t0.c0", PredCase::lt, 4.0}, PredicateAtom{"t0.c1", PredCase::gt, 0.5},
                     PredicateAtom{"t0.s0", PredCase::eq, std::string("x")}};
  const auto f1 = encode_node(node, cat, store, params);
  std::swap(node.predicates[0], node.predicates[2]);
  std::swap(node.predicates[1], node.predicates[2]);
  const auto f2 = encode_node(node, cat, store, params);
  EXPECT_LT((f1 - f2).norm(), 1e-15);
}

TEST(EncodeNode, UnknownNamesThrow) {
  const Catalog cat = two_table_catalog();
  nn::ParamStore store;
  Rng rng(8);
  const auto params = make_encoder_params(store, cat, 4, 2, rng);
  PlanNode bad_op = scan_node("t0");
  bad_op.op_type = "Gather Merge";
  EXPECT_THROW(encode_node(bad_op, cat, store, params), CatalogError);
  PlanNode bad_table = scan_node("t7");
  EXPECT_THROW(encode_node(bad_table, cat, store, params), CatalogError);
}

TEST(EncodeNode, BatchedGradientsMatchFiniteDifferences) {
  const Catalog cat = two_table_catalog();
  nn::ParamStore store;
  Rng rng(9);
  const auto params = make_encoder_params(store, cat, 3, 2, rng);

  PlanNode a = scan_node("t0");
  a.predicates = {PredicateAtom{"t0.c0", PredCase::lt, 4.0}, PredicateAtom{"t0.c1", PredCase::gt, 0.25}};
  PlanNode b = scan_node("t1");
  b.predicates = {PredicateAtom{"t1.c0", PredCase::ge, 7.0}};
  PlanNode c;
  c.op_type = "Hash Join";
  c.tables = {"t0", "t1"};
  c.predicates = {PredicateAtom{"t0.c0", PredCase::join, ColumnRef{"t1.c0"}}};

  const std::vector<NodeInputs> inputs{preprocess_node(a, cat), preprocess_node(b, cat),
                                       preprocess_node(c, cat)};
  const ad::Mat head = random_mat(rng, 3, feature_length(cat, params));
  check_param_gradients(store, [&](ad::Tape& t, const nn::ParamStore& s) {
    std::vector<const NodeInputs*> ptrs{&inputs[0], &inputs[1], &inputs[2]};
    ad::Var f = encode_nodes(t, s, params, cat, ptrs);
    return t.sum(t.cwise_mul_const(f, head));
  });
}
