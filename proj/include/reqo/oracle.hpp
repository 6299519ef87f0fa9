#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "reqo/catalog.hpp"
#include "reqo/encoder.hpp"
#include "reqo/plan.hpp"
#include "reqo/rng.hpp"

namespace reqo {

// Configuration of the synthetic workload: schema size, tree sizes, the
// per-operator base-cost table, and the label-noise level.
struct OracleConfig {
  std::uint64_t seed = 42;
  int num_queries = 100;
  int plans_per_query = 5;
  int min_nodes = 3;
  int max_nodes = 20;
  double noise_sigma = 0.0;  // lognormal sigma on per-node local costs
  int num_tables = 6;
  int numeric_columns_per_table = 3;
  int text_columns_per_table = 1;
  std::map<std::string, double> base_costs;  // empty = built-in defaults
  std::vector<double> table_size_factors;    // empty = geometric defaults

  void validate() const {
    if (num_queries < 1) throw ConfigError("num_queries must be >= 1");
    if (plans_per_query < 2) throw ConfigError("plans_per_query must be >= 2 for pairing");
    if (min_nodes < 1 || max_nodes < min_nodes) throw ConfigError("invalid node-count range");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
    if (num_tables < 1 || numeric_columns_per_table < 1)
      throw ConfigError("catalog spec needs at least one table and one numeric column");
  }
};

inline OracleConfig oracle_config_from_json(const nlohmann::json& j) {
  OracleConfig c;
  c.seed = j.value("seed", c.seed);
  c.num_queries = j.value("num_queries", c.num_queries);
  c.plans_per_query = j.value("plans_per_query", c.plans_per_query);
  c.min_nodes = j.value("min_nodes", c.min_nodes);
  c.max_nodes = j.value("max_nodes", c.max_nodes);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.num_tables = j.value("num_tables", c.num_tables);
  c.numeric_columns_per_table = j.value("numeric_columns_per_table", c.numeric_columns_per_table);
  c.text_columns_per_table = j.value("text_columns_per_table", c.text_columns_per_table);
  if (j.contains("base_costs"))
    for (const auto& [op, cost] : j.at("base_costs").items()) c.base_costs[op] = cost.get<double>();
  if (j.contains("table_size_factors"))
    c.table_size_factors = j.at("table_size_factors").get<std::vector<double>>();
  c.validate();
  return c;
}

inline nlohmann::json oracle_config_to_json(const OracleConfig& c) {
  nlohmann::json j{{"seed", c.seed},
                   {"num_queries", c.num_queries},
                   {"plans_per_query", c.plans_per_query},
                   {"min_nodes", c.min_nodes},
                   {"max_nodes", c.max_nodes},
                   {"noise_sigma", c.noise_sigma},
                   {"num_tables", c.num_tables},
                   {"numeric_columns_per_table", c.numeric_columns_per_table},
                   {"text_columns_per_table", c.text_columns_per_table}};
  if (!c.base_costs.empty()) j["base_costs"] = c.base_costs;
  if (!c.table_size_factors.empty()) j["table_size_factors"] = c.table_size_factors;
  return j;
}

namespace oracle_detail {

inline const std::vector<std::string>& scan_ops() {
  static const std::vector<std::string> v{"Seq Scan", "Index Scan", "Bitmap Heap Scan"};
  return v;
}
inline const std::vector<std::string>& join_ops() {
  static const std::vector<std::string> v{"Nested Loop", "Hash Join", "Merge Join"};
  return v;
}
inline const std::vector<std::string>& unary_ops() {
  static const std::vector<std::string> v{"Sort", "Aggregate", "Materialize"};
  return v;
}

inline std::map<std::string, double> default_base_costs() {
  return {
      {"Seq Scan", 6.0},      {"Index Scan", 2.5}, {"Bitmap Heap Scan", 4.0},
      {"Nested Loop", 14.0},  {"Hash Join", 9.0},  {"Merge Join", 7.0},
      {"Sort", 5.0},          {"Aggregate", 3.0},  {"Materialize", 1.5},
  };
}

}  // namespace oracle_detail

inline std::map<std::string, double> oracle_base_costs(const OracleConfig& cfg) {
  return cfg.base_costs.empty() ? oracle_detail::default_base_costs() : cfg.base_costs;
}

inline std::vector<double> oracle_table_sizes(const OracleConfig& cfg) {
  if (!cfg.table_size_factors.empty()) {
    if (static_cast<int>(cfg.table_size_factors.size()) != cfg.num_tables)
      throw ConfigError("table_size_factors length must equal num_tables");
    return cfg.table_size_factors;
  }
  std::vector<double> sizes(static_cast<std::size_t>(cfg.num_tables));
  for (int i = 0; i < cfg.num_tables; ++i) sizes[static_cast<std::size_t>(i)] = 0.5 * std::pow(2.2, i);
  return sizes;
}

// The schema implied by the config: tables t0..tN with numeric columns c0..
// (range [0, 100*(k+1)]) and text columns s0.., plus all operator kinds.
inline Catalog oracle_catalog(const OracleConfig& cfg) {
  Catalog cat;
  for (const auto& op : oracle_detail::scan_ops()) cat.node_types.push_back(op);
  for (const auto& op : oracle_detail::join_ops()) cat.node_types.push_back(op);
  for (const auto& op : oracle_detail::unary_ops()) cat.node_types.push_back(op);
  for (int t = 0; t < cfg.num_tables; ++t) {
    TableDef table;
    table.name = "t" + std::to_string(t);
    for (int c = 0; c < cfg.numeric_columns_per_table; ++c) {
      ColumnDef col;
      col.name = "c" + std::to_string(c);
      col.kind = ColumnKind::numeric;
      col.lo = 0.0;
      col.hi = 100.0 * (c + 1);
      table.columns.push_back(std::move(col));
    }
    for (int c = 0; c < cfg.text_columns_per_table; ++c) {
      ColumnDef col;
      col.name = "s" + std::to_string(c);
      col.kind = ColumnKind::text;
      table.columns.push_back(std::move(col));
    }
    cat.tables.push_back(std::move(table));
  }
  cat.finalize();
  return cat;
}

namespace oracle_detail {

// Selectivity of one predicate atom in [0,1]; a deterministic function of the
// atom so labels are learnable from features.
inline double atom_selectivity(const PredicateAtom& atom, const Catalog& cat) {
  double nv = 0.5;
  if (std::holds_alternative<double>(atom.operand)) {
    const ColumnDef* def = cat.find_column(atom.column);
    if (def != nullptr && def->kind == ColumnKind::numeric) nv = normalize_value(std::get<double>(atom.operand), def->lo, def->hi);
  } else if (std::holds_alternative<std::string>(atom.operand)) {
    nv = text_to_numeric(std::get<std::string>(atom.operand));
  }
  switch (atom.case_kind) {
    case PredCase::join: return 0.5;
    case PredCase::eq: return 0.05;
    case PredCase::ne: return 0.95;
    case PredCase::gt: return 1.0 - nv;
    case PredCase::ge: return 1.0 - nv;
    case PredCase::lt: return nv;
    case PredCase::le: return nv;
    case PredCase::membership: return 0.3;
  }
  return 0.5;
}

inline double table_factor(const PlanNode& node, const OracleConfig& cfg, const Catalog& cat,
                           const std::vector<double>& sizes) {
  if (node.tables.empty()) return 1.0;
  double logsum = 0.0;
  for (const auto& t : node.tables) {
    const int ti = cat.table_index(t);
    if (ti < 0) throw ConfigError("oracle table '" + t + "' missing from catalog");
    logsum += std::log(sizes[static_cast<std::size_t>(ti)]);
  }
  (void)cfg;
  return std::exp(logsum / static_cast<double>(node.tables.size()));  // geometric mean
}

}  // namespace oracle_detail

// Local operator cost: base(op) * (1 + sum of predicate selectivities) *
// geometric-mean table size factor.
inline double oracle_local_cost(const PlanNode& node, const OracleConfig& cfg, const Catalog& cat,
                                const std::map<std::string, double>& base_costs,
                                const std::vector<double>& sizes) {
  auto it = base_costs.find(node.op_type);
  if (it == base_costs.end()) throw ConfigError("no base cost for operator '" + node.op_type + "'");
  double sel = 0.0;
  for (const auto& atom : node.predicates) sel += oracle_detail::atom_selectivity(atom, cat);
  return it->second * (1.0 + sel) * oracle_detail::table_factor(node, cfg, cat, sizes);
}

// Classical additive recursion: cumulative(v) = local(v) + sum of children's
// cumulatives. Noise, when enabled, multiplies each local cost by a seeded
// lognormal factor, which keeps cumulatives monotone up the tree. Returns
// per-node cumulative milliseconds indexed by node id.
inline std::vector<double> oracle_cost(const PlanTree& tree, const OracleConfig& cfg, const Catalog& cat,
                                       Rng& noise_rng) {
  const auto base_costs = oracle_base_costs(cfg);
  const auto sizes = oracle_table_sizes(cfg);
  std::vector<double> cumulative(static_cast<std::size_t>(tree.size()), 0.0);
  std::vector<double> local(static_cast<std::size_t>(tree.size()), 0.0);
  for (int v = 0; v < tree.size(); ++v) {
    double c = oracle_local_cost(tree.node(v), cfg, cat, base_costs, sizes);
    if (cfg.noise_sigma > 0.0) c *= noise_rng.lognormal_factor(cfg.noise_sigma);
    local[static_cast<std::size_t>(v)] = c;
  }
  for (int v : postorder(tree)) {
    double acc = local[static_cast<std::size_t>(v)];
    for (int ch : tree.node(v).children) acc += cumulative[static_cast<std::size_t>(ch)];
    cumulative[static_cast<std::size_t>(v)] = acc;
  }
  return cumulative;
}

inline std::vector<double> oracle_cost(const PlanTree& tree, const OracleConfig& cfg) {
  const Catalog cat = oracle_catalog(cfg);
  Rng rng(mix64(cfg.seed, fnv1a64(tree.query_id)));
  return oracle_cost(tree, cfg, cat, rng);
}

namespace oracle_detail {

struct BuildNode {
  std::string op;
  std::vector<std::string> tables;
  std::vector<PredicateAtom> predicates;
  std::vector<int> children;  // indices into the build arena
};

// Per-query invariants shared by all candidate plans: the scanned tables and
// their filter predicates.
struct QuerySkeleton {
  std::vector<int> leaf_tables;                           // catalog table indices
  std::vector<std::string> leaf_ops;                      // scan operator per leaf
  std::vector<std::vector<PredicateAtom>> leaf_filters;   // filter atoms per leaf
  int target_nodes = 1;
};

inline QuerySkeleton make_skeleton(const OracleConfig& cfg, const Catalog& cat, Rng& rng) {
  QuerySkeleton sk;
  sk.target_nodes = static_cast<int>(rng.uniform_int(cfg.min_nodes, cfg.max_nodes));
  const int max_leaves = std::min((sk.target_nodes + 1) / 2, cfg.num_tables);
  const int min_leaves = std::min(2, max_leaves);
  const int k = static_cast<int>(rng.uniform_int(min_leaves, max_leaves));
  std::vector<int> tables(static_cast<std::size_t>(cfg.num_tables));
  for (int i = 0; i < cfg.num_tables; ++i) tables[static_cast<std::size_t>(i)] = i;
  rng.shuffle(tables);
  tables.resize(static_cast<std::size_t>(k));
  for (int leaf = 0; leaf < k; ++leaf) {
    const int ti = tables[static_cast<std::size_t>(leaf)];
    sk.leaf_tables.push_back(ti);
    sk.leaf_ops.push_back(scan_ops()[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(scan_ops().size()) - 1))]);
    const auto& table = cat.tables[static_cast<std::size_t>(ti)];
    std::vector<PredicateAtom> filters;
    const int n_filters = static_cast<int>(rng.uniform_int(0, 2));
    for (int f = 0; f < n_filters; ++f) {
      const auto& col = table.columns[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<long>(table.columns.size()) - 1))];
      PredicateAtom atom;
      atom.column = table.name + "." + col.name;
      if (col.kind == ColumnKind::numeric) {
        static const PredCase numeric_cases[] = {PredCase::eq, PredCase::ne,  PredCase::gt, PredCase::ge,
                                                 PredCase::lt, PredCase::le,  PredCase::membership};
        atom.case_kind = numeric_cases[rng.uniform_int(0, 6)];
        atom.operand = rng.uniform(col.lo, col.hi);
      } else {
        atom.case_kind = rng.uniform() < 0.5 ? PredCase::eq : PredCase::ne;
        atom.operand = "v" + std::to_string(rng.uniform_int(0, 999));
      }
      filters.push_back(std::move(atom));
    }
    sk.leaf_filters.push_back(std::move(filters));
  }
  return sk;
}

// Assembles one candidate plan: a random join shape over the skeleton's
// leaves (join order and operators vary per variant), padded with unary
// operators up to the target node count, then labeled by the oracle cost.
inline PlanTree build_variant(const OracleConfig& cfg, const Catalog& cat, const QuerySkeleton& sk,
                              const std::string& query_id, Rng& rng) {
  std::vector<BuildNode> arena;
  std::vector<int> roots;  // current forest, to be merged by joins
  std::vector<std::vector<int>> root_tables;
  const int k = static_cast<int>(sk.leaf_tables.size());
  for (int leaf = 0; leaf < k; ++leaf) {
    BuildNode node;
    node.op = sk.leaf_ops[static_cast<std::size_t>(leaf)];
    node.tables = {cat.tables[static_cast<std::size_t>(sk.leaf_tables[static_cast<std::size_t>(leaf)])].name};
    node.predicates = sk.leaf_filters[static_cast<std::size_t>(leaf)];
    arena.push_back(std::move(node));
    roots.push_back(leaf);
    root_tables.push_back({sk.leaf_tables[static_cast<std::size_t>(leaf)]});
  }
  while (roots.size() > 1) {
    const auto a = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(roots.size()) - 1));
    std::size_t b = a;
    while (b == a) b = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(roots.size()) - 1));
    BuildNode join;
    join.op = join_ops()[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(join_ops().size()) - 1))];
    const int lt = root_tables[a][static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(root_tables[a].size()) - 1))];
    const int rt = root_tables[b][static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(root_tables[b].size()) - 1))];
    const auto& ltab = cat.tables[static_cast<std::size_t>(lt)];
    const auto& rtab = cat.tables[static_cast<std::size_t>(rt)];
    PredicateAtom atom;
    atom.case_kind = PredCase::join;
    atom.column = ltab.name + ".c" + std::to_string(rng.uniform_int(0, cfg.numeric_columns_per_table - 1));
    atom.operand = ColumnRef{rtab.name + ".c" + std::to_string(rng.uniform_int(0, cfg.numeric_columns_per_table - 1))};
    join.predicates.push_back(std::move(atom));
    join.tables = {ltab.name, rtab.name};
    std::sort(join.tables.begin(), join.tables.end());
    join.tables.erase(std::unique(join.tables.begin(), join.tables.end()), join.tables.end());
    join.children = {roots[a], roots[b]};
    arena.push_back(std::move(join));

    std::vector<int> merged = root_tables[a];
    merged.insert(merged.end(), root_tables[b].begin(), root_tables[b].end());
    const auto hi = std::max(a, b), lo = std::min(a, b);
    roots.erase(roots.begin() + static_cast<long>(hi));
    roots.erase(roots.begin() + static_cast<long>(lo));
    root_tables.erase(root_tables.begin() + static_cast<long>(hi));
    root_tables.erase(root_tables.begin() + static_cast<long>(lo));
    roots.push_back(static_cast<int>(arena.size()) - 1);
    root_tables.push_back(std::move(merged));
  }
  int root = roots.front();
  // Pad with unary operators over random subtrees until the target size.
  int unaries = sk.target_nodes - static_cast<int>(arena.size());
  while (unaries-- > 0) {
    const int over = static_cast<int>(rng.uniform_int(0, static_cast<long>(arena.size()) - 1));
    BuildNode u;
    u.op = unary_ops()[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(unary_ops().size()) - 1))];
    u.children = {over};
    const int uid = static_cast<int>(arena.size());
    arena.push_back(std::move(u));
    if (over == root) {
      root = uid;
    } else {
      for (int i = 0; i < uid; ++i) {
        for (auto& c : arena[static_cast<std::size_t>(i)].children) {
          if (c == over) c = uid;
        }
      }
    }
  }

  // Materialize with ids in document (pre)order.
  PlanTree tree;
  tree.query_id = query_id;
  std::vector<std::pair<int, int>> stack{{root, -1}};  // (arena id, parent plan id)
  while (!stack.empty()) {
    const auto [aid, parent] = stack.back();
    stack.pop_back();
    PlanNode node;
    node.node_id = tree.size();
    const BuildNode& b = arena[static_cast<std::size_t>(aid)];
    node.op_type = b.op;
    node.tables = b.tables;
    node.predicates = b.predicates;
    const int my_id = node.node_id;
    if (parent >= 0) tree.node(parent).children.push_back(my_id);
    tree.nodes.push_back(std::move(node));
    // Reverse order so the first child is materialized first (stack is LIFO).
    for (auto it = b.children.rbegin(); it != b.children.rend(); ++it) stack.emplace_back(*it, my_id);
  }
  tree.root_id = 0;
  validate_tree(tree);
  return tree;
}

}  // namespace oracle_detail

// Deterministic synthetic workload: per query a skeleton (tables + filters)
// shared by plans_per_query structural variants, all labeled by the additive
// oracle cost.
inline std::vector<CandidatePlanSet> generate_workload(const OracleConfig& cfg) {
  cfg.validate();
  const Catalog cat = oracle_catalog(cfg);
  std::vector<CandidatePlanSet> out;
  out.reserve(static_cast<std::size_t>(cfg.num_queries));
  for (int qi = 0; qi < cfg.num_queries; ++qi) {
    char qid[32];
    std::snprintf(qid, sizeof qid, "q%06d", qi);
    CandidatePlanSet set;
    set.query_id = qid;
    Rng rng_q(mix64(cfg.seed, static_cast<std::uint64_t>(qi)));
    const auto skeleton = oracle_detail::make_skeleton(cfg, cat, rng_q);
    for (int vi = 0; vi < cfg.plans_per_query; ++vi) {
      Rng rng_v(mix64(mix64(cfg.seed, static_cast<std::uint64_t>(qi)), 1000 + static_cast<std::uint64_t>(vi)));
      PlanTree plan = oracle_detail::build_variant(cfg, cat, skeleton, set.query_id, rng_v);
      const std::vector<double> cumulative = oracle_cost(plan, cfg, cat, rng_v);
      for (int v = 0; v < plan.size(); ++v) plan.node(v).actual_total_ms = cumulative[static_cast<std::size_t>(v)];
      set.plans.push_back(std::move(plan));
    }
    out.push_back(std::move(set));
  }
  return out;
}

}  // namespace reqo
