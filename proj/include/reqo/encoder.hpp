#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "reqo/autodiff.hpp"
#include "reqo/catalog.hpp"
#include "reqo/nn.hpp"
#include "reqo/plan.hpp"

namespace reqo {

// Per-column predicate feature: one slot per predicate case.
struct ColumnCaseVector {
  std::array<double, kNumPredCases> values{};
};

// (clamp(v, lo, hi) - lo) / (hi - lo).
inline double normalize_value(double v, double lo, double hi) {
  const double c = std::clamp(v, lo, hi);
  return (c - lo) / (hi - lo);
}

namespace detail {
inline constexpr std::uint64_t kTextHashSeed = 0x7265716f74657874ull;
}

// Deterministic stand-in for a learned text embedding: a seeded 64-bit hash
// scaled into [0,1). Stable across runs and platforms; empty string maps to 0.
inline double text_to_numeric(std::string_view s) {
  if (s.empty()) return 0.0;
  const std::uint64_t h = mix64(fnv1a64(s) ^ detail::kTextHashSeed);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Fills the 8-slot case vector for one column from a node's predicate list.
// Join and membership slots are indicators (no single literal exists);
// numeric literals are range-normalized, string literals hashed. Later atoms
// on the same (column, case) overwrite earlier ones. Out-of-range numeric
// literals clamp with a warning.
inline ColumnCaseVector encode_case_vector(const std::vector<PredicateAtom>& predicates,
                                           const std::string& column, const Catalog& catalog) {
  const ColumnDef* def = catalog.find_column(column);
  if (def == nullptr) throw CatalogError("column '" + column + "' not in catalog");
  ColumnCaseVector out;
  for (const auto& atom : predicates) {
    if (atom.column != column) continue;
    const int slot = static_cast<int>(atom.case_kind);
    if (atom.case_kind == PredCase::join || atom.case_kind == PredCase::membership) {
      out.values[static_cast<std::size_t>(slot)] = 1.0;
      continue;
    }
    double v = 1.0;  // column-reference operands carry an indicator
    if (std::holds_alternative<double>(atom.operand)) {
      const double lit = std::get<double>(atom.operand);
      if (def->kind == ColumnKind::numeric) {
        if (lit < def->lo || lit > def->hi)
          warn("literal " + std::to_string(lit) + " outside range of '" + column + "'; clamping");
        v = normalize_value(lit, def->lo, def->hi);
      } else {
        if (lit < 0.0 || lit > 1.0) warn("numeric literal on text column '" + column + "'; clamping to [0,1]");
        v = std::clamp(lit, 0.0, 1.0);
      }
    } else if (std::holds_alternative<std::string>(atom.operand)) {
      v = text_to_numeric(std::get<std::string>(atom.operand));
    }
    out.values[static_cast<std::size_t>(slot)] = v;
  }
  return out;
}

// Learnable encoder parameters: the node-type projection and one dedicated
// matrix per catalog column mapping its case vector to a d_c embedding.
struct EncoderParams {
  int d_t = 32;
  int d_c = 8;
  nn::Linear type_proj;           // (|node_types| x d_t) weight + bias
  std::vector<int> column_mats;   // per global column id: (8 x d_c)
};

inline EncoderParams make_encoder_params(nn::ParamStore& store, const Catalog& catalog, int d_t, int d_c,
                                         Rng& rng) {
  if (d_t <= 0 || d_c <= 0) throw ConfigError("encoder dims must be positive");
  EncoderParams p;
  p.d_t = d_t;
  p.d_c = d_c;
  p.type_proj = nn::make_linear(store, "encoder.type_proj", static_cast<int>(catalog.node_types.size()), d_t,
                                rng, /*bias=*/true);
  p.column_mats.reserve(static_cast<std::size_t>(catalog.num_columns()));
  for (int c = 0; c < catalog.num_columns(); ++c)
    p.column_mats.push_back(store.add("encoder.m" + std::to_string(c), nn::xavier_uniform(kNumPredCases, d_c, rng)));
  return p;
}

inline int feature_length(const Catalog& catalog, const EncoderParams& p) {
  const int t = static_cast<int>(catalog.tables.size());
  return p.d_t + t + t * p.d_c;
}

// Constant (non-learnable) per-node inputs, resolved against the catalog once
// so batched encoding does no string lookups.
struct NodeInputs {
  int op_index = -1;
  std::vector<int> table_indices;
  struct ColRef {
    int column = -1;  // global column id
    int table = -1;   // table owning the column
    Eigen::Matrix<double, 1, kNumPredCases> f;
  };
  std::vector<ColRef> cols;  // one per column referenced by this node's predicates
};

inline NodeInputs preprocess_node(const PlanNode& node, const Catalog& catalog) {
  NodeInputs in;
  in.op_index = catalog.node_type_index(node.op_type);
  if (in.op_index < 0) throw CatalogError("operator kind '" + node.op_type + "' not in catalog");
  for (const auto& t : node.tables) {
    const int ti = catalog.table_index(t);
    if (ti < 0) throw CatalogError("table '" + t + "' not in catalog");
    in.table_indices.push_back(ti);
  }
  // Distinct referenced columns, in ascending global id for determinism.
  std::map<int, std::string> referenced;
  for (const auto& atom : node.predicates) {
    const int ci = catalog.column_index(atom.column);
    if (ci < 0) throw CatalogError("column '" + atom.column + "' not in catalog");
    referenced.emplace(ci, atom.column);
  }
  for (const auto& [ci, name] : referenced) {
    NodeInputs::ColRef ref;
    ref.column = ci;
    const auto dot = name.find('.');
    ref.table = catalog.table_index(name.substr(0, dot));
    const ColumnCaseVector cv = encode_case_vector(node.predicates, name, catalog);
    for (int k = 0; k < kNumPredCases; ++k) ref.f(0, k) = cv.values[static_cast<std::size_t>(k)];
    in.cols.push_back(std::move(ref));
  }
  return in;
}

// Batched node feature construction on the tape. Output is N x d with the
// layout [type embedding | table one-hot | per-table max-pooled column
// embeddings]. Tables with no referenced columns contribute a zero block.
inline ad::Var encode_nodes(ad::Tape& tape, const nn::ParamStore& store, const EncoderParams& params,
                            const Catalog& catalog, const std::vector<const NodeInputs*>& nodes) {
  const int n = static_cast<int>(nodes.size());
  const int num_tables = static_cast<int>(catalog.tables.size());

  // Node-type block: one-hot times the projection = row gather.
  std::vector<int> op_rows(static_cast<std::size_t>(n));
  const auto& type_w = store.value(params.type_proj.w);
  for (int i = 0; i < n; ++i) {
    const int op = nodes[static_cast<std::size_t>(i)]->op_index;
    if (op < 0 || op >= type_w.rows())
      throw ConfigError("node-type index outside encoder projection (catalog changed after init?)");
    op_rows[static_cast<std::size_t>(i)] = op;
  }
  ad::Var type_block = tape.gather_rows(store.on(tape, params.type_proj.w), std::move(op_rows));
  type_block = tape.add_rowvec(type_block, store.on(tape, params.type_proj.b));

  // Table one-hot block (constant input).
  ad::Mat table_onehot = ad::Mat::Zero(n, num_tables);
  for (int i = 0; i < n; ++i)
    for (int t : nodes[static_cast<std::size_t>(i)]->table_indices) table_onehot(i, t) = 1.0;
  ad::Var table_block = tape.leaf(std::move(table_onehot));

  // Predicate block: per referenced column, E(c) = F(c) * M(c); pooled per
  // (node, table) group by elementwise max; scattered into the table's slice.
  struct Ref {
    int node, table, column;
    const Eigen::Matrix<double, 1, kNumPredCases>* f;
  };
  std::vector<Ref> refs;
  for (int i = 0; i < n; ++i)
    for (const auto& cr : nodes[static_cast<std::size_t>(i)]->cols)
      refs.push_back(Ref{i, cr.table, cr.column, &cr.f});

  ad::Var pred_block;
  const int pred_width = num_tables * params.d_c;
  if (refs.empty()) {
    pred_block = tape.leaf(ad::Mat::Zero(n, pred_width));
  } else {
    // Group refs by column so each M(c) is applied as one matmul.
    std::vector<int> by_column(refs.size());
    for (std::size_t i = 0; i < refs.size(); ++i) by_column[i] = static_cast<int>(i);
    std::stable_sort(by_column.begin(), by_column.end(),
                     [&](int a, int b) { return refs[static_cast<std::size_t>(a)].column < refs[static_cast<std::size_t>(b)].column; });
    std::vector<int> stack_pos(refs.size());  // ref -> row in the stacked embedding matrix
    ad::Var embedded;  // built column group by column group
    bool first = true;
    std::size_t i = 0;
    int rows_emitted = 0;
    while (i < by_column.size()) {
      std::size_t j = i;
      const int col = refs[static_cast<std::size_t>(by_column[i])].column;
      while (j < by_column.size() && refs[static_cast<std::size_t>(by_column[j])].column == col) ++j;
      ad::Mat f_stack(static_cast<Eigen::Index>(j - i), kNumPredCases);
      for (std::size_t k = i; k < j; ++k) {
        f_stack.row(static_cast<Eigen::Index>(k - i)) = *refs[static_cast<std::size_t>(by_column[k])].f;
        stack_pos[static_cast<std::size_t>(by_column[k])] = rows_emitted + static_cast<int>(k - i);
      }
      ad::Var group = tape.matmul(tape.leaf(std::move(f_stack)),
                                  store.on(tape, params.column_mats[static_cast<std::size_t>(col)]));
      embedded = first ? group : tape.concat_rows(embedded, group);
      first = false;
      rows_emitted += static_cast<int>(j - i);
      i = j;
    }
    // Reorder rows into (node, table) groups for the pooled max.
    std::vector<int> by_group(refs.size());
    for (std::size_t k = 0; k < refs.size(); ++k) by_group[k] = static_cast<int>(k);
    std::stable_sort(by_group.begin(), by_group.end(), [&](int a, int b) {
      const Ref& ra = refs[static_cast<std::size_t>(a)];
      const Ref& rb = refs[static_cast<std::size_t>(b)];
      return std::pair(ra.node, ra.table) < std::pair(rb.node, rb.table);
    });
    std::vector<int> perm(refs.size());
    for (std::size_t k = 0; k < refs.size(); ++k)
      perm[k] = stack_pos[static_cast<std::size_t>(by_group[k])];
    ad::Var grouped = tape.gather_rows(embedded, std::move(perm));

    std::vector<int> seg_starts;
    std::vector<int> group_node, group_col;
    int prev_node = -1, prev_table = -1;
    for (std::size_t k = 0; k < by_group.size(); ++k) {
      const Ref& r = refs[static_cast<std::size_t>(by_group[k])];
      if (r.node != prev_node || r.table != prev_table) {
        seg_starts.push_back(static_cast<int>(k));
        group_node.push_back(r.node);
        group_col.push_back(r.table * params.d_c);
        prev_node = r.node;
        prev_table = r.table;
      }
    }
    seg_starts.push_back(static_cast<int>(by_group.size()));
    ad::Var pooled = tape.segment_max(grouped, std::move(seg_starts));
    pred_block = tape.scatter_rows_to_blocks(pooled, std::move(group_node), std::move(group_col), n, pred_width);
  }

  return tape.concat_cols(type_block, tape.concat_cols(table_block, pred_block));
}

// Single-node convenience wrapper over the batched path.
inline Eigen::VectorXd encode_node(const PlanNode& node, const Catalog& catalog,
                                   const nn::ParamStore& store, const EncoderParams& params) {
  const NodeInputs in = preprocess_node(node, catalog);
  ad::Tape tape;
  const ad::Var out = encode_nodes(tape, store, params, catalog, {&in});
  return tape.value(out).row(0).transpose();
}

}  // namespace reqo
