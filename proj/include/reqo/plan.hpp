#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "reqo/common.hpp"

namespace reqo {

// The eight predicate cases. Order is load-bearing: it fixes the slot layout
// of the per-column case vector and must not change between checkpoints.
enum class PredCase : int {
  join = 0,
  eq = 1,
  ne = 2,
  gt = 3,
  ge = 4,
  lt = 5,
  le = 6,
  membership = 7,
};

inline constexpr int kNumPredCases = 8;

inline const char* pred_case_name(PredCase c) {
  switch (c) {
    case PredCase::join: return "join";
    case PredCase::eq: return "=";
    case PredCase::ne: return "<>";
    case PredCase::gt: return ">";
    case PredCase::ge: return ">=";
    case PredCase::lt: return "<";
    case PredCase::le: return "<=";
    case PredCase::membership: return "in";
  }
  return "?";
}

struct ColumnRef {
  std::string qualified;  // "table.column"
};

using Operand = std::variant<double, std::string, ColumnRef>;

struct PredicateAtom {
  std::string column;  // "table.column" the predicate applies to
  PredCase case_kind = PredCase::eq;
  Operand operand = 0.0;
};

struct PlanNode {
  int node_id = 0;
  std::string op_type;
  std::vector<std::string> tables;  // sorted, duplicate-free
  std::vector<PredicateAtom> predicates;
  // Cumulative runtime of this node and all descendants, already multiplied
  // by the loop count (recorded per-loop times are per iteration).
  double actual_total_ms = 0.0;
  int loop_count = 1;
  std::vector<int> children;  // ordered; order feeds postorder and the GRU
};

struct PlanTree {
  std::vector<PlanNode> nodes;  // nodes[i].node_id == i
  int root_id = 0;
  std::string query_id;

  int size() const { return static_cast<int>(nodes.size()); }
  const PlanNode& node(int id) const { return nodes[static_cast<std::size_t>(id)]; }
  PlanNode& node(int id) { return nodes[static_cast<std::size_t>(id)]; }
  bool is_leaf(int id) const { return node(id).children.empty(); }
};

// Checks the rooted-tree invariants: contiguous ids, a single root, every
// non-root node with exactly one parent, no cycles.
inline void validate_tree(const PlanTree& tree) {
  const int n = tree.size();
  if (n == 0) throw StructureError("plan tree has no nodes");
  if (tree.root_id < 0 || tree.root_id >= n) throw StructureError("root_id out of range");
  std::vector<int> parent_count(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    if (tree.nodes[static_cast<std::size_t>(i)].node_id != i)
      throw StructureError("node_ids are not contiguous in storage order");
    for (int c : tree.nodes[static_cast<std::size_t>(i)].children) {
      if (c < 0 || c >= n) throw StructureError("child id out of range");
      ++parent_count[static_cast<std::size_t>(c)];
    }
  }
  for (int i = 0; i < n; ++i) {
    const int expected = (i == tree.root_id) ? 0 : 1;
    if (parent_count[static_cast<std::size_t>(i)] != expected) {
      if (parent_count[static_cast<std::size_t>(i)] > expected)
        throw StructureError("node " + std::to_string(i) + " has multiple parents (cycle or DAG)");
      throw StructureError("node " + std::to_string(i) + " is unreachable (multiple roots)");
    }
  }
  // Parent counts alone admit a cycle detached from the root; walk from the
  // root and require full coverage.
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::vector<int> stack{tree.root_id};
  int visited = 0;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    if (seen[static_cast<std::size_t>(v)]) throw StructureError("cycle reachable from root");
    seen[static_cast<std::size_t>(v)] = 1;
    ++visited;
    for (int c : tree.nodes[static_cast<std::size_t>(v)].children) stack.push_back(c);
  }
  if (visited != n) throw StructureError("tree is not connected");
}

// Children-before-parent order, children in stored order, root last.
// Iterative so deep chains cannot overflow the stack.
inline std::vector<int> postorder(const PlanTree& tree) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(tree.size()));
  // (node, next child index)
  std::vector<std::pair<int, std::size_t>> stack;
  stack.emplace_back(tree.root_id, 0);
  while (!stack.empty()) {
    auto& [v, ci] = stack.back();
    const auto& children = tree.node(v).children;
    if (ci < children.size()) {
      const int child = children[ci++];
      stack.emplace_back(child, 0);
    } else {
      out.push_back(v);
      stack.pop_back();
    }
  }
  return out;
}

struct EdgeViews {
  std::vector<std::pair<int, int>> down_edges;  // (parent, child)
  std::vector<std::pair<int, int>> up_edges;    // (child, parent)
};

// The two opposite-direction views of the tree's edges. up_edges is exactly
// down_edges with endpoints swapped, element-wise.
inline EdgeViews directed_edge_views(const PlanTree& tree) {
  EdgeViews views;
  views.down_edges.reserve(static_cast<std::size_t>(tree.size()) - 1);
  for (const auto& node : tree.nodes) {
    for (int c : node.children) views.down_edges.emplace_back(node.node_id, c);
  }
  views.up_edges.reserve(views.down_edges.size());
  for (const auto& [p, c] : views.down_edges) views.up_edges.emplace_back(c, p);
  return views;
}

// A closed subtree: a root plus every descendant. member_ids is sorted.
struct SubtreeRef {
  int root_node_id = 0;
  std::vector<int> member_ids;
};

namespace detail {
inline void collect_descendants(const PlanTree& tree, int root, std::vector<int>& out) {
  std::vector<int> stack{root};
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    out.push_back(v);
    for (int c : tree.node(v).children) stack.push_back(c);
  }
  std::sort(out.begin(), out.end());
}
}  // namespace detail

// One subtree per eligible node, in ascending root id. With include_leaves
// false only non-leaf nodes qualify, except the root which always does (a
// single-node plan still yields its whole-plan subtree).
inline std::vector<SubtreeRef> extract_subtrees(const PlanTree& tree, bool include_leaves) {
  std::vector<SubtreeRef> out;
  for (int v = 0; v < tree.size(); ++v) {
    if (!include_leaves && tree.is_leaf(v) && v != tree.root_id) continue;
    SubtreeRef ref;
    ref.root_node_id = v;
    detail::collect_descendants(tree, v, ref.member_ids);
    out.push_back(std::move(ref));
  }
  return out;
}

// Ratio of the subtree root's cumulative runtime to the plan root's.
// Values outside [0,1] (possible in real EXPLAIN data with parallel workers)
// are clamped with a warning; the root subtree is exactly 1.
inline double actual_contribution(const PlanTree& tree, const SubtreeRef& st) {
  const double total = tree.node(tree.root_id).actual_total_ms;
  if (total <= 0.0) throw LabelError("plan root has zero runtime; contribution labels are degenerate");
  if (st.root_node_id == tree.root_id) return 1.0;
  const double part = tree.node(st.root_node_id).actual_total_ms;
  const double ratio = part / total;
  if (ratio < 0.0 || ratio > 1.0) {
    warn("actual contribution " + std::to_string(ratio) + " outside [0,1] for plan '" + tree.query_id +
         "' subtree " + std::to_string(st.root_node_id) + "; clamping");
    return std::clamp(ratio, 0.0, 1.0);
  }
  return ratio;
}

// Materializes a subtree as a standalone PlanTree with contiguous node ids.
// Relative id order is preserved, so traversal order within the subtree is
// unchanged.
inline PlanTree subtree_to_tree(const PlanTree& tree, const SubtreeRef& st) {
  PlanTree out;
  out.query_id = tree.query_id;
  std::vector<int> remap(static_cast<std::size_t>(tree.size()), -1);
  for (std::size_t i = 0; i < st.member_ids.size(); ++i)
    remap[static_cast<std::size_t>(st.member_ids[i])] = static_cast<int>(i);
  out.nodes.reserve(st.member_ids.size());
  for (int old_id : st.member_ids) {
    PlanNode node = tree.node(old_id);
    node.node_id = remap[static_cast<std::size_t>(old_id)];
    for (int& c : node.children) c = remap[static_cast<std::size_t>(c)];
    out.nodes.push_back(std::move(node));
  }
  out.root_id = remap[static_cast<std::size_t>(st.root_node_id)];
  return out;
}

// Alternative plans for one query, each carrying actual runtimes.
struct CandidatePlanSet {
  std::string query_id;
  std::vector<PlanTree> plans;
};

inline void validate_candidate_set(const CandidatePlanSet& set) {
  if (set.plans.empty()) throw StructureError("candidate set '" + set.query_id + "' has no plans");
  for (const auto& p : set.plans) {
    if (p.query_id != set.query_id)
      throw StructureError("plan query_id '" + p.query_id + "' does not match set '" + set.query_id + "'");
    validate_tree(p);
  }
}

}  // namespace reqo
