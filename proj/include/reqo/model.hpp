#pragma once

#include <string>
#include <vector>

#include "reqo/bigg.hpp"
#include "reqo/catalog.hpp"
#include "reqo/encoder.hpp"
#include "reqo/estimator.hpp"
#include "reqo/explainer.hpp"
#include "reqo/plan.hpp"

namespace reqo {

struct ModelConfig {
  int d_t = 32;
  int d_c = 8;
  BiGGConfig bigg;
  int estimator_width = 64;
  int explainer_width = 64;

  void validate() const {
    if (d_t <= 0 || d_c <= 0) throw ConfigError("encoder dims must be positive");
    bigg.validate();
    if (estimator_width <= 0 || explainer_width <= 0) throw ConfigError("MLP widths must be positive");
  }
};

// The complete cost model: catalog binding plus every learnable component in
// one parameter store. Values are immutable during inference; training is the
// single writer.
struct ReqoModel {
  Catalog catalog;
  ModelConfig config;
  nn::ParamStore params;
  EncoderParams encoder;
  BiGGParams bigg;
  EstimatorParams estimator;
  ExplainerParams explainer;
};

inline ReqoModel make_model(Catalog catalog, const ModelConfig& config, double margin, std::uint64_t seed) {
  config.validate();
  catalog.validate();
  ReqoModel m;
  m.catalog = std::move(catalog);
  m.config = config;
  Rng rng(mix64(seed, fnv1a64("model-init")));
  m.encoder = make_encoder_params(m.params, m.catalog, config.d_t, config.d_c, rng);
  m.bigg = make_bigg_params(m.params, feature_length(m.catalog, m.encoder), config.bigg, rng);
  EstimatorConfig est_cfg;
  est_cfg.hidden_width = config.estimator_width;
  est_cfg.margin = margin;
  m.estimator = make_estimator_params(m.params, config.bigg.hidden_dim, est_cfg, rng);
  ExplainerConfig expl_cfg;
  expl_cfg.hidden_width = config.explainer_width;
  m.explainer = make_explainer_params(m.params, config.bigg.hidden_dim, expl_cfg, rng);
  return m;
}

// ---- inference ----

namespace detail {

// Embeds a list of trees on one tape and returns the G x hidden value matrix.
inline ad::Mat embed_trees_once(const ReqoModel& m, const std::vector<const PlanTree*>& trees) {
  std::vector<std::vector<NodeInputs>> inputs;
  std::vector<TreeStructure> structures;
  inputs.reserve(trees.size());
  structures.reserve(trees.size());
  std::vector<const NodeInputs*> flat;
  std::vector<const TreeStructure*> graph_ptrs;
  for (const auto* t : trees) {
    structures.push_back(TreeStructure::of(*t));
    std::vector<NodeInputs> per_node;
    per_node.reserve(static_cast<std::size_t>(t->size()));
    for (const auto& node : t->nodes) per_node.push_back(preprocess_node(node, m.catalog));
    inputs.push_back(std::move(per_node));
  }
  for (std::size_t i = 0; i < trees.size(); ++i) {
    graph_ptrs.push_back(&structures[i]);
    for (const auto& ni : inputs[i]) flat.push_back(&ni);
  }
  ad::Tape tape;
  ad::Var features = encode_nodes(tape, m.params, m.encoder, m.catalog, flat);
  ad::Var emb = embed_graphs(tape, m.params, m.bigg, features, GraphBatch::build(graph_ptrs));
  return tape.value(emb);
}

}  // namespace detail

// Embeddings for a list of plans, chunked to bound tape memory.
inline std::vector<Eigen::VectorXd> embed_plans(const ReqoModel& m, const std::vector<const PlanTree*>& trees,
                                                std::size_t chunk = 64) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(trees.size());
  for (std::size_t i = 0; i < trees.size(); i += chunk) {
    const std::size_t n = std::min(chunk, trees.size() - i);
    std::vector<const PlanTree*> part(trees.begin() + static_cast<long>(i),
                                      trees.begin() + static_cast<long>(i + n));
    const ad::Mat emb = detail::embed_trees_once(m, part);
    for (Eigen::Index r = 0; r < emb.rows(); ++r) out.push_back(emb.row(r).transpose());
  }
  return out;
}

inline std::vector<CostEstimate> estimate_plans(const ReqoModel& m, const std::vector<const PlanTree*>& trees) {
  const auto embs = embed_plans(m, trees);
  std::vector<CostEstimate> out;
  out.reserve(embs.size());
  for (const auto& e : embs) out.push_back(estimate(e, m.params, m.estimator));
  return out;
}

inline CostEstimate estimate_plan(const ReqoModel& m, const PlanTree& tree) {
  return estimate_plans(m, {&tree}).front();
}

// Argmin of the integrated cost over the candidate set; ties resolve to the
// lowest plan index.
inline std::size_t select_plan(const CandidatePlanSet& candidates, const ReqoModel& m) {
  if (candidates.plans.empty()) throw ConfigError("candidate set is empty");
  std::vector<const PlanTree*> trees;
  for (const auto& p : candidates.plans) trees.push_back(&p);
  const auto estimates = estimate_plans(m, trees);
  std::vector<double> scores;
  scores.reserve(estimates.size());
  for (const auto& e : estimates) scores.push_back(e.integrated);
  return argmin_index(scores);
}

// ---- explanation ----

struct PlanExplanationReport {
  std::string query_id;
  std::vector<SubtreeContribution> subtrees;   // every closed subtree, leaves included
  std::vector<NodeOpContribution> nodes;       // per-node operation contributions
};

// Scores every closed subtree of the plan (leaves included, so the per-node
// decomposition is total) and derives operation contributions. Actual ratios
// are attached when the plan carries runtimes.
inline PlanExplanationReport explain_plan(const ReqoModel& m, const PlanTree& tree) {
  PlanExplanationReport report;
  report.query_id = tree.query_id;
  const auto refs = extract_subtrees(tree, /*include_leaves=*/true);
  std::vector<PlanTree> sub_trees;
  sub_trees.reserve(refs.size());
  for (const auto& ref : refs) sub_trees.push_back(subtree_to_tree(tree, ref));
  std::vector<const PlanTree*> graphs{&tree};
  for (const auto& st : sub_trees) graphs.push_back(&st);
  const ad::Mat embs = detail::embed_trees_once(m, graphs);

  ad::Tape tape;
  ad::Var sub_embs = tape.leaf(embs.bottomRows(embs.rows() - 1));
  ad::Var plan_emb = tape.leaf(embs.topRows(1).replicate(embs.rows() - 1, 1));
  const ad::Mat ec = tape.value(explain_batch(tape, m.params, m.explainer, sub_embs, plan_emb));

  const bool has_labels = tree.node(tree.root_id).actual_total_ms > 0.0;
  std::unordered_map<int, double> ec_by_root;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    SubtreeContribution contrib;
    contrib.subtree = refs[i];
    contrib.ec = ec(static_cast<Eigen::Index>(i), 0);
    if (has_labels) contrib.ac = actual_contribution(tree, refs[i]);
    ec_by_root[refs[i].root_node_id] = contrib.ec;
    report.subtrees.push_back(std::move(contrib));
  }
  report.nodes = node_operation_contributions(tree, ec_by_root);
  return report;
}

}  // namespace reqo
