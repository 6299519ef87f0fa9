#pragma once

#include <cmath>
#include <optional>
#include <unordered_map>
#include <vector>

#include "reqo/autodiff.hpp"
#include "reqo/nn.hpp"
#include "reqo/plan.hpp"

namespace reqo {

// Estimated (and, when labels exist, actual) contribution of one subtree.
struct SubtreeContribution {
  SubtreeRef subtree;
  double ec = 0.0;
  std::optional<double> ac;
};

struct ExplainerConfig {
  int hidden_width = 64;

  void validate() const {
    if (hidden_width <= 0) throw ConfigError("explainer hidden width must be positive");
  }
};

// The contribution estimator: a 4-layer FC stack over the concatenated
// (subtree embedding, plan embedding) pair, squashed into [0,1].
struct ExplainerParams {
  nn::Mlp stack;
};

inline ExplainerParams make_explainer_params(nn::ParamStore& store, int embedding_dim,
                                             const ExplainerConfig& cfg, Rng& rng) {
  cfg.validate();
  const int w = cfg.hidden_width;
  ExplainerParams p;
  p.stack = nn::make_mlp(store, "explainer.stack", 2 * embedding_dim, {w, w, w, 1},
                         nn::FinalSquash::logistic, rng);
  return p;
}

// Batched: row k holds the subtree embedding and its plan's embedding.
inline ad::Var explain_batch(ad::Tape& tape, const nn::ParamStore& store, const ExplainerParams& p,
                             ad::Var subtree_embs, ad::Var plan_embs, double dropout_rate = 0.0,
                             Rng* dropout_rng = nullptr) {
  ad::Var joined = tape.concat_cols(subtree_embs, plan_embs);
  if (tape.value(joined).cols() != store.value(p.stack.layers.front().w).rows())
    throw ConfigError("embedding width does not match explainer input");
  return nn::apply_mlp(tape, store, p.stack, joined, dropout_rate, dropout_rng);
}

// Estimated contribution of one subtree to its plan's predicted cost.
inline double explain_subtree(const Eigen::VectorXd& emb_subtree, const Eigen::VectorXd& emb_plan,
                              const nn::ParamStore& store, const ExplainerParams& p) {
  if (emb_subtree.size() != emb_plan.size())
    throw ConfigError("subtree and plan embeddings have different lengths");
  ad::Tape tape;
  return tape.scalar(explain_batch(tape, store, p, tape.leaf(emb_subtree.transpose()),
                                   tape.leaf(emb_plan.transpose())));
}

// ---- explanation loss ----

struct PlanExplanation {
  std::vector<double> ec;  // estimated contribution per subtree
  std::vector<double> ac;  // actual contribution per subtree, aligned with ec
};

// Mean over plans of the per-plan mean squared EC/AC discrepancy.
inline double explanation_loss(const std::vector<PlanExplanation>& plans) {
  if (plans.empty()) throw ConfigError("explanation_loss over an empty plan list is undefined");
  double acc = 0.0;
  for (const auto& p : plans) {
    if (p.ec.empty() || p.ec.size() != p.ac.size())
      throw ConfigError("EC and AC lists must be aligned and non-empty");
    double inner = 0.0;
    for (std::size_t k = 0; k < p.ec.size(); ++k) {
      const double d = p.ac[k] - p.ec[k];
      inner += d * d;
    }
    acc += inner / static_cast<double>(p.ec.size());
  }
  return acc / static_cast<double>(plans.size());
}

// Tape version: ec is S x 1 over all subtrees of all plans in the batch;
// weights carry 1/(num_plans * K_i) per row so the sum reproduces the nested
// mean structure.
inline ad::Var explanation_loss_on_tape(ad::Tape& tape, ad::Var ec, const Eigen::VectorXd& ac,
                                        const Eigen::VectorXd& weights) {
  ad::Var diff = tape.sub(tape.leaf(ac), ec);
  return tape.sum(tape.cwise_mul_const(tape.square(diff), weights));
}

// ---- per-node operation contributions ----

struct NodeOpContribution {
  int node_id = 0;
  double value = 0.0;     // may be negative when subtree ECs are inconsistent
  bool negative = false;  // flagged, not clamped
};

// Converts subtree contributions into per-node operation contributions:
// leaves keep their subtree value, internal nodes get their subtree value
// minus the children's. Negative results are reported with a flag; the sum
// over all nodes telescopes to the root subtree's value.
inline std::vector<NodeOpContribution> node_operation_contributions(
    const PlanTree& tree, const std::unordered_map<int, double>& ec_by_root) {
  std::vector<NodeOpContribution> out;
  out.reserve(static_cast<std::size_t>(tree.size()));
  auto ec_of = [&](int id) {
    auto it = ec_by_root.find(id);
    if (it == ec_by_root.end())
      throw ConfigError("missing subtree contribution for node " + std::to_string(id) +
                        "; explanation coverage is incomplete");
    return it->second;
  };
  for (int id = 0; id < tree.size(); ++id) {
    NodeOpContribution c;
    c.node_id = id;
    if (tree.is_leaf(id)) {
      c.value = ec_of(id);
    } else {
      double child_sum = 0.0;
      for (int ch : tree.node(id).children) child_sum += ec_of(ch);
      c.value = ec_of(id) - child_sum;
    }
    if (c.value < 0.0) {
      c.negative = true;
      warn("negative operation contribution " + std::to_string(c.value) + " at node " +
           std::to_string(id) + " of plan '" + tree.query_id + "'");
    }
    out.push_back(c);
  }
  return out;
}

// Diagnostic similarity between two embeddings; the learned estimator above
// is the normative contribution measure.
inline double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ConfigError("cosine_similarity over different lengths");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw ConfigError("cosine_similarity undefined for zero vectors");
  return a.dot(b) / (na * nb);
}

}  // namespace reqo
