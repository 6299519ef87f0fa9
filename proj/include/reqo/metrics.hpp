#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include <json.hpp>

#include "reqo/common.hpp"
#include "reqo/plan.hpp"

namespace reqo {

// max(est, act) / min(est, act); scale-free, symmetric, >= 1.
inline double q_error(double y_est_ms, double y_act_ms) {
  if (y_est_ms <= 0.0 || y_act_ms <= 0.0)
    throw LabelError("q_error requires positive runtimes");
  return std::max(y_est_ms, y_act_ms) / std::min(y_est_ms, y_act_ms);
}

namespace detail {
// Average ranks (1-based), ties share the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}
}  // namespace detail

// Spearman's rank correlation with average ranks for ties. Returns 0 when
// either side has zero rank variance (all values equal).
inline double spearman(const std::vector<double>& est, const std::vector<double>& act) {
  if (est.size() != act.size()) throw ConfigError("spearman requires equal-length lists");
  if (est.size() < 2) throw ConfigError("spearman requires at least two samples");
  const auto ra = detail::average_ranks(est);
  const auto rb = detail::average_ranks(act);
  const double n = static_cast<double>(ra.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// Sum of selected-plan runtimes over sum of per-query optimal runtimes.
inline double total_runtime_ratio(const std::vector<double>& selected_ms,
                                  const std::vector<double>& optimal_ms) {
  if (selected_ms.size() != optimal_ms.size())
    throw ConfigError("total_runtime_ratio requires equal-length lists");
  if (selected_ms.empty()) throw ConfigError("total_runtime_ratio over empty lists");
  double s = 0.0, o = 0.0;
  for (std::size_t i = 0; i < selected_ms.size(); ++i) {
    if (selected_ms[i] < optimal_ms[i])
      throw LabelError("selected runtime below the candidate optimum; labels are inconsistent");
    s += selected_ms[i];
    o += optimal_ms[i];
  }
  if (o <= 0.0) throw LabelError("optimal runtimes sum to zero");
  return s / o;
}

// Selected runtime over the candidate optimum, for one query.
inline double plan_suboptimality(double selected_ms, double optimal_ms) {
  if (optimal_ms <= 0.0) throw LabelError("optimal runtime must be positive");
  if (selected_ms < optimal_ms)
    throw LabelError("selected runtime below the candidate optimum; labels are inconsistent");
  return selected_ms / optimal_ms;
}

// Minimal non-overlapping subgraphs: one per internal node (the node plus its
// leaf children); non-leaf children start their own subgraph. A single-node
// tree is one subgraph. Keyed and ordered by the parent node's id.
inline std::vector<std::vector<int>> partition_min_subgraphs(const PlanTree& tree) {
  std::vector<std::vector<int>> out;
  for (int v = 0; v < tree.size(); ++v) {
    const bool owns_subgraph = !tree.is_leaf(v) || v == tree.root_id;
    if (!owns_subgraph) continue;
    std::vector<int> members{v};
    for (int c : tree.node(v).children)
      if (tree.is_leaf(c)) members.push_back(c);
    std::sort(members.begin(), members.end());
    out.push_back(std::move(members));
  }
  return out;
}

// The owning parent of one minimal subgraph: its unique non-leaf member, or
// the sole member for a single-node subgraph.
inline int subgraph_parent(const PlanTree& tree, const std::vector<int>& members) {
  if (members.empty()) throw ConfigError("empty subgraph");
  if (members.size() == 1) return members.front();
  for (int m : members)
    if (!tree.is_leaf(m)) return m;
  throw ConfigError("minimal subgraph has no internal node");
}

namespace detail {
// Subgraph ids ordered by contribution descending, ties by id ascending.
inline std::vector<int> ranked_ids(const std::map<int, double>& contrib) {
  std::vector<int> ids;
  ids.reserve(contrib.size());
  for (const auto& [id, _] : contrib) ids.push_back(id);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    const double va = contrib.at(a), vb = contrib.at(b);
    if (va != vb) return va > vb;
    return a < b;
  });
  return ids;
}
}  // namespace detail

// 1 iff the ordered predicted top-K matches the actual top-K position-wise.
inline int topk_subgraph_accuracy(const std::map<int, double>& pred_contrib,
                                  const std::map<int, double>& actual_contrib, int k) {
  if (pred_contrib.size() != actual_contrib.size())
    throw ConfigError("predicted and actual contributions use different partitions");
  if (k <= 0 || static_cast<std::size_t>(k) > actual_contrib.size())
    throw ConfigError("top-K exceeds the number of subgraphs");
  const auto pred = detail::ranked_ids(pred_contrib);
  const auto actual = detail::ranked_ids(actual_contrib);
  for (int i = 0; i < k; ++i)
    if (pred[static_cast<std::size_t>(i)] != actual[static_cast<std::size_t>(i)]) return 0;
  return 1;
}

// Actual contribution captured by the predicted top-K, relative to the
// actual top-K.
inline double topk_influence_ratio(const std::map<int, double>& pred_contrib,
                                   const std::map<int, double>& actual_contrib, int k) {
  if (pred_contrib.size() != actual_contrib.size())
    throw ConfigError("predicted and actual contributions use different partitions");
  if (k <= 0 || static_cast<std::size_t>(k) > actual_contrib.size())
    throw ConfigError("top-K exceeds the number of subgraphs");
  const auto pred = detail::ranked_ids(pred_contrib);
  const auto actual = detail::ranked_ids(actual_contrib);
  double p = 0.0, a = 0.0;
  for (int i = 0; i < k; ++i) {
    p += actual_contrib.at(pred[static_cast<std::size_t>(i)]);
    a += actual_contrib.at(actual[static_cast<std::size_t>(i)]);
  }
  if (a <= 0.0) throw LabelError("actual top-K contribution sums to zero");
  return p / a;
}

// Linear-interpolation percentile, p in [0,100].
inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ConfigError("percentile of empty list");
  std::sort(values.begin(), values.end());
  const double pos = (p / 100.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  if (lo == hi) return values[lo];
  const double f = pos - static_cast<double>(lo);
  return values[lo] * (1.0 - f) + values[hi] * f;
}

struct PercentileSummary {
  double median = 0.0, mean = 0.0, p90 = 0.0, p95 = 0.0, p99 = 0.0;

  static PercentileSummary of(const std::vector<double>& values) {
    PercentileSummary s;
    s.median = percentile(values, 50.0);
    s.p90 = percentile(values, 90.0);
    s.p95 = percentile(values, 95.0);
    s.p99 = percentile(values, 99.0);
    double acc = 0.0;
    for (double v : values) acc += v;
    s.mean = acc / static_cast<double>(values.size());
    return s;
  }
};

struct MetricsReport {
  std::size_t num_queries = 0;
  std::size_t num_plans = 0;
  PercentileSummary q_error;
  double spearman = 0.0;
  double total_runtime_ratio = 0.0;
  PercentileSummary suboptimality;
  // Explanation metrics; populated when subtree contributions were scored.
  bool has_explanation = false;
  double expl_top1_acc = 0.0;
  double expl_top1and2_acc = 0.0;
  double expl_top1or2_acc = 0.0;
  double expl_top1_infl = 0.0;
  double expl_top1and2_infl = 0.0;
  double mean_abs_ec_error = 0.0;
};

inline nlohmann::json percentiles_to_json(const PercentileSummary& s) {
  return nlohmann::json{{"median", s.median}, {"mean", s.mean}, {"p90", s.p90}, {"p95", s.p95}, {"p99", s.p99}};
}

inline nlohmann::json metrics_report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["num_queries"] = r.num_queries;
  j["num_plans"] = r.num_plans;
  j["q_error"] = percentiles_to_json(r.q_error);
  j["spearman"] = r.spearman;
  j["total_runtime_ratio"] = r.total_runtime_ratio;
  j["plan_suboptimality"] = percentiles_to_json(r.suboptimality);
  if (r.has_explanation) {
    j["explanation"] = nlohmann::json{{"top1_accuracy", r.expl_top1_acc},
                                      {"top1and2_accuracy", r.expl_top1and2_acc},
                                      {"top1or2_accuracy", r.expl_top1or2_acc},
                                      {"top1_influence_ratio", r.expl_top1_infl},
                                      {"top1and2_influence_ratio", r.expl_top1and2_infl},
                                      {"mean_abs_ec_error", r.mean_abs_ec_error}};
  }
  return j;
}

}  // namespace reqo
