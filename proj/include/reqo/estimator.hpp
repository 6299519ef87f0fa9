#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "reqo/autodiff.hpp"
#include "reqo/nn.hpp"

namespace reqo {

// Floor applied to the variance inside the Gaussian negative log-likelihood
// so the division cannot blow up.
inline constexpr double kVarianceFloor = 1e-6;

struct EstimatorConfig {
  int hidden_width = 64;
  double margin = 0.1;  // ranking-loss threshold distance, on the scaled-cost scale

  void validate() const {
    if (hidden_width <= 0) throw ConfigError("estimator hidden width must be positive");
    if (margin < 0.0) throw ConfigError("margin must be nonnegative");
  }
};

// Trunk feeding two branches (normalized expected cost, nonnegative
// variance), plus the learned integrator combining them into one value used
// for ranking.
struct EstimatorParams {
  nn::Mlp trunk;        // 3 FC layers, tanh activations
  nn::Mlp mean_branch;  // 3 FC layers ending in a logistic squash
  nn::Mlp var_branch;   // 3 FC layers ending in a softplus
  nn::Mlp integrator;   // 2 FC layers over (mu, var) ending in a logistic squash
  double margin = 0.1;
};

inline EstimatorParams make_estimator_params(nn::ParamStore& store, int embedding_dim,
                                             const EstimatorConfig& cfg, Rng& rng) {
  cfg.validate();
  const int w = cfg.hidden_width;
  EstimatorParams p;
  p.trunk = nn::make_mlp(store, "estimator.trunk", embedding_dim, {w, w, w}, nn::FinalSquash::none, rng);
  p.mean_branch = nn::make_mlp(store, "estimator.mean", w, {w, w, 1}, nn::FinalSquash::logistic, rng);
  p.var_branch = nn::make_mlp(store, "estimator.var", w, {w, w, 1}, nn::FinalSquash::softplus, rng);
  p.integrator = nn::make_mlp(store, "estimator.integrator", 2, {w, 1}, nn::FinalSquash::logistic, rng);
  p.margin = cfg.margin;
  return p;
}

// Per-plan cost estimate: normalized expected execution time, data-
// uncertainty variance, and the integrated ranking value.
struct CostEstimate {
  double mu = 0.0;
  double var = 0.0;
  double integrated = 0.0;
};

struct EstimateVars {
  ad::Var mu, var, integrated;
};

inline EstimateVars estimate_batch(ad::Tape& tape, const nn::ParamStore& store, const EstimatorParams& p,
                                   ad::Var embeddings, double dropout_rate = 0.0, Rng* dropout_rng = nullptr) {
  if (tape.value(embeddings).cols() != store.value(p.trunk.layers.front().w).rows())
    throw ConfigError("embedding length does not match estimator trunk input");
  ad::Var trunk = tape.tanh(nn::apply_mlp(tape, store, p.trunk, embeddings, dropout_rate, dropout_rng));
  EstimateVars out;
  out.mu = nn::apply_mlp(tape, store, p.mean_branch, trunk, dropout_rate, dropout_rng);
  out.var = nn::apply_mlp(tape, store, p.var_branch, trunk, dropout_rate, dropout_rng);
  out.integrated = nn::apply_mlp(tape, store, p.integrator, tape.concat_cols(out.mu, out.var));
  return out;
}

inline CostEstimate estimate(const Eigen::VectorXd& embedding, const nn::ParamStore& store,
                             const EstimatorParams& p) {
  ad::Tape tape;
  const EstimateVars v = estimate_batch(tape, store, p, tape.leaf(embedding.transpose()));
  return CostEstimate{tape.scalar(v.mu), tape.scalar(v.var), tape.scalar(v.integrated)};
}

// The learned integration of (mu, var) into a single ranking value.
inline double integrate(double mu, double var, const nn::ParamStore& store, const EstimatorParams& p) {
  if (var < 0.0) throw ConfigError("integrate() requires var >= 0");
  ad::Tape tape;
  ad::Mat in(1, 2);
  in << mu, var;
  return tape.scalar(nn::apply_mlp(tape, store, p.integrator, tape.leaf(in)));
}

// ---- losses ----

struct PlanLossTerm {
  double mu = 0.0;
  double var = 0.0;
  double y = 0.0;  // scaled actual runtime
};

// Gaussian negative log-likelihood (up to constants):
// (1/N) sum( log(var)/2 + (y - mu)^2 / var ), var floored at kVarianceFloor.
inline double uncertainty_loss(const std::vector<PlanLossTerm>& batch) {
  if (batch.empty()) throw ConfigError("uncertainty_loss over an empty batch is undefined");
  double acc = 0.0;
  for (const auto& t : batch) {
    const double v = std::max(t.var, kVarianceFloor);
    const double r = t.y - t.mu;
    acc += 0.5 * std::log(v) + r * r / v;
  }
  return acc / static_cast<double>(batch.size());
}

inline ad::Var uncertainty_loss_on_tape(ad::Tape& tape, ad::Var mu, ad::Var var,
                                        const Eigen::VectorXd& y_scaled) {
  if (y_scaled.size() == 0) throw ConfigError("uncertainty_loss over an empty batch is undefined");
  ad::Var v = tape.clamp_min(var, kVarianceFloor);
  ad::Var resid = tape.sub(tape.leaf(y_scaled), mu);
  ad::Var terms = tape.add(tape.affine(tape.log(v), 0.5, 0.0), tape.cwise_div(tape.square(resid), v));
  return tape.mean(terms);
}

struct RankPair {
  double c_i = 0.0, c_j = 0.0;  // integrated costs
  double y_i = 0.0, y_j = 0.0;  // actual runtimes
};

inline double rank_sign(double y_i, double y_j) { return y_i > y_j ? 1.0 : -1.0; }

// sum over pairs of exp(max(0, -y_ij (C_i - C_j) + margin)); a raw sum, so
// the per-pair floor is exp(0) = 1.
inline double ranking_loss(const std::vector<RankPair>& pairs, double margin) {
  double acc = 0.0;
  for (const auto& p : pairs) {
    const double s = rank_sign(p.y_i, p.y_j);
    acc += std::exp(std::max(0.0, -s * (p.c_i - p.c_j) + margin));
  }
  return acc;
}

// Tape version over a batch: `integrated` is N x 1; each pair is (row_i,
// row_j) with the comparison sign precomputed from the actual runtimes.
inline ad::Var ranking_loss_on_tape(ad::Tape& tape, ad::Var integrated,
                                    const std::vector<std::pair<int, int>>& pair_rows,
                                    const Eigen::VectorXd& signs, double margin) {
  std::vector<int> li(pair_rows.size()), rj(pair_rows.size());
  for (std::size_t k = 0; k < pair_rows.size(); ++k) {
    li[k] = pair_rows[k].first;
    rj[k] = pair_rows[k].second;
  }
  ad::Var diff = tape.sub(tape.gather_rows(integrated, std::move(li)), tape.gather_rows(integrated, std::move(rj)));
  ad::Var hinge = tape.relu(tape.affine(tape.cwise_mul_const(diff, -signs), 1.0, margin));
  return tape.sum(tape.exp(hinge));
}

// One batch of estimator training inputs: per-plan terms plus the induced
// within-set pairs.
struct EstimatorBatch {
  std::vector<PlanLossTerm> plans;
  std::vector<RankPair> pairs;
  double margin = 0.1;
};

// Unweighted sum of the uncertainty and ranking terms.
inline double combined_loss(const EstimatorBatch& batch) {
  return uncertainty_loss(batch.plans) + ranking_loss(batch.pairs, batch.margin);
}

// Deterministic argmin: strict comparison keeps the lowest index on ties.
inline std::size_t argmin_index(const std::vector<double>& scores) {
  if (scores.empty()) throw ConfigError("argmin over empty scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] < scores[best]) best = i;
  return best;
}

}  // namespace reqo
