#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "reqo/autodiff.hpp"
#include "reqo/nn.hpp"
#include "reqo/plan.hpp"

namespace reqo {

struct BiGGConfig {
  int hidden_dim = 64;
  int num_heads = 4;
  int num_layers = 4;
  // Trainability extensions over the bare bidirectional conv + blend stack;
  // disable both for the literal layer form.
  bool use_activation = true;
  bool use_residual = true;
  // Blend weight per channel instead of a single scalar per layer.
  bool per_channel_blend = false;

  void validate() const {
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (hidden_dim <= 0 || num_heads <= 0) throw ConfigError("hidden_dim and num_heads must be positive");
    if (hidden_dim % num_heads != 0) throw ConfigError("hidden_dim must be divisible by num_heads");
  }
};

// One directed attention convolution: query from the target, key/value from
// the source, plus a learned self term.
struct AttentionConvParams {
  int wq = -1, wk = -1, wv = -1, wself = -1;
};

struct BiGGLayerParams {
  AttentionConvParams down, up;
  int lambda_raw = -1;  // unconstrained; squashed through a logistic into (0,1)
};

struct GruParams {
  int wz = -1, uz = -1, bz = -1;
  int wr = -1, ur = -1, br = -1;
  int wn = -1, un = -1, bn = -1;
};

struct BiGGParams {
  BiGGConfig cfg;
  nn::Linear input_proj;
  std::vector<BiGGLayerParams> layers;
  GruParams gru;
};

namespace detail {
inline AttentionConvParams make_attention_conv(nn::ParamStore& store, const std::string& name, int dim,
                                               Rng& rng) {
  AttentionConvParams p;
  p.wq = store.add(name + ".wq", nn::xavier_uniform(dim, dim, rng));
  p.wk = store.add(name + ".wk", nn::xavier_uniform(dim, dim, rng));
  p.wv = store.add(name + ".wv", nn::xavier_uniform(dim, dim, rng));
  p.wself = store.add(name + ".wself", nn::xavier_uniform(dim, dim, rng));
  return p;
}
}  // namespace detail

inline BiGGParams make_bigg_params(nn::ParamStore& store, int feature_len, const BiGGConfig& cfg, Rng& rng) {
  cfg.validate();
  BiGGParams p;
  p.cfg = cfg;
  p.input_proj = nn::make_linear(store, "bigg.input", feature_len, cfg.hidden_dim, rng);
  for (int l = 0; l < cfg.num_layers; ++l) {
    BiGGLayerParams layer;
    const std::string base = "bigg.layer" + std::to_string(l);
    layer.down = detail::make_attention_conv(store, base + ".down", cfg.hidden_dim, rng);
    layer.up = detail::make_attention_conv(store, base + ".up", cfg.hidden_dim, rng);
    const int lambda_cols = cfg.per_channel_blend ? cfg.hidden_dim : 1;
    layer.lambda_raw = store.add(base + ".lambda", ad::Mat::Zero(1, lambda_cols));
    p.layers.push_back(layer);
  }
  const int h = cfg.hidden_dim;
  p.gru.wz = store.add("bigg.gru.wz", nn::xavier_uniform(h, h, rng));
  p.gru.uz = store.add("bigg.gru.uz", nn::xavier_uniform(h, h, rng));
  p.gru.bz = store.add("bigg.gru.bz", ad::Mat::Zero(1, h));
  p.gru.wr = store.add("bigg.gru.wr", nn::xavier_uniform(h, h, rng));
  p.gru.ur = store.add("bigg.gru.ur", nn::xavier_uniform(h, h, rng));
  p.gru.br = store.add("bigg.gru.br", ad::Mat::Zero(1, h));
  p.gru.wn = store.add("bigg.gru.wn", nn::xavier_uniform(h, h, rng));
  p.gru.un = store.add("bigg.gru.un", nn::xavier_uniform(h, h, rng));
  p.gru.bn = store.add("bigg.gru.bn", ad::Mat::Zero(1, h));
  return p;
}

// Directed edges prepared for segment ops: rows sorted by destination, with
// seg_starts delimiting runs of equal destination.
struct EdgeArrays {
  std::vector<int> src, dst;
  std::vector<int> seg_starts;

  static EdgeArrays from_pairs(std::vector<std::pair<int, int>> edges) {
    std::stable_sort(edges.begin(), edges.end(),
                     [](const auto& a, const auto& b) { return a.second < b.second; });
    EdgeArrays out;
    out.src.reserve(edges.size());
    out.dst.reserve(edges.size());
    int prev = -1;
    for (std::size_t i = 0; i < edges.size(); ++i) {
      out.src.push_back(edges[i].first);
      out.dst.push_back(edges[i].second);
      if (edges[i].second != prev) {
        out.seg_starts.push_back(static_cast<int>(i));
        prev = edges[i].second;
      }
    }
    out.seg_starts.push_back(static_cast<int>(edges.size()));
    return out;
  }
};

// out_i = W_self x_i + sum_{j in N_in(i)} alpha_ij W_val x_j, attention per
// head over in-neighbours, heads concatenated. Nodes without in-edges keep
// only the self term.
inline ad::Var attention_conv(ad::Tape& tape, const nn::ParamStore& store, const AttentionConvParams& p,
                              ad::Var states, const EdgeArrays& edges, int heads) {
  ad::Var self = tape.matmul(states, store.on(tape, p.wself));
  if (edges.dst.empty()) return self;
  const int n = static_cast<int>(tape.value(states).rows());
  const int dim = static_cast<int>(tape.value(states).cols());
  ad::Var q = tape.matmul(states, store.on(tape, p.wq));
  ad::Var k = tape.matmul(states, store.on(tape, p.wk));
  ad::Var v = tape.matmul(states, store.on(tape, p.wv));
  ad::Var scores = tape.head_row_dot(tape.gather_rows(q, edges.dst), tape.gather_rows(k, edges.src), heads);
  scores = tape.scale(scores, 1.0 / std::sqrt(static_cast<double>(dim / heads)));
  ad::Var alpha = tape.segment_softmax(scores, edges.seg_starts);
  ad::Var msg = tape.head_weighted_scatter(alpha, tape.gather_rows(v, edges.src), edges.dst, n);
  return tape.add(self, msg);
}

// lambda * h_down + (1 - lambda) * h_up, elementwise.
inline ad::Mat blend(const ad::Mat& h_down, const ad::Mat& h_up, double lambda) {
  return lambda * h_down + (1.0 - lambda) * h_up;
}

inline ad::Var blend_on_tape(ad::Tape& tape, ad::Var h_down, ad::Var h_up, ad::Var lambda,
                             bool per_channel) {
  if (per_channel) {
    ad::Var a = tape.cwise_mul_rowvec(h_down, lambda);
    ad::Var b = tape.cwise_mul_rowvec(h_up, tape.affine(lambda, -1.0, 1.0));
    return tape.add(a, b);
  }
  ad::Var a = tape.mul_scalar_var(h_down, lambda);
  ad::Var b = tape.mul_scalar_var(h_up, tape.affine(lambda, -1.0, 1.0));
  return tape.add(a, b);
}

// One bidirectional layer: the two opposite-direction convolutions, blended
// through the squashed layer weight, then the optional activation/residual.
inline ad::Var bigg_layer(ad::Tape& tape, const nn::ParamStore& store, const BiGGLayerParams& p,
                          const BiGGConfig& cfg, ad::Var states, const EdgeArrays& down,
                          const EdgeArrays& up) {
  ad::Var h_down = attention_conv(tape, store, p.down, states, down, cfg.num_heads);
  ad::Var h_up = attention_conv(tape, store, p.up, states, up, cfg.num_heads);
  ad::Var lambda = tape.logistic(store.on(tape, p.lambda_raw));
  ad::Var out = blend_on_tape(tape, h_down, h_up, lambda, cfg.per_channel_blend);
  if (cfg.use_activation) out = tape.tanh(out);
  if (cfg.use_residual) out = tape.add(out, states);
  return out;
}

// z = sig(xWz + hUz + bz); r = sig(xWr + hUr + br);
// n = tanh(xWn + r.(hUn) + bn); h' = z.h + (1-z).n
inline ad::Var gru_step(ad::Tape& tape, const nn::ParamStore& store, const GruParams& g, ad::Var x,
                        ad::Var h) {
  ad::Var z = tape.logistic(tape.add_rowvec(
      tape.add(tape.matmul(x, store.on(tape, g.wz)), tape.matmul(h, store.on(tape, g.uz))),
      store.on(tape, g.bz)));
  ad::Var r = tape.logistic(tape.add_rowvec(
      tape.add(tape.matmul(x, store.on(tape, g.wr)), tape.matmul(h, store.on(tape, g.ur))),
      store.on(tape, g.br)));
  ad::Var n = tape.tanh(tape.add_rowvec(
      tape.add(tape.matmul(x, store.on(tape, g.wn)), tape.cwise_mul(r, tape.matmul(h, store.on(tape, g.un)))),
      store.on(tape, g.bn)));
  return tape.add(tape.cwise_mul(z, h), tape.cwise_mul(tape.affine(z, -1.0, 1.0), n));
}

// Static structure of one tree, shared across layers and batches.
struct TreeStructure {
  int n = 0;
  std::vector<int> order;                        // postorder node ids
  std::vector<std::pair<int, int>> down_edges;   // (parent, child)

  static TreeStructure of(const PlanTree& tree) {
    TreeStructure s;
    s.n = tree.size();
    s.order = postorder(tree);
    s.down_edges = directed_edge_views(tree).down_edges;
    return s;
  }
};

// Block-diagonal batch of trees: concatenated node rows, merged edge views,
// and the step schedule for the batched GRU (graphs sorted by length so the
// active set at each step is a prefix).
struct GraphBatch {
  int total_nodes = 0;
  int num_graphs = 0;
  std::vector<int> offsets;
  EdgeArrays down, up;
  std::vector<std::vector<int>> step_nodes;  // per step: global node id per active graph
  std::vector<int> sorted_pos;               // graph index -> row in the sorted GRU state

  static GraphBatch build(const std::vector<const TreeStructure*>& graphs) {
    GraphBatch b;
    b.num_graphs = static_cast<int>(graphs.size());
    b.offsets.reserve(graphs.size());
    std::vector<std::pair<int, int>> down_pairs, up_pairs;
    for (const auto* g : graphs) {
      b.offsets.push_back(b.total_nodes);
      for (const auto& [p, c] : g->down_edges) {
        down_pairs.emplace_back(p + b.total_nodes, c + b.total_nodes);
        up_pairs.emplace_back(c + b.total_nodes, p + b.total_nodes);
      }
      b.total_nodes += g->n;
    }
    b.down = EdgeArrays::from_pairs(std::move(down_pairs));
    b.up = EdgeArrays::from_pairs(std::move(up_pairs));

    std::vector<int> by_len(graphs.size());
    std::iota(by_len.begin(), by_len.end(), 0);
    std::stable_sort(by_len.begin(), by_len.end(), [&](int a, int c) {
      return graphs[static_cast<std::size_t>(a)]->n > graphs[static_cast<std::size_t>(c)]->n;
    });
    b.sorted_pos.resize(graphs.size());
    for (std::size_t i = 0; i < by_len.size(); ++i)
      b.sorted_pos[static_cast<std::size_t>(by_len[i])] = static_cast<int>(i);
    const int max_len = graphs.empty() ? 0 : graphs[static_cast<std::size_t>(by_len[0])]->n;
    b.step_nodes.resize(static_cast<std::size_t>(max_len));
    for (int t = 0; t < max_len; ++t) {
      auto& step = b.step_nodes[static_cast<std::size_t>(t)];
      for (int gi : by_len) {
        const auto* g = graphs[static_cast<std::size_t>(gi)];
        if (t >= g->n) break;  // sorted: everything after is shorter
        step.push_back(b.offsets[static_cast<std::size_t>(gi)] + g->order[static_cast<std::size_t>(t)]);
      }
    }
    return b;
  }
};

// Batched GRU over each graph's postorder sequence, from a zero initial
// state; returns one row per graph, in the batch's original graph order.
inline ad::Var aggregate_gru_batch(ad::Tape& tape, const nn::ParamStore& store, const GruParams& gru,
                                   ad::Var node_states, const GraphBatch& batch, int hidden) {
  ad::Var h = tape.leaf(ad::Mat::Zero(batch.num_graphs, hidden));
  for (const auto& step : batch.step_nodes) {
    const int active = static_cast<int>(step.size());
    ad::Var x = tape.gather_rows(node_states, step);
    if (active == batch.num_graphs) {
      h = gru_step(tape, store, gru, x, h);
    } else {
      ad::Var h_active = tape.slice_rows(h, 0, active);
      ad::Var h_rest = tape.slice_rows(h, active, batch.num_graphs - active);
      h = tape.concat_rows(gru_step(tape, store, gru, x, h_active), h_rest);
    }
  }
  return tape.gather_rows(h, batch.sorted_pos);
}

// Full representation path: input projection, stacked bidirectional layers,
// GRU aggregation. `features` holds one row per node in batch node order.
inline ad::Var embed_graphs(ad::Tape& tape, const nn::ParamStore& store, const BiGGParams& params,
                            ad::Var features, const GraphBatch& batch) {
  if (tape.value(features).cols() != store.value(params.input_proj.w).rows())
    throw ConfigError("feature length " + std::to_string(tape.value(features).cols()) +
                      " does not match input projection " +
                      std::to_string(store.value(params.input_proj.w).rows()));
  if (tape.value(features).rows() != batch.total_nodes)
    throw ConfigError("feature rows do not match batch node count");
  ad::Var h = nn::apply_linear(tape, store, params.input_proj, features);
  for (const auto& layer : params.layers)
    h = bigg_layer(tape, store, layer, params.cfg, h, batch.down, batch.up);
  return aggregate_gru_batch(tape, store, params.gru, h, batch, params.cfg.hidden_dim);
}

// Single-plan convenience wrappers over the batched path.

inline Eigen::VectorXd embed_plan(const PlanTree& tree, const ad::Mat& features,
                                  const nn::ParamStore& store, const BiGGParams& params) {
  const TreeStructure s = TreeStructure::of(tree);
  const GraphBatch batch = GraphBatch::build({&s});
  ad::Tape tape;
  ad::Var emb = embed_graphs(tape, store, params, tape.leaf(features), batch);
  return tape.value(emb).row(0).transpose();
}

// GRU aggregation of explicit per-node states in an explicit order.
inline Eigen::VectorXd aggregate_gru(const ad::Mat& node_states, const std::vector<int>& order,
                                     const nn::ParamStore& store, const GruParams& gru) {
  ad::Tape tape;
  ad::Var h = tape.leaf(ad::Mat::Zero(1, node_states.cols()));
  ad::Var states = tape.leaf(node_states);
  for (int id : order) h = gru_step(tape, store, gru, tape.gather_rows(states, {id}), h);
  return tape.value(h).row(0).transpose();
}

}  // namespace reqo
