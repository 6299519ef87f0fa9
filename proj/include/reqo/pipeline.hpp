#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reqo/metrics.hpp"
#include "reqo/model.hpp"

namespace reqo {

// ---- label scaling (natural log + min-max into [0,1]) ----

struct LabelScaler {
  double ln_ymin = 0.0;
  double ln_ymax = 1.0;

  static LabelScaler fit(const std::vector<double>& runtimes_ms) {
    if (runtimes_ms.empty()) throw LabelError("cannot fit scaler on empty runtimes");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (double y : runtimes_ms) {
      if (y <= 0.0) throw LabelError("runtime labels must be positive");
      lo = std::min(lo, std::log(y));
      hi = std::max(hi, std::log(y));
    }
    if (!(lo < hi)) throw LabelError("degenerate runtime range; all labels equal");
    return LabelScaler{lo, hi};
  }
};

// Test-time values outside the training range clamp to the endpoints.
inline double scale_runtime(double y_ms, const LabelScaler& s) {
  if (y_ms <= 0.0) throw LabelError("runtime must be positive");
  return std::clamp((std::log(y_ms) - s.ln_ymin) / (s.ln_ymax - s.ln_ymin), 0.0, 1.0);
}

inline double unscale_runtime(double scaled, const LabelScaler& s) {
  return std::exp(s.ln_ymin + scaled * (s.ln_ymax - s.ln_ymin));
}

// ---- pairing and folds ----

// All unordered plan pairs within one candidate set, each once, i < j.
inline std::vector<std::pair<int, int>> make_pairs(int num_plans) {
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<std::size_t>(num_plans) * static_cast<std::size_t>(std::max(num_plans - 1, 0)) / 2);
  for (int i = 0; i < num_plans; ++i)
    for (int j = i + 1; j < num_plans; ++j) out.emplace_back(i, j);
  return out;
}

inline std::vector<std::pair<int, int>> make_pairs(const CandidatePlanSet& set) {
  return make_pairs(static_cast<int>(set.plans.size()));
}

struct FoldSplit {
  std::vector<std::size_t> train_ids, test_ids;
};

// Query-level folds: every candidate set stays whole in exactly one fold.
inline std::vector<FoldSplit> kfold(std::size_t num_queries, int folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("folds must be >= 2");
  if (num_queries < static_cast<std::size_t>(folds)) throw ConfigError("fewer queries than folds");
  std::vector<std::size_t> order(num_queries);
  for (std::size_t i = 0; i < num_queries; ++i) order[i] = i;
  Rng rng(mix64(seed, fnv1a64("kfold")));
  rng.shuffle(order);
  std::vector<FoldSplit> out(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < num_queries; ++i)
    out[i % static_cast<std::size_t>(folds)].test_ids.push_back(order[i]);
  for (auto& split : out) {
    std::sort(split.test_ids.begin(), split.test_ids.end());
    std::size_t t = 0;
    for (std::size_t q = 0; q < num_queries; ++q) {
      if (t < split.test_ids.size() && split.test_ids[t] == q) {
        ++t;
      } else {
        split.train_ids.push_back(q);
      }
    }
  }
  return out;
}

inline std::vector<FoldSplit> kfold(const std::vector<CandidatePlanSet>& dataset, int folds,
                                    std::uint64_t seed) {
  return kfold(dataset.size(), folds, seed);
}

inline std::vector<CandidatePlanSet> subset(const std::vector<CandidatePlanSet>& dataset,
                                            const std::vector<std::size_t>& ids) {
  std::vector<CandidatePlanSet> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(dataset[id]);
  return out;
}

// ---- training configuration ----

struct LossWeights {
  double uncertainty = 1.0;
  double ranking = 1.0;
  double explanation = 1.0;
};

struct TrainingConfig {
  double margin = 0.1;
  double learning_rate = 1e-3;
  int batch_size_plans = 30;  // rounded up to whole candidate sets
  int max_epochs = 40;
  int early_stop_patience = 5;
  double dropout_rate = 0.05;
  bool include_explainer = true;
  bool include_leaf_subtrees = false;
  int folds = 10;
  std::uint64_t seed = 1;
  // 1 = bit-reproducible single-threaded numerics; 0 = hardware concurrency
  // (statistically reproducible fast mode).
  int num_threads = 0;
  double validation_fraction = 0.1;
  LossWeights loss_weights;
  ModelConfig model;

  void validate() const {
    if (margin < 0.0) throw ConfigError("margin must be nonnegative");
    if (learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
    if (batch_size_plans < 1) throw ConfigError("batch size must be >= 1");
    if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
    if (early_stop_patience < 1) throw ConfigError("patience must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
    if (folds < 2) throw ConfigError("folds must be >= 2");
    if (num_threads < 0) throw ConfigError("num_threads must be >= 0");
    if (validation_fraction <= 0.0 || validation_fraction >= 0.5)
      throw ConfigError("validation fraction must be in (0, 0.5)");
    model.validate();
  }

  int resolved_threads() const {
    if (num_threads > 0) return num_threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::max(1u, std::min(hw, 8u)));
  }
};

// ---- config JSON ----

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
  return nlohmann::json{{"d_t", m.d_t},
                        {"d_c", m.d_c},
                        {"hidden_dim", m.bigg.hidden_dim},
                        {"num_heads", m.bigg.num_heads},
                        {"num_layers", m.bigg.num_layers},
                        {"use_activation", m.bigg.use_activation},
                        {"use_residual", m.bigg.use_residual},
                        {"per_channel_blend", m.bigg.per_channel_blend},
                        {"estimator_width", m.estimator_width},
                        {"explainer_width", m.explainer_width}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.d_t = j.value("d_t", m.d_t);
  m.d_c = j.value("d_c", m.d_c);
  m.bigg.hidden_dim = j.value("hidden_dim", m.bigg.hidden_dim);
  m.bigg.num_heads = j.value("num_heads", m.bigg.num_heads);
  m.bigg.num_layers = j.value("num_layers", m.bigg.num_layers);
  m.bigg.use_activation = j.value("use_activation", m.bigg.use_activation);
  m.bigg.use_residual = j.value("use_residual", m.bigg.use_residual);
  m.bigg.per_channel_blend = j.value("per_channel_blend", m.bigg.per_channel_blend);
  m.estimator_width = j.value("estimator_width", m.estimator_width);
  m.explainer_width = j.value("explainer_width", m.explainer_width);
  return m;
}

inline nlohmann::json training_config_to_json(const TrainingConfig& c) {
  return nlohmann::json{{"margin", c.margin},
                        {"learning_rate", c.learning_rate},
                        {"batch_size_plans", c.batch_size_plans},
                        {"max_epochs", c.max_epochs},
                        {"early_stop_patience", c.early_stop_patience},
                        {"dropout_rate", c.dropout_rate},
                        {"include_explainer", c.include_explainer},
                        {"include_leaf_subtrees", c.include_leaf_subtrees},
                        {"folds", c.folds},
                        {"seed", c.seed},
                        {"num_threads", c.num_threads},
                        {"validation_fraction", c.validation_fraction},
                        {"loss_weights",
                         {{"uncertainty", c.loss_weights.uncertainty},
                          {"ranking", c.loss_weights.ranking},
                          {"explanation", c.loss_weights.explanation}}},
                        {"model", model_config_to_json(c.model)}};
}

inline TrainingConfig training_config_from_json(const nlohmann::json& j) {
  TrainingConfig c;
  c.margin = j.value("margin", c.margin);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size_plans = j.value("batch_size_plans", c.batch_size_plans);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.include_explainer = j.value("include_explainer", c.include_explainer);
  c.include_leaf_subtrees = j.value("include_leaf_subtrees", c.include_leaf_subtrees);
  c.folds = j.value("folds", c.folds);
  c.seed = j.value("seed", c.seed);
  c.num_threads = j.value("num_threads", c.num_threads);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.loss_weights.uncertainty = w.value("uncertainty", 1.0);
    c.loss_weights.ranking = w.value("ranking", 1.0);
    c.loss_weights.explanation = w.value("explanation", 1.0);
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  return c;
}

// ---- prepared training data ----

namespace train_detail {

struct PreparedSub {
  TreeStructure structure;
  std::vector<int> member_ids;  // rows into the parent plan's feature matrix
  double ac = 0.0;
};

struct PreparedPlan {
  TreeStructure structure;
  std::vector<NodeInputs> node_inputs;
  double total_ms = 0.0;
  double y_scaled = 0.0;
  std::vector<PreparedSub> subtrees;
};

struct PreparedSet {
  std::string query_id;
  std::vector<PreparedPlan> plans;
};

inline PreparedSet prepare_set(const CandidatePlanSet& set, const Catalog& catalog, bool with_subtrees,
                               bool include_leaves) {
  PreparedSet out;
  out.query_id = set.query_id;
  out.plans.reserve(set.plans.size());
  for (const auto& plan : set.plans) {
    PreparedPlan p;
    p.structure = TreeStructure::of(plan);
    p.node_inputs.reserve(static_cast<std::size_t>(plan.size()));
    for (const auto& node : plan.nodes) p.node_inputs.push_back(preprocess_node(node, catalog));
    p.total_ms = plan.node(plan.root_id).actual_total_ms;
    if (with_subtrees) {
      for (const auto& ref : extract_subtrees(plan, include_leaves)) {
        PreparedSub sub;
        sub.structure = TreeStructure::of(subtree_to_tree(plan, ref));
        sub.member_ids = ref.member_ids;
        sub.ac = actual_contribution(plan, ref);
        p.subtrees.push_back(std::move(sub));
      }
    }
    out.plans.push_back(std::move(p));
  }
  return out;
}

struct ForwardOptions {
  bool training = false;
  double dropout_rate = 0.0;
  std::uint64_t dropout_seed = 0;
  double margin = 0.1;
  LossWeights weights;
  bool with_explainer = true;
  double inv_batch_plans = 1.0;  // 1 / (plan count of the whole logical batch)
};

struct SliceResult {
  double unc = 0.0, rank = 0.0, expl = 0.0;
  int plan_count = 0;
  std::optional<nn::GradBuffer> grads;
};

// Forward (and optionally backward) pass over a slice of candidate sets.
// Mean-style losses are expressed as weighted sums with batch-level
// normalizers so slices combine exactly across threads.
inline SliceResult forward_slice(const ReqoModel& model, const std::vector<const PreparedSet*>& sets,
                                 const ForwardOptions& opt, bool compute_grads) {
  SliceResult result;
  ad::Tape tape;
  Rng dropout_rng(opt.dropout_seed);

  std::vector<const NodeInputs*> flat_inputs;
  std::vector<const TreeStructure*> graphs;
  int plan_count = 0;
  for (const auto* s : sets) plan_count += static_cast<int>(s->plans.size());
  graphs.reserve(static_cast<std::size_t>(plan_count));

  std::vector<int> plan_node_offset;  // per plan, offset into plan feature rows
  int node_cursor = 0;
  for (const auto* s : sets) {
    for (const auto& p : s->plans) {
      plan_node_offset.push_back(node_cursor);
      graphs.push_back(&p.structure);
      for (const auto& ni : p.node_inputs) flat_inputs.push_back(&ni);
      node_cursor += p.structure.n;
    }
  }

  // Subtree graphs reuse the plan feature rows through a gather.
  std::vector<int> sub_gather;
  std::vector<int> sub_plan_row;  // plan row each subtree belongs to
  Eigen::VectorXd sub_ac;
  Eigen::VectorXd sub_weight;
  int sub_count = 0;
  if (opt.with_explainer) {
    std::vector<double> ac, w;
    int plan_row = 0;
    for (const auto* s : sets) {
      for (const auto& p : s->plans) {
        for (const auto& sub : p.subtrees) {
          graphs.push_back(&sub.structure);
          for (int mid : sub.member_ids)
            sub_gather.push_back(plan_node_offset[static_cast<std::size_t>(plan_row)] + mid);
          sub_plan_row.push_back(plan_row);
          ac.push_back(sub.ac);
          w.push_back(opt.inv_batch_plans / static_cast<double>(p.subtrees.size()));
          ++sub_count;
        }
        ++plan_row;
      }
    }
    sub_ac = Eigen::Map<const Eigen::VectorXd>(ac.data(), static_cast<Eigen::Index>(ac.size()));
    sub_weight = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  }

  ad::Var plan_features = encode_nodes(tape, model.params, model.encoder, model.catalog, flat_inputs);
  ad::Var all_features = plan_features;
  if (sub_count > 0)
    all_features = tape.concat_rows(plan_features, tape.gather_rows(plan_features, sub_gather));

  const GraphBatch batch = GraphBatch::build(graphs);
  ad::Var emb = embed_graphs(tape, model.params, model.bigg, all_features, batch);
  ad::Var plan_embs = sub_count > 0 ? tape.slice_rows(emb, 0, plan_count) : emb;

  const double dropout = opt.training ? opt.dropout_rate : 0.0;
  const EstimateVars est =
      estimate_batch(tape, model.params, model.estimator, plan_embs, dropout, &dropout_rng);

  // Uncertainty term: sum over plans, normalized by the full-batch count.
  Eigen::VectorXd y(plan_count);
  {
    int r = 0;
    for (const auto* s : sets)
      for (const auto& p : s->plans) y(r++) = p.y_scaled;
  }
  ad::Var v = tape.clamp_min(est.var, kVarianceFloor);
  ad::Var unc_terms =
      tape.add(tape.affine(tape.log(v), 0.5, 0.0), tape.cwise_div(tape.square(tape.sub(tape.leaf(y), est.mu)), v));
  ad::Var unc = tape.scale(tape.sum(unc_terms), opt.inv_batch_plans);

  // Ranking term: raw sum over within-set pairs.
  std::vector<std::pair<int, int>> pair_rows;
  std::vector<double> signs;
  {
    int base = 0;
    for (const auto* s : sets) {
      const int n = static_cast<int>(s->plans.size());
      for (const auto& [i, j] : make_pairs(n)) {
        pair_rows.emplace_back(base + i, base + j);
        signs.push_back(rank_sign(s->plans[static_cast<std::size_t>(i)].total_ms,
                                  s->plans[static_cast<std::size_t>(j)].total_ms));
      }
      base += n;
    }
  }
  ad::Var rank = tape.scalar_leaf(0.0);
  if (!pair_rows.empty()) {
    const Eigen::VectorXd sign_vec =
        Eigen::Map<const Eigen::VectorXd>(signs.data(), static_cast<Eigen::Index>(signs.size()));
    rank = ranking_loss_on_tape(tape, est.integrated, pair_rows, sign_vec, opt.margin);
  }

  ad::Var total = tape.add(tape.scale(unc, opt.weights.uncertainty), tape.scale(rank, opt.weights.ranking));

  ad::Var expl = tape.scalar_leaf(0.0);
  if (sub_count > 0) {
    ad::Var sub_embs = tape.slice_rows(emb, plan_count, sub_count);
    ad::Var sub_plan_embs = tape.gather_rows(plan_embs, sub_plan_row);
    ad::Var ec = explain_batch(tape, model.params, model.explainer, sub_embs, sub_plan_embs, dropout,
                               &dropout_rng);
    expl = explanation_loss_on_tape(tape, ec, sub_ac, sub_weight);
    total = tape.add(total, tape.scale(expl, opt.weights.explanation));
  }

  result.unc = tape.scalar(unc);
  result.rank = tape.scalar(rank);
  result.expl = tape.scalar(expl);
  result.plan_count = plan_count;
  if (compute_grads) {
    tape.backward(total);
    result.grads.emplace(model.params);
    result.grads->accumulate_from(tape);
  }
  return result;
}

// Splits sets into `parts` contiguous slices with roughly equal plan counts.
inline std::vector<std::vector<const PreparedSet*>> slice_sets(const std::vector<const PreparedSet*>& sets,
                                                               int parts) {
  std::vector<std::vector<const PreparedSet*>> out;
  if (sets.empty()) return out;
  int total = 0;
  for (const auto* s : sets) total += static_cast<int>(s->plans.size());
  const int per_slice = std::max(1, (total + parts - 1) / parts);
  std::vector<const PreparedSet*> current;
  int count = 0;
  for (const auto* s : sets) {
    current.push_back(s);
    count += static_cast<int>(s->plans.size());
    if (count >= per_slice && static_cast<int>(out.size()) + 1 < parts) {
      out.push_back(std::move(current));
      current.clear();
      count = 0;
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

// Runs forward_slice across threads and combines results in slice order, so
// the reduction is deterministic for a fixed thread count.
inline SliceResult parallel_forward(const ReqoModel& model, const std::vector<const PreparedSet*>& sets,
                                    const ForwardOptions& opt, bool compute_grads, int threads) {
  const auto slices = slice_sets(sets, threads);
  std::vector<SliceResult> results(slices.size());
  std::vector<std::exception_ptr> errors(slices.size());
  if (slices.size() <= 1) {
    if (!slices.empty()) {
      ForwardOptions slice_opt = opt;
      slice_opt.dropout_seed = mix64(opt.dropout_seed, 0);
      results[0] = forward_slice(model, slices[0], slice_opt, compute_grads);
    }
  } else {
    std::vector<std::thread> workers;
    workers.reserve(slices.size());
    for (std::size_t i = 0; i < slices.size(); ++i) {
      workers.emplace_back([&, i]() {
        try {
          ForwardOptions slice_opt = opt;
          slice_opt.dropout_seed = mix64(opt.dropout_seed, i);
          results[i] = forward_slice(model, slices[i], slice_opt, compute_grads);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  SliceResult combined;
  if (compute_grads) combined.grads.emplace(model.params);
  for (auto& r : results) {
    combined.unc += r.unc;
    combined.rank += r.rank;
    combined.expl += r.expl;
    combined.plan_count += r.plan_count;
    if (compute_grads && r.grads) combined.grads->add(*r.grads);
  }
  return combined;
}

}  // namespace train_detail

// ---- checkpoint ----

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;
  ReqoModel model;
  LabelScaler scaler;
  TrainingConfig train_config;
};

namespace ckpt_detail {

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  write_bytes(out, &v, sizeof v);
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

template <typename T>
T read_pod(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("checkpoint file truncated");
  return v;
}

inline std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw IoError("checkpoint file truncated");
  return s;
}

inline constexpr char kMagic[8] = {'R', 'E', 'Q', 'O', 'C', 'K', 'P', 'T'};

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  using namespace ckpt_detail;
  write_bytes(out, kMagic, sizeof kMagic);
  write_pod<std::uint32_t>(out, Checkpoint::kFormatVersion);
  write_pod<std::uint64_t>(out, ckpt.model.catalog.fingerprint());
  write_string(out, training_config_to_json(ckpt.train_config).dump());
  write_pod<double>(out, ckpt.scaler.ln_ymin);
  write_pod<double>(out, ckpt.scaler.ln_ymax);
  const auto& store = ckpt.model.params;
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (int i = 0; i < store.size(); ++i) {
    write_string(out, store.name(i));
    const auto& m = store.value(i);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    write_bytes(out, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path, Catalog catalog) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  using namespace ckpt_detail;
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw IoError("'" + path + "' is not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != Checkpoint::kFormatVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto fp = read_pod<std::uint64_t>(in);
  catalog.finalize();
  const auto actual_fp = catalog.fingerprint();
  if (fp != actual_fp) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "catalog fingerprint mismatch: checkpoint %016llx vs catalog %016llx",
                  static_cast<unsigned long long>(fp), static_cast<unsigned long long>(actual_fp));
    throw IoError(buf);
  }
  Checkpoint ckpt;
  ckpt.train_config = training_config_from_json(nlohmann::json::parse(read_string(in)));
  ckpt.scaler.ln_ymin = read_pod<double>(in);
  ckpt.scaler.ln_ymax = read_pod<double>(in);
  ckpt.model = make_model(std::move(catalog), ckpt.train_config.model, ckpt.train_config.margin,
                          ckpt.train_config.seed);
  const auto count = read_pod<std::uint32_t>(in);
  if (count != static_cast<std::uint32_t>(ckpt.model.params.size()))
    throw IoError("checkpoint tensor count does not match the configured model");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = read_string(in);
    if (name != ckpt.model.params.name(static_cast<int>(i)))
      throw IoError("checkpoint tensor '" + name + "' does not match model tensor '" +
                    ckpt.model.params.name(static_cast<int>(i)) + "'");
    const auto rows = read_pod<std::uint32_t>(in);
    const auto cols = read_pod<std::uint32_t>(in);
    auto& m = ckpt.model.params.value(static_cast<int>(i));
    if (rows != static_cast<std::uint32_t>(m.rows()) || cols != static_cast<std::uint32_t>(m.cols()))
      throw IoError("checkpoint tensor '" + name + "' has unexpected shape");
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw IoError("checkpoint file truncated");
  }
  return ckpt;
}

// ---- training ----

struct EpochStats {
  int epoch = 0;
  double train_unc = 0.0;   // summed over batches (each batch-mean weighted)
  double train_rank = 0.0;  // summed over batches
  double train_expl = 0.0;
  double train_loss = 0.0;  // weighted combined, summed over batches
  double val_loss = 0.0;
};

using TrainObserver = std::function<void(const EpochStats&)>;

// Jointly trains all modules with the combined loss (uncertainty + ranking,
// plus the explanation term when enabled), early-stopping on the validation
// combined loss. Returns the best checkpoint seen.
inline Checkpoint train(const std::vector<CandidatePlanSet>& dataset, const Catalog& catalog,
                        const TrainingConfig& cfg, const TrainObserver& observer = nullptr) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  for (const auto& s : dataset) validate_candidate_set(s);

  Rng rng(mix64(cfg.seed, fnv1a64("train")));
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t val_count = 0;
  if (dataset.size() >= 2)
    val_count = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                             cfg.validation_fraction * static_cast<double>(dataset.size()))));
  std::vector<std::size_t> val_ids(order.begin(), order.begin() + static_cast<long>(val_count));
  std::vector<std::size_t> train_ids(order.begin() + static_cast<long>(val_count), order.end());
  if (train_ids.empty()) {
    train_ids = val_ids;  // single-query corner: validate on the training data
  }

  // Scaler fits on the training split only.
  std::vector<double> train_runtimes;
  for (auto id : train_ids)
    for (const auto& p : dataset[id].plans) train_runtimes.push_back(p.node(p.root_id).actual_total_ms);
  const LabelScaler scaler = LabelScaler::fit(train_runtimes);

  // Prepare everything once; features are re-encoded per batch (parameters
  // move), structures and labels do not.
  std::vector<train_detail::PreparedSet> prepared(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    prepared[i] = train_detail::prepare_set(dataset[i], catalog, cfg.include_explainer,
                                            cfg.include_leaf_subtrees);
    for (auto& p : prepared[i].plans) p.y_scaled = scale_runtime(p.total_ms, scaler);
  }

  ReqoModel model = make_model(catalog, cfg.model, cfg.margin, cfg.seed);
  nn::AdamOptimizer adam(model.params, cfg.learning_rate);
  const int threads = cfg.resolved_threads();

  auto validation_loss = [&]() {
    std::vector<const train_detail::PreparedSet*> val_sets;
    for (auto id : val_ids) val_sets.push_back(&prepared[id]);
    int val_plans = 0;
    for (const auto* s : val_sets) val_plans += static_cast<int>(s->plans.size());
    train_detail::ForwardOptions opt;
    opt.training = false;
    opt.margin = cfg.margin;
    opt.weights = cfg.loss_weights;
    opt.with_explainer = cfg.include_explainer;
    opt.inv_batch_plans = 1.0 / static_cast<double>(val_plans);
    const auto r = train_detail::parallel_forward(model, val_sets, opt, /*grads=*/false, threads);
    return cfg.loss_weights.uncertainty * r.unc + cfg.loss_weights.ranking * r.rank +
           cfg.loss_weights.explanation * r.expl;
  };

  // Best-so-far snapshot; max_epochs == 0 returns the initialization.
  std::vector<ad::Mat> best_params;
  for (int i = 0; i < model.params.size(); ++i) best_params.push_back(model.params.value(i));
  double best_val = cfg.max_epochs > 0 ? validation_loss() : 0.0;
  int stale_epochs = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(train_ids);
    EpochStats stats;
    stats.epoch = epoch;
    std::size_t cursor = 0;
    int batch_index = 0;
    while (cursor < train_ids.size()) {
      std::vector<const train_detail::PreparedSet*> batch_sets;
      int batch_plans = 0;
      while (cursor < train_ids.size() && batch_plans < cfg.batch_size_plans) {
        batch_sets.push_back(&prepared[train_ids[cursor]]);
        batch_plans += static_cast<int>(prepared[train_ids[cursor]].plans.size());
        ++cursor;
      }
      train_detail::ForwardOptions opt;
      opt.training = true;
      opt.dropout_rate = cfg.dropout_rate;
      opt.dropout_seed = mix64(mix64(cfg.seed, static_cast<std::uint64_t>(epoch)),
                               static_cast<std::uint64_t>(batch_index));
      opt.margin = cfg.margin;
      opt.weights = cfg.loss_weights;
      opt.with_explainer = cfg.include_explainer;
      opt.inv_batch_plans = 1.0 / static_cast<double>(batch_plans);
      const auto r = train_detail::parallel_forward(model, batch_sets, opt, /*grads=*/true, threads);
      const double loss = cfg.loss_weights.uncertainty * r.unc + cfg.loss_weights.ranking * r.rank +
                          cfg.loss_weights.explanation * r.expl;
      if (!std::isfinite(loss)) {
        std::string ids;
        for (const auto* s : batch_sets) ids += s->query_id + " ";
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index) + " (queries: " + ids + ")");
      }
      adam.step(model.params, *r.grads);
      stats.train_unc += r.unc;
      stats.train_rank += r.rank;
      stats.train_expl += r.expl;
      stats.train_loss += loss;
      ++batch_index;
    }

    const double val = validation_loss();
    stats.val_loss = val;
    if (observer) observer(stats);
    if (val < best_val) {
      best_val = val;
      for (int i = 0; i < model.params.size(); ++i) best_params[static_cast<std::size_t>(i)] = model.params.value(i);
      stale_epochs = 0;
    } else {
      ++stale_epochs;
      if (stale_epochs >= cfg.early_stop_patience) break;
    }
  }

  for (int i = 0; i < model.params.size(); ++i) model.params.value(i) = best_params[static_cast<std::size_t>(i)];
  Checkpoint ckpt;
  ckpt.model = std::move(model);
  ckpt.scaler = scaler;
  ckpt.train_config = cfg;
  return ckpt;
}

// ---- evaluation ----

enum class SelectionMode { integrated, mu_only };

struct EvalOptions {
  SelectionMode selection = SelectionMode::integrated;
  bool explanation = true;
  bool include_leaf_subtrees = false;   // subtree set scoring mean |AC - EC|
  double strong_pair_threshold = 0.2;   // relative true-cost gap for ordering accuracy
  int chunk_sets = 8;
};

struct PerQueryRow {
  std::string query_id;
  std::size_t selected = 0;
  double selected_ms = 0.0;
  double optimal_ms = 0.0;
  double suboptimality = 1.0;
};

struct PlanEstimateRow {
  std::string query_id;
  std::size_t plan_index = 0;
  double mu = 0.0, var = 0.0, integrated = 0.0;
  double estimated_ms = 0.0;
  double actual_ms = 0.0;
};

struct EvalResult {
  MetricsReport report;
  std::vector<PerQueryRow> per_query;
  std::vector<PlanEstimateRow> per_plan;
  double pairwise_ordering_accuracy = 0.0;  // over pairs with a strong true gap
  std::size_t strong_pairs = 0;
};

// Scores a labeled dataset with a trained checkpoint: estimation quality,
// selection quality, and (optionally) explanation quality.
inline EvalResult evaluate(const Checkpoint& ckpt, const std::vector<CandidatePlanSet>& sets,
                           const EvalOptions& opt = {}) {
  if (sets.empty()) throw ConfigError("evaluation dataset is empty");
  const ReqoModel& model = ckpt.model;
  EvalResult out;

  std::vector<double> q_errors;
  std::vector<double> est_ms_all, act_ms_all;
  std::vector<double> selected_ms, optimal_ms, subopts;
  std::size_t ordered_ok = 0, strong = 0;

  double abs_ec_err_sum = 0.0;
  std::size_t abs_ec_err_count = 0;
  double top1_sum = 0.0, top12_sum = 0.0, top1or2_sum = 0.0, infl1_sum = 0.0, infl12_sum = 0.0;
  std::size_t expl_plans = 0, expl_plans_k2 = 0;

  for (std::size_t s0 = 0; s0 < sets.size(); s0 += static_cast<std::size_t>(opt.chunk_sets)) {
    const std::size_t s1 = std::min(sets.size(), s0 + static_cast<std::size_t>(opt.chunk_sets));
    std::vector<const PlanTree*> trees;
    for (std::size_t si = s0; si < s1; ++si)
      for (const auto& p : sets[si].plans) trees.push_back(&p);
    const std::size_t plan_count = trees.size();

    // Embeddings and estimates for the chunk's plans.
    const auto embs = embed_plans(model, trees, 4096);
    std::vector<CostEstimate> estimates(plan_count);
    for (std::size_t i = 0; i < plan_count; ++i) estimates[i] = estimate(embs[i], model.params, model.estimator);

    std::size_t pos = 0;
    for (std::size_t si = s0; si < s1; ++si) {
      const auto& set = sets[si];
      std::vector<double> scores, act;
      for (std::size_t pi = 0; pi < set.plans.size(); ++pi) {
        const auto& e = estimates[pos + pi];
        const double est_ms = unscale_runtime(e.mu, ckpt.scaler);
        const double actual = set.plans[pi].node(set.plans[pi].root_id).actual_total_ms;
        q_errors.push_back(q_error(est_ms, actual));
        est_ms_all.push_back(est_ms);
        act_ms_all.push_back(actual);
        scores.push_back(opt.selection == SelectionMode::integrated ? e.integrated : e.mu);
        act.push_back(actual);
        out.per_plan.push_back(PlanEstimateRow{set.query_id, pi, e.mu, e.var, e.integrated, est_ms, actual});
      }
      for (const auto& [i, j] : make_pairs(static_cast<int>(set.plans.size()))) {
        const double yi = act[static_cast<std::size_t>(i)], yj = act[static_cast<std::size_t>(j)];
        if (std::max(yi, yj) / std::min(yi, yj) < 1.0 + opt.strong_pair_threshold) continue;
        ++strong;
        const double ci = estimates[pos + static_cast<std::size_t>(i)].integrated;
        const double cj = estimates[pos + static_cast<std::size_t>(j)].integrated;
        if ((ci < cj) == (yi < yj) && ci != cj) ++ordered_ok;
      }
      const std::size_t chosen = argmin_index(scores);
      const double best = *std::min_element(act.begin(), act.end());
      selected_ms.push_back(act[chosen]);
      optimal_ms.push_back(best);
      subopts.push_back(plan_suboptimality(act[chosen], best));
      out.per_query.push_back(PerQueryRow{set.query_id, chosen, act[chosen], best, subopts.back()});
      pos += set.plans.size();
    }
  }

  // Explanation metrics, plan by plan (subtree batches are small).
  if (opt.explanation) {
    for (const auto& set : sets) {
      for (const auto& plan : set.plans) {
        const auto refs = extract_subtrees(plan, opt.include_leaf_subtrees);
        std::vector<PlanTree> subs;
        subs.reserve(refs.size());
        for (const auto& r : refs) subs.push_back(subtree_to_tree(plan, r));
        std::vector<const PlanTree*> graphs{&plan};
        for (const auto& st : subs) graphs.push_back(&st);
        const ad::Mat embs = detail::embed_trees_once(model, graphs);
        ad::Tape tape;
        ad::Var sub_embs = tape.leaf(embs.bottomRows(embs.rows() - 1));
        ad::Var plan_emb = tape.leaf(embs.topRows(1).replicate(embs.rows() - 1, 1));
        const ad::Mat ec = tape.value(explain_batch(tape, model.params, model.explainer, sub_embs, plan_emb));

        std::unordered_map<int, double> ec_st, ac_st;
        for (std::size_t i = 0; i < refs.size(); ++i) {
          const double ac = actual_contribution(plan, refs[i]);
          ec_st[refs[i].root_node_id] = ec(static_cast<Eigen::Index>(i), 0);
          ac_st[refs[i].root_node_id] = ac;
          abs_ec_err_sum += std::abs(ac - ec(static_cast<Eigen::Index>(i), 0));
          ++abs_ec_err_count;
        }
        // Contribution of each minimal subgraph telescopes over internal
        // nodes only, so the labeled (leaf-free) subtree set covers it.
        std::map<int, double> pred, actual;
        for (const auto& sg : partition_min_subgraphs(plan)) {
          const int parent = subgraph_parent(plan, sg);
          double pv = ec_st.at(parent), av = ac_st.at(parent);
          for (int c : plan.node(parent).children) {
            if (!plan.is_leaf(c)) {
              pv -= ec_st.at(c);
              av -= ac_st.at(c);
            }
          }
          pred[parent] = pv;
          actual[parent] = av;
        }
        top1_sum += topk_subgraph_accuracy(pred, actual, 1);
        infl1_sum += topk_influence_ratio(pred, actual, 1);
        ++expl_plans;
        if (pred.size() >= 2) {
          top12_sum += topk_subgraph_accuracy(pred, actual, 2);
          infl12_sum += topk_influence_ratio(pred, actual, 2);
          const auto pred_ids = detail::ranked_ids(pred);
          const auto act_ids = detail::ranked_ids(actual);
          top1or2_sum += (pred_ids[0] == act_ids[0] || pred_ids[0] == act_ids[1]) ? 1.0 : 0.0;
          ++expl_plans_k2;
        } else {
          top1or2_sum += topk_subgraph_accuracy(pred, actual, 1);
        }
      }
    }
  }

  out.report.num_queries = sets.size();
  out.report.num_plans = est_ms_all.size();
  out.report.q_error = PercentileSummary::of(q_errors);
  out.report.spearman = est_ms_all.size() >= 2 ? spearman(est_ms_all, act_ms_all) : 0.0;
  out.report.total_runtime_ratio = total_runtime_ratio(selected_ms, optimal_ms);
  out.report.suboptimality = PercentileSummary::of(subopts);
  if (opt.explanation && expl_plans > 0) {
    out.report.has_explanation = true;
    out.report.expl_top1_acc = top1_sum / static_cast<double>(expl_plans);
    out.report.expl_top1or2_acc = top1or2_sum / static_cast<double>(expl_plans);
    out.report.expl_top1_infl = infl1_sum / static_cast<double>(expl_plans);
    if (expl_plans_k2 > 0) {
      out.report.expl_top1and2_acc = top12_sum / static_cast<double>(expl_plans_k2);
      out.report.expl_top1and2_infl = infl12_sum / static_cast<double>(expl_plans_k2);
    }
    out.report.mean_abs_ec_error = abs_ec_err_sum / static_cast<double>(abs_ec_err_count);
  }
  out.strong_pairs = strong;
  out.pairwise_ordering_accuracy = strong == 0 ? 1.0 : static_cast<double>(ordered_ok) / static_cast<double>(strong);
  return out;
}

}  // namespace reqo
