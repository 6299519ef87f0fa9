// Command-line front end: synthetic workload generation, plan ingestion,
// training, estimation, ranking, explanation, and evaluation.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "reqo/oracle.hpp"
#include "reqo/pipeline.hpp"
#include "reqo/plan_json.hpp"

namespace {

using namespace reqo;
using nlohmann::json;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("'" + path + "': malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what(),
                     static_cast<long>(e.byte));
  }
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

struct FoldArgs {
  int fold = -1;
  int folds = 10;
  std::uint64_t fold_seed = 1;

  void attach(CLI::App* cmd, const char* what) {
    cmd->add_option("--fold", fold, std::string("query-level fold to ") + what + " (-1 = all)");
    cmd->add_option("--folds", folds, "number of folds");
    cmd->add_option("--fold-seed", fold_seed, "fold shuffle seed");
  }
};

TrainingConfig load_training_config(const std::string& path) {
  if (path.empty()) return TrainingConfig{};
  return training_config_from_json(read_json_file(path));
}

Checkpoint load_model(const std::string& model_path, const std::string& catalog_path) {
  return load_checkpoint(model_path, read_catalog_file(catalog_path));
}

// Dataset rows may be candidate sets or single plan documents.
std::vector<CandidatePlanSet> read_flexible_jsonl(const std::string& path, const ParseOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<CandidatePlanSet> out;
  std::map<std::string, std::size_t> by_query;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what(), static_cast<long>(e.byte));
    }
    if (j.contains("plans")) {
      out.push_back(candidate_set_from_json(j, opts));
    } else if (j.contains("plan")) {
      PlanTree plan = plan_from_plan_object(j.at("plan"), j.at("query_id").get<std::string>(), opts);
      auto [it, inserted] = by_query.try_emplace(plan.query_id, out.size());
      if (inserted) out.push_back(CandidatePlanSet{plan.query_id, {}});
      out[it->second].plans.push_back(std::move(plan));
    } else {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected 'plans' or 'plan'");
    }
  }
  return out;
}

// Derives a catalog from observed plans: operators, tables, columns with
// ranges spanned by the numeric literals seen.
Catalog derive_catalog(const std::vector<CandidatePlanSet>& sets) {
  Catalog cat;
  std::map<std::string, std::map<std::string, std::pair<double, double>>> numeric;  // table -> col -> range
  std::map<std::string, std::map<std::string, bool>> textual;
  auto note_column = [&](const std::string& qualified) -> std::pair<std::string, std::string> {
    const auto dot = qualified.find('.');
    if (dot == std::string::npos) throw ParseError("column '" + qualified + "' is not table-qualified");
    return {qualified.substr(0, dot), qualified.substr(dot + 1)};
  };
  for (const auto& set : sets) {
    for (const auto& plan : set.plans) {
      for (const auto& node : plan.nodes) {
        if (cat.node_type_index(node.op_type) < 0) cat.add_node_type(node.op_type);
        for (const auto& t : node.tables) numeric.try_emplace(t);
        for (const auto& atom : node.predicates) {
          auto [table, col] = note_column(atom.column);
          numeric.try_emplace(table);
          if (std::holds_alternative<double>(atom.operand)) {
            const double v = std::get<double>(atom.operand);
            auto [it, fresh] = numeric[table].try_emplace(col, std::pair{v, v});
            if (!fresh) {
              it->second.first = std::min(it->second.first, v);
              it->second.second = std::max(it->second.second, v);
            }
          } else if (std::holds_alternative<std::string>(atom.operand)) {
            textual[table][col] = true;
          } else {
            auto [rt, rc] = note_column(std::get<ColumnRef>(atom.operand).qualified);
            numeric[rt].try_emplace(rc, std::pair{0.0, 1.0});
            numeric[table].try_emplace(col, std::pair{0.0, 1.0});
          }
        }
      }
    }
  }
  for (const auto& [table, cols] : numeric) {
    TableDef def;
    def.name = table;
    for (const auto& [col, range] : cols) {
      ColumnDef c;
      c.name = col;
      c.kind = ColumnKind::numeric;
      c.lo = range.first;
      c.hi = range.second > range.first ? range.second : range.first + 1.0;
      def.columns.push_back(std::move(c));
    }
    if (auto it = textual.find(table); it != textual.end()) {
      for (const auto& [col, _] : it->second) def.columns.push_back(ColumnDef{col, ColumnKind::text});
    }
    if (def.columns.empty()) def.columns.push_back(ColumnDef{"c0", ColumnKind::numeric, 0.0, 1.0});
    cat.tables.push_back(std::move(def));
  }
  cat.finalize();
  cat.validate();
  return cat;
}

void write_csv_per_query(const std::string& path, const EvalResult& result) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "query_id,selected_index,selected_ms,optimal_ms,suboptimality\n";
  for (const auto& row : result.per_query)
    out << row.query_id << ',' << row.selected << ',' << row.selected_ms << ',' << row.optimal_ms << ','
        << row.suboptimality << '\n';
}

void write_percentile_bar_svg(const std::string& path, const std::string& title,
                              const std::vector<std::pair<std::string, double>>& bars) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const int width = 640, height = 360, margin = 60;
  double vmax = 1.0;
  for (const auto& [_, v] : bars) vmax = std::max(vmax, v);
  const double bar_w = static_cast<double>(width - 2 * margin) / static_cast<double>(bars.size());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title
      << "</text>\n";
  out << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin << "\" y2=\""
      << height - margin << "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double h = (height - 2 * margin) * bars[i].second / vmax;
    const double x = margin + bar_w * static_cast<double>(i) + 6.0;
    out << "<rect x=\"" << x << "\" y=\"" << (height - margin - h) << "\" width=\"" << bar_w - 12.0
        << "\" height=\"" << h << "\" fill=\"#4878a8\"/>\n";
    out << "<text x=\"" << x + (bar_w - 12.0) / 2 << "\" y=\"" << height - margin + 18
        << "\" text-anchor=\"middle\" font-size=\"12\">" << bars[i].first << "</text>\n";
    char label[32];
    std::snprintf(label, sizeof label, "%.3g", bars[i].second);
    out << "<text x=\"" << x + (bar_w - 12.0) / 2 << "\" y=\"" << (height - margin - h) - 6
        << "\" text-anchor=\"middle\" font-size=\"11\">" << label << "</text>\n";
  }
  out << "</svg>\n";
}

std::vector<std::pair<std::string, double>> percentile_bars(const PercentileSummary& s) {
  return {{"median", s.median}, {"mean", s.mean}, {"p90", s.p90}, {"p95", s.p95}, {"p99", s.p99}};
}

void render_tree(std::ostream& out, const PlanTree& tree, const std::vector<NodeOpContribution>& nodes,
                 int id, const std::string& prefix, bool last) {
  const auto& node = tree.node(id);
  out << prefix;
  if (!prefix.empty()) out << (last ? "`-- " : "|-- ");
  out << node.op_type;
  if (!node.tables.empty()) {
    out << " [";
    for (std::size_t i = 0; i < node.tables.size(); ++i) out << (i ? "," : "") << node.tables[i];
    out << "]";
  }
  const auto& c = nodes[static_cast<std::size_t>(id)];
  char buf[64];
  std::snprintf(buf, sizeof buf, "  ec_op=%.4f%s", c.value, c.negative ? " (negative)" : "");
  out << buf << '\n';
  const std::string child_prefix = prefix.empty() ? "  " : prefix + (last ? "    " : "|   ");
  for (std::size_t i = 0; i < node.children.size(); ++i)
    render_tree(out, tree, nodes, node.children[i], child_prefix, i + 1 == node.children.size());
}

json explanation_report_to_json(const PlanExplanationReport& report) {
  json subtrees = json::array();
  for (const auto& s : report.subtrees) {
    json j{{"root", s.subtree.root_node_id}, {"members", s.subtree.member_ids}, {"ec", s.ec}};
    if (s.ac.has_value()) j["ac"] = *s.ac;
    subtrees.push_back(std::move(j));
  }
  json nodes = json::array();
  bool any_negative = false;
  for (const auto& n : report.nodes) {
    nodes.push_back(json{{"node_id", n.node_id}, {"ec_op", n.value}, {"negative", n.negative}});
    any_negative = any_negative || n.negative;
  }
  return json{{"query_id", report.query_id},
              {"subtrees", std::move(subtrees)},
              {"nodes", std::move(nodes)},
              {"has_negative_contributions", any_negative}};
}

std::vector<CandidatePlanSet> apply_fold_filter(std::vector<CandidatePlanSet> sets, const FoldArgs& args,
                                                bool keep_test) {
  if (args.fold < 0) return sets;
  const auto folds = kfold(sets, args.folds, args.fold_seed);
  const auto& split = folds[static_cast<std::size_t>(args.fold)];
  return subset(sets, keep_test ? split.test_ids : split.train_ids);
}

int run(int argc, char** argv) {
  CLI::App app{"Learned query-plan cost model: training, ranking, and explanation"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic oracle workload");
  std::string gen_config, gen_dataset = "dataset.jsonl", gen_catalog = "catalog.json";
  gen->add_option("--config", gen_config, "oracle config JSON");
  gen->add_option("--dataset", gen_dataset, "output candidate-set JSONL");
  gen->add_option("--catalog", gen_catalog, "output catalog JSON");
  gen->callback([&]() {
    const OracleConfig cfg =
        gen_config.empty() ? OracleConfig{} : oracle_config_from_json(read_json_file(gen_config));
    cfg.validate();
    write_candidate_sets_file(gen_dataset, generate_workload(cfg));
    write_catalog_file(gen_catalog, oracle_catalog(cfg));
    std::cout << "wrote " << gen_dataset << " (" << cfg.num_queries << " queries x " << cfg.plans_per_query
              << " plans) and " << gen_catalog << "\n";
  });

  // ingest
  auto* ingest = app.add_subcommand("ingest", "group EXPLAIN-style plan documents into a dataset");
  std::string in_plans, in_out = "dataset.jsonl", in_catalog, in_emit_catalog;
  bool in_lenient = false;
  ingest->add_option("--plans", in_plans, "input JSONL of plan documents or candidate sets")->required();
  ingest->add_option("--out", in_out, "output candidate-set JSONL");
  ingest->add_option("--catalog", in_catalog, "catalog JSON to validate operators against");
  ingest->add_flag("--lenient", in_lenient, "register unknown operators instead of rejecting them");
  ingest->add_option("--emit-catalog", in_emit_catalog, "derive a catalog from the plans and write it here");
  ingest->callback([&]() {
    Catalog cat;
    ParseOptions opts;
    if (!in_catalog.empty()) {
      cat = read_catalog_file(in_catalog);
      opts.catalog = &cat;
      opts.strict = !in_lenient;
    }
    auto sets = read_flexible_jsonl(in_plans, opts);
    for (const auto& s : sets) validate_candidate_set(s);
    write_candidate_sets_file(in_out, sets);
    if (!in_emit_catalog.empty()) write_catalog_file(in_emit_catalog, derive_catalog(sets));
    std::cout << "wrote " << in_out << " (" << sets.size() << " candidate sets)\n";
  });

  // train
  auto* tr = app.add_subcommand("train", "train a cost model on a labeled dataset");
  std::string tr_dataset, tr_catalog, tr_config, tr_out = "model.ckpt";
  bool tr_verbose = false;
  FoldArgs tr_fold;
  std::uint64_t tr_seed = 0;
  bool tr_seed_set = false;
  tr->add_option("--dataset", tr_dataset, "candidate-set JSONL")->required();
  tr->add_option("--catalog", tr_catalog, "catalog JSON")->required();
  tr->add_option("--config", tr_config, "training config JSON");
  tr->add_option("--out", tr_out, "output checkpoint path");
  tr->add_option("--seed", tr_seed, "override the config seed")->each([&](const std::string&) { tr_seed_set = true; });
  tr->add_flag("--verbose", tr_verbose, "log per-epoch losses");
  tr_fold.attach(tr, "exclude from training");
  tr->callback([&]() {
    const Catalog cat = read_catalog_file(tr_catalog);
    auto sets = read_candidate_sets_file(tr_dataset);
    sets = apply_fold_filter(std::move(sets), tr_fold, /*keep_test=*/false);
    TrainingConfig cfg = load_training_config(tr_config);
    if (tr_seed_set) cfg.seed = tr_seed;
    TrainObserver obs;
    if (tr_verbose) {
      obs = [](const EpochStats& s) {
        std::fprintf(stderr, "epoch %3d  train %.5f (unc %.5f rank %.5f expl %.5f)  val %.5f\n", s.epoch,
                     s.train_loss, s.train_unc, s.train_rank, s.train_expl, s.val_loss);
      };
    }
    const Checkpoint ckpt = train(sets, cat, cfg, obs);
    save_checkpoint(tr_out, ckpt);
    std::cout << "wrote " << tr_out << "\n";
  });

  // estimate
  auto* est = app.add_subcommand("estimate", "estimate cost, variance, and integrated score per plan");
  std::string est_model, est_catalog, est_plans, est_out = "estimates.json";
  est->add_option("--model", est_model, "checkpoint path")->required();
  est->add_option("--catalog", est_catalog, "catalog JSON")->required();
  est->add_option("--plans", est_plans, "JSONL of plan documents or candidate sets")->required();
  est->add_option("--out", est_out, "output JSON report");
  est->callback([&]() {
    const Checkpoint ckpt = load_model(est_model, est_catalog);
    const auto sets = read_flexible_jsonl(est_plans);
    json rows = json::array();
    for (const auto& set : sets) {
      std::vector<const PlanTree*> trees;
      for (const auto& p : set.plans) trees.push_back(&p);
      const auto estimates = estimate_plans(ckpt.model, trees);
      for (std::size_t i = 0; i < estimates.size(); ++i) {
        rows.push_back(json{{"query_id", set.query_id},
                            {"plan_index", i},
                            {"mu", estimates[i].mu},
                            {"var", estimates[i].var},
                            {"integrated", estimates[i].integrated},
                            {"estimated_ms", unscale_runtime(estimates[i].mu, ckpt.scaler)}});
      }
    }
    write_json_file(est_out, json{{"estimates", std::move(rows)}});
    std::cout << "wrote " << est_out << "\n";
  });

  // rank
  auto* rank = app.add_subcommand("rank", "rank candidate plans and pick one per query");
  std::string rank_model, rank_catalog, rank_candidates, rank_out = "ranking.json";
  rank->add_option("--model", rank_model, "checkpoint path")->required();
  rank->add_option("--catalog", rank_catalog, "catalog JSON")->required();
  rank->add_option("--candidates", rank_candidates, "candidate-set JSONL")->required();
  rank->add_option("--out", rank_out, "output JSON report");
  rank->callback([&]() {
    const Checkpoint ckpt = load_model(rank_model, rank_catalog);
    json out_sets = json::array();
    for (const auto& set : read_candidate_sets_file(rank_candidates)) {
      std::vector<const PlanTree*> trees;
      for (const auto& p : set.plans) trees.push_back(&p);
      const auto estimates = estimate_plans(ckpt.model, trees);
      std::vector<std::size_t> order(estimates.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return estimates[a].integrated < estimates[b].integrated;
      });
      json integrated = json::array();
      for (const auto& e : estimates) integrated.push_back(e.integrated);
      out_sets.push_back(json{{"query_id", set.query_id},
                              {"chosen", order.front()},
                              {"order", order},
                              {"integrated", std::move(integrated)}});
    }
    write_json_file(rank_out, json{{"rankings", std::move(out_sets)}});
    std::cout << "wrote " << rank_out << "\n";
  });

  // explain
  auto* expl = app.add_subcommand("explain", "score subtree and node contributions for one plan");
  std::string expl_model, expl_catalog, expl_plan, expl_out = "explanation.json";
  bool expl_render = false;
  expl->add_option("--model", expl_model, "checkpoint path")->required();
  expl->add_option("--catalog", expl_catalog, "catalog JSON")->required();
  expl->add_option("--plan", expl_plan, "plan document JSON file")->required();
  expl->add_option("--out", expl_out, "output JSON report");
  expl->add_flag("--render", expl_render, "print a text tree diagram to stdout");
  expl->callback([&]() {
    const Checkpoint ckpt = load_model(expl_model, expl_catalog);
    const json doc = read_json_file(expl_plan);
    const PlanTree plan = plan_from_plan_object(doc.at("plan"), doc.value("query_id", std::string("?")));
    const PlanExplanationReport report = explain_plan(ckpt.model, plan);
    write_json_file(expl_out, explanation_report_to_json(report));
    if (expl_render) render_tree(std::cout, plan, report.nodes, plan.root_id, "", true);
    std::cout << "wrote " << expl_out << "\n";
  });

  // eval
  auto* ev = app.add_subcommand("eval", "score a labeled dataset with a trained model");
  std::string ev_model, ev_catalog, ev_dataset, ev_out = "metrics.json", ev_csv, ev_plot_dir, ev_selection = "integrated";
  bool ev_no_explanation = false;
  FoldArgs ev_fold;
  ev->add_option("--model", ev_model, "checkpoint path")->required();
  ev->add_option("--catalog", ev_catalog, "catalog JSON")->required();
  ev->add_option("--dataset", ev_dataset, "candidate-set JSONL with labels")->required();
  ev->add_option("--out", ev_out, "output metrics JSON");
  ev->add_option("--csv", ev_csv, "also write per-query CSV rows");
  ev->add_option("--plot-dir", ev_plot_dir, "write percentile bar charts (SVG) into this directory");
  ev->add_option("--selection", ev_selection, "plan selection signal: integrated | mu")
      ->check(CLI::IsMember({"integrated", "mu"}));
  ev->add_flag("--no-explanation", ev_no_explanation, "skip explanation metrics");
  ev_fold.attach(ev, "evaluate");
  ev->callback([&]() {
    const Checkpoint ckpt = load_model(ev_model, ev_catalog);
    auto sets = read_candidate_sets_file(ev_dataset);
    sets = apply_fold_filter(std::move(sets), ev_fold, /*keep_test=*/true);
    EvalOptions opts;
    opts.selection = ev_selection == "mu" ? SelectionMode::mu_only : SelectionMode::integrated;
    opts.explanation = !ev_no_explanation;
    opts.include_leaf_subtrees = ckpt.train_config.include_leaf_subtrees;
    const EvalResult result = evaluate(ckpt, sets, opts);
    json j = metrics_report_to_json(result.report);
    j["pairwise_ordering_accuracy"] = result.pairwise_ordering_accuracy;
    j["strong_pairs"] = result.strong_pairs;
    write_json_file(ev_out, j);
    if (!ev_csv.empty()) write_csv_per_query(ev_csv, result);
    if (!ev_plot_dir.empty()) {
      std::filesystem::create_directories(ev_plot_dir);
      write_percentile_bar_svg(ev_plot_dir + "/q_error.svg", "Q-error percentiles",
                               percentile_bars(result.report.q_error));
      write_percentile_bar_svg(ev_plot_dir + "/plan_suboptimality.svg", "Plan suboptimality percentiles",
                               percentile_bars(result.report.suboptimality));
    }
    std::cout << "wrote " << ev_out << "\n";
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const reqo::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
