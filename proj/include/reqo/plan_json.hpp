#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "reqo/catalog.hpp"
#include "reqo/plan.hpp"

namespace reqo {

using nlohmann::json;

// Controls operator-kind checking at ingestion. With no catalog, any operator
// string is accepted. With a catalog: strict mode rejects unknown operators,
// non-strict mode registers them.
struct ParseOptions {
  Catalog* catalog = nullptr;
  bool strict = true;
};

namespace detail {

inline PredCase pred_case_from_string(const std::string& s) {
  if (s == "join") return PredCase::join;
  if (s == "=") return PredCase::eq;
  if (s == "<>" || s == "!=") return PredCase::ne;
  if (s == ">") return PredCase::gt;
  if (s == ">=") return PredCase::ge;
  if (s == "<") return PredCase::lt;
  if (s == "<=") return PredCase::le;
  if (s == "in") return PredCase::membership;
  throw ParseError("unknown predicate op '" + s + "'");
}

inline PredicateAtom predicate_from_json(const json& j) {
  if (!j.is_object() || !j.contains("column") || !j.contains("op"))
    throw ParseError("predicate atom must be an object with 'column' and 'op'");
  PredicateAtom atom;
  atom.column = j.at("column").get<std::string>();
  atom.case_kind = pred_case_from_string(j.at("op").get<std::string>());
  if (j.contains("value")) {
    const json& v = j.at("value");
    if (v.is_number()) {
      atom.operand = v.get<double>();
    } else if (v.is_string()) {
      atom.operand = v.get<std::string>();
    } else if (v.is_object() && v.contains("column")) {
      atom.operand = ColumnRef{v.at("column").get<std::string>()};
    } else {
      throw ParseError("predicate value must be a number, string, or {\"column\": ...}");
    }
  }
  return atom;
}

inline json predicate_to_json(const PredicateAtom& atom) {
  json j;
  j["column"] = atom.column;
  j["op"] = pred_case_name(atom.case_kind);
  if (std::holds_alternative<double>(atom.operand)) {
    j["value"] = std::get<double>(atom.operand);
  } else if (std::holds_alternative<std::string>(atom.operand)) {
    j["value"] = std::get<std::string>(atom.operand);
  } else {
    j["value"] = json{{"column", std::get<ColumnRef>(atom.operand).qualified}};
  }
  return j;
}

inline std::string table_of_column(const std::string& qualified) {
  const auto dot = qualified.find('.');
  return dot == std::string::npos ? std::string() : qualified.substr(0, dot);
}

inline void add_table(std::vector<std::string>& tables, const std::string& name) {
  if (name.empty()) return;
  auto it = std::lower_bound(tables.begin(), tables.end(), name);
  if (it == tables.end() || *it != name) tables.insert(it, name);
}

// Recursive descent over the nested "Plans" arrays; ids in document order.
inline int plan_object_to_nodes(const json& j, PlanTree& tree, const ParseOptions& opts) {
  if (!j.is_object()) throw ParseError("plan node must be a JSON object");
  if (!j.contains("Node Type")) throw ParseError("plan node missing 'Node Type'");
  PlanNode node;
  node.node_id = tree.size();
  node.op_type = j.at("Node Type").get<std::string>();
  if (opts.catalog != nullptr && opts.catalog->node_type_index(node.op_type) < 0) {
    if (opts.strict) throw CatalogError("unknown operator kind '" + node.op_type + "'");
    opts.catalog->add_node_type(node.op_type);
  }
  if (j.contains("Relation Name")) add_table(node.tables, j.at("Relation Name").get<std::string>());
  if (j.contains("Filter")) {
    const json& filters = j.at("Filter");
    if (!filters.is_array()) throw ParseError("'Filter' must be an array of predicate atoms");
    for (const auto& f : filters) {
      PredicateAtom atom = predicate_from_json(f);
      add_table(node.tables, table_of_column(atom.column));
      if (std::holds_alternative<ColumnRef>(atom.operand))
        add_table(node.tables, table_of_column(std::get<ColumnRef>(atom.operand).qualified));
      node.predicates.push_back(std::move(atom));
    }
  }
  const double per_loop_ms = j.value("Actual Total Time", 0.0);
  node.loop_count = j.value("Actual Loops", 1);
  if (node.loop_count <= 0) throw ParseError("'Actual Loops' must be positive");
  if (per_loop_ms < 0.0) throw ParseError("'Actual Total Time' must be nonnegative");
  // Recorded time is per loop; the stored label is total work.
  node.actual_total_ms = per_loop_ms * node.loop_count;

  const int my_id = node.node_id;
  tree.nodes.push_back(std::move(node));
  if (j.contains("Plans")) {
    const json& kids = j.at("Plans");
    if (!kids.is_array()) throw ParseError("'Plans' must be an array");
    for (const auto& k : kids) {
      const int child_id = plan_object_to_nodes(k, tree, opts);
      tree.nodes[static_cast<std::size_t>(my_id)].children.push_back(child_id);
    }
  }
  return my_id;
}

}  // namespace detail

// Builds a PlanTree from a parsed plan object ({"Node Type": ...}).
inline PlanTree plan_from_plan_object(const json& plan, const std::string& query_id,
                                      const ParseOptions& opts = {}) {
  PlanTree tree;
  tree.query_id = query_id;
  detail::plan_object_to_nodes(plan, tree, opts);
  tree.root_id = 0;
  validate_tree(tree);
  return tree;
}

// Parses one plan document: {"query_id": str, "plan": {...}}.
inline PlanTree parse_plan_document(std::string_view text, const ParseOptions& opts = {}) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what(),
                     static_cast<long>(e.byte));
  }
  if (!doc.is_object() || !doc.contains("query_id") || !doc.contains("plan"))
    throw ParseError("plan document must be an object with 'query_id' and 'plan'");
  return plan_from_plan_object(doc.at("plan"), doc.at("query_id").get<std::string>(), opts);
}

// Serializes a tree back into the nested plan-object form. Inverts the
// loop-count multiplication so a parse round-trips.
inline json plan_to_json(const PlanTree& tree, int node_id) {
  const PlanNode& node = tree.node(node_id);
  json j;
  j["Node Type"] = node.op_type;
  // Scan-style nodes carry their relation explicitly; tables implied by
  // predicate columns are reconstructed at parse time.
  if (!node.tables.empty() && node.predicates.empty()) j["Relation Name"] = node.tables.front();
  if (node.tables.size() == 1 && !node.predicates.empty()) j["Relation Name"] = node.tables.front();
  if (!node.predicates.empty()) {
    json filters = json::array();
    for (const auto& atom : node.predicates) filters.push_back(detail::predicate_to_json(atom));
    j["Filter"] = std::move(filters);
  }
  j["Actual Total Time"] = node.actual_total_ms / node.loop_count;
  j["Actual Loops"] = node.loop_count;
  if (!node.children.empty()) {
    json kids = json::array();
    for (int c : node.children) kids.push_back(plan_to_json(tree, c));
    j["Plans"] = std::move(kids);
  }
  return j;
}

inline json plan_to_json(const PlanTree& tree) { return plan_to_json(tree, tree.root_id); }

inline json plan_document_to_json(const PlanTree& tree) {
  return json{{"query_id", tree.query_id}, {"plan", plan_to_json(tree)}};
}

// Candidate set line: {"query_id": str, "plans": [plan-object, ...]}.
inline CandidatePlanSet candidate_set_from_json(const json& j, const ParseOptions& opts = {}) {
  if (!j.is_object() || !j.contains("query_id") || !j.contains("plans"))
    throw ParseError("candidate set must be an object with 'query_id' and 'plans'");
  CandidatePlanSet set;
  set.query_id = j.at("query_id").get<std::string>();
  const json& plans = j.at("plans");
  if (!plans.is_array() || plans.empty()) throw ParseError("'plans' must be a non-empty array");
  for (const auto& p : plans) set.plans.push_back(plan_from_plan_object(p, set.query_id, opts));
  validate_candidate_set(set);
  return set;
}

inline json candidate_set_to_json(const CandidatePlanSet& set) {
  json plans = json::array();
  for (const auto& p : set.plans) plans.push_back(plan_to_json(p));
  return json{{"query_id", set.query_id}, {"plans", std::move(plans)}};
}

inline std::vector<CandidatePlanSet> read_candidate_sets(std::istream& in, const ParseOptions& opts = {}) {
  std::vector<CandidatePlanSet> sets;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": malformed JSON at byte " +
                           std::to_string(e.byte) + ": " + e.what(),
                       static_cast<long>(e.byte));
    }
    sets.push_back(candidate_set_from_json(j, opts));
  }
  return sets;
}

inline std::vector<CandidatePlanSet> read_candidate_sets_file(const std::string& path,
                                                              const ParseOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return read_candidate_sets(in, opts);
}

inline void write_candidate_sets(std::ostream& out, const std::vector<CandidatePlanSet>& sets) {
  for (const auto& s : sets) out << candidate_set_to_json(s).dump() << '\n';
}

inline void write_candidate_sets_file(const std::string& path, const std::vector<CandidatePlanSet>& sets) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_candidate_sets(out, sets);
}

// ---- Catalog JSON ----

inline Catalog catalog_from_json(const json& j) {
  Catalog cat;
  for (const auto& op : j.at("node_types")) cat.node_types.push_back(op.get<std::string>());
  for (const auto& tj : j.at("tables")) {
    TableDef table;
    table.name = tj.at("name").get<std::string>();
    for (const auto& cj : tj.at("columns")) {
      ColumnDef col;
      col.name = cj.at("name").get<std::string>();
      const auto kind = cj.value("kind", std::string("numeric"));
      if (kind == "numeric") {
        col.kind = ColumnKind::numeric;
        col.lo = cj.at("lo").get<double>();
        col.hi = cj.at("hi").get<double>();
      } else if (kind == "text") {
        col.kind = ColumnKind::text;
      } else {
        throw ParseError("unknown column kind '" + kind + "'");
      }
      table.columns.push_back(std::move(col));
    }
    cat.tables.push_back(std::move(table));
  }
  cat.finalize();
  cat.validate();
  return cat;
}

inline json catalog_to_json(const Catalog& cat) {
  json j;
  j["node_types"] = cat.node_types;
  json tables = json::array();
  for (const auto& t : cat.tables) {
    json tj;
    tj["name"] = t.name;
    json cols = json::array();
    for (const auto& c : t.columns) {
      json cj;
      cj["name"] = c.name;
      if (c.kind == ColumnKind::numeric) {
        cj["kind"] = "numeric";
        cj["lo"] = c.lo;
        cj["hi"] = c.hi;
      } else {
        cj["kind"] = "text";
      }
      cols.push_back(std::move(cj));
    }
    tj["columns"] = std::move(cols);
    tables.push_back(std::move(tj));
  }
  j["tables"] = std::move(tables);
  return j;
}

inline Catalog read_catalog_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed catalog JSON at byte " + std::to_string(e.byte) + ": " + e.what(),
                     static_cast<long>(e.byte));
  }
  return catalog_from_json(j);
}

inline void write_catalog_file(const std::string& path, const Catalog& cat) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << catalog_to_json(cat).dump(2) << '\n';
}

}  // namespace reqo
