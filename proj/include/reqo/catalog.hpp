#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "reqo/common.hpp"
#include "reqo/rng.hpp"

namespace reqo {

enum class ColumnKind { numeric, text };

struct ColumnDef {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
  // Value range, meaningful for numeric columns only.
  double lo = 0.0;
  double hi = 1.0;
};

struct TableDef {
  std::string name;
  std::vector<ColumnDef> columns;
};

// Schema context shared by the feature encoder and the synthetic generator:
// the ordered operator kinds, tables, and per-table columns with value ranges.
class Catalog {
 public:
  std::vector<std::string> node_types;
  std::vector<TableDef> tables;

  void finalize() {
    type_index_.clear();
    table_index_.clear();
    column_index_.clear();
    for (std::size_t i = 0; i < node_types.size(); ++i) type_index_[node_types[i]] = static_cast<int>(i);
    int col = 0;
    for (std::size_t t = 0; t < tables.size(); ++t) {
      table_index_[tables[t].name] = static_cast<int>(t);
      for (const auto& c : tables[t].columns) column_index_[tables[t].name + "." + c.name] = col++;
    }
    num_columns_ = col;
  }

  int node_type_index(const std::string& op) const {
    auto it = type_index_.find(op);
    return it == type_index_.end() ? -1 : it->second;
  }

  int table_index(const std::string& name) const {
    auto it = table_index_.find(name);
    return it == table_index_.end() ? -1 : it->second;
  }

  // Global index of a "table.column" name in (table order, column order).
  int column_index(const std::string& qualified) const {
    auto it = column_index_.find(qualified);
    return it == column_index_.end() ? -1 : it->second;
  }

  int num_columns() const { return num_columns_; }

  const ColumnDef* find_column(const std::string& qualified) const {
    const auto dot = qualified.find('.');
    if (dot == std::string::npos) return nullptr;
    const int t = table_index(qualified.substr(0, dot));
    if (t < 0) return nullptr;
    const auto col_name = qualified.substr(dot + 1);
    for (const auto& c : tables[static_cast<std::size_t>(t)].columns) {
      if (c.name == col_name) return &c;
    }
    return nullptr;
  }

  const ColumnDef& column_at(int global_index) const {
    int col = 0;
    for (const auto& t : tables) {
      for (const auto& c : t.columns) {
        if (col == global_index) return c;
        ++col;
      }
    }
    throw CatalogError("column index out of range");
  }

  // Registers an operator kind seen during non-strict ingestion.
  int add_node_type(const std::string& op) {
    const int existing = node_type_index(op);
    if (existing >= 0) return existing;
    node_types.push_back(op);
    type_index_[op] = static_cast<int>(node_types.size()) - 1;
    return static_cast<int>(node_types.size()) - 1;
  }

  void validate() const {
    if (node_types.empty()) throw CatalogError("catalog has no node types");
    if (tables.empty()) throw CatalogError("catalog has no tables");
    if (type_index_.size() != node_types.size()) throw CatalogError("duplicate node type in catalog");
    std::size_t n_cols = 0;
    for (const auto& t : tables) {
      if (t.columns.empty()) throw CatalogError("table '" + t.name + "' has no columns");
      n_cols += t.columns.size();
      for (const auto& c : t.columns) {
        if (c.kind == ColumnKind::numeric && !(c.lo < c.hi))
          throw CatalogError("column '" + t.name + "." + c.name + "' has empty numeric range");
      }
    }
    if (column_index_.size() != n_cols) throw CatalogError("duplicate column name in catalog");
    if (table_index_.size() != tables.size()) throw CatalogError("duplicate table name in catalog");
  }

  // Stable content hash over the canonical serialization; guards checkpoints
  // against being applied to a different schema.
  std::uint64_t fingerprint() const {
    std::string canon;
    canon.reserve(256);
    for (const auto& op : node_types) {
      canon += "op:";
      canon += op;
      canon += '\n';
    }
    char buf[64];
    for (const auto& t : tables) {
      canon += "table:";
      canon += t.name;
      canon += '\n';
      for (const auto& c : t.columns) {
        canon += "col:";
        canon += c.name;
        if (c.kind == ColumnKind::numeric) {
          std::snprintf(buf, sizeof buf, ":num:%a:%a\n", c.lo, c.hi);
          canon += buf;
        } else {
          canon += ":text\n";
        }
      }
    }
    return fnv1a64(canon);
  }

 private:
  std::unordered_map<std::string, int> type_index_;
  std::unordered_map<std::string, int> table_index_;
  std::unordered_map<std::string, int> column_index_;
  int num_columns_ = 0;
};

}  // namespace reqo
