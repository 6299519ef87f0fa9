#pragma once

#include <functional>
#include <stdexcept>
#include <string>

namespace reqo {

// Error taxonomy. Every failure surfaced by the library derives from Error so
// callers (CLI, tests) can catch one base type and still discriminate.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input text. `byte_offset` is -1 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, long byte_offset = -1)
      : Error(msg), byte_offset_(byte_offset) {}
  long byte_offset() const { return byte_offset_; }

 private:
  long byte_offset_;
};

// Tree shape violations: cycles, multiple roots, dangling child ids.
class StructureError : public Error {
 public:
  using Error::Error;
};

// Names (operators, tables, columns) missing from the catalog.
class CatalogError : public Error {
 public:
  using Error::Error;
};

// Dimension mismatches and invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Degenerate or invalid training labels (nonpositive runtimes etc).
class LabelError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

using WarnHandler = std::function<void(const std::string&)>;

namespace detail {
inline WarnHandler& warn_handler_ref() {
  static WarnHandler handler;  // empty = default stderr sink
  return handler;
}
}  // namespace detail

// Replaces the process-wide warning sink. Intended to be set once at startup;
// not synchronized against concurrent warn() calls.
inline void set_warn_handler(WarnHandler h) { detail::warn_handler_ref() = std::move(h); }

void warn(const std::string& message);

}  // namespace reqo

#include <cstdio>

namespace reqo {

inline void warn(const std::string& message) {
  auto& h = detail::warn_handler_ref();
  if (h) {
    h(message);
  } else {
    std::fprintf(stderr, "[reqo] warning: %s\n", message.c_str());
  }
}

}  // namespace reqo
