#pragma once

#include <map>
#include <string>
#include <vector>

#include "neused/common.hpp"

namespace neused {

/// Restricted TOML value: string, integer, float, boolean, or a flat array
/// of numbers. Exactly what the run configs need, nothing more.
struct TomlValue {
  enum class Kind { string, integer, real, boolean, array };
  Kind kind = Kind::string;
  std::string s;
  long long i = 0;
  double d = 0.0;
  bool b = false;
  std::vector<double> arr;
  int line = 0;

  double as_real() const;     // integer promotes to real
  long long as_int() const;   // reals are rejected
  const std::string& as_string() const;
  bool as_bool() const;
  const std::vector<double>& as_array() const;
};

using TomlTable = std::map<std::string, TomlValue>;

struct TomlDoc {
  std::map<std::string, TomlTable> tables;

  bool has(const std::string& table, const std::string& key) const;
  const TomlValue* find(const std::string& table, const std::string& key) const;
};

/// Parses the restricted dialect: [table] headers, key = value pairs, '#'
/// comments, basic-string escapes. Keys outside a table, duplicate keys,
/// duplicate tables, and anything else are ConfigError with a line number.
TomlDoc parse_toml(const std::string& text, const std::string& origin);
TomlDoc parse_toml_file(const std::string& path);

}  // namespace neused
