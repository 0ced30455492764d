#include "neused/toml.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace neused {

namespace {

[[noreturn]] void fail(const std::string& origin, int line, const std::string& msg) {
  throw ConfigError(origin + ":" + std::to_string(line) + ": " + msg);
}

bool is_bare_key_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

// Removes a trailing comment, honoring quotes.
std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (in_str) {
      if (c == '\\') ++i;
      else if (c == '"') in_str = false;
    } else if (c == '"') {
      in_str = true;
    } else if (c == '#') {
      return s.substr(0, i);
    }
  }
  return s;
}

std::string parse_basic_string(const std::string& origin, int line, const std::string& raw) {
  if (raw.size() < 2 || raw.front() != '"' || raw.back() != '"')
    fail(origin, line, "malformed string literal: " + raw);
  std::string out;
  for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
    char c = raw[i];
    if (c == '"') fail(origin, line, "stray quote inside string literal");
    if (c == '\\') {
      if (i + 2 >= raw.size()) fail(origin, line, "dangling escape in string literal");
      const char e = raw[++i];
      switch (e) {
        case '"': out.push_back('"'); break;
        case '\\': out.push_back('\\'); break;
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        default: fail(origin, line, std::string("unsupported escape \\") + e);
      }
    } else {
      out.push_back(c);
    }
  }
  return out;
}

bool parse_number(const std::string& tok, TomlValue& v) {
  if (tok.empty()) return false;
  const bool looks_real = tok.find_first_of(".eE") != std::string::npos &&
                          tok.find_first_of("0123456789") != std::string::npos;
  errno = 0;
  char* end = nullptr;
  if (!looks_real) {
    const long long i = std::strtoll(tok.c_str(), &end, 10);
    if (errno == 0 && end && *end == '\0') {
      v.kind = TomlValue::Kind::integer;
      v.i = i;
      v.d = static_cast<double>(i);
      return true;
    }
    errno = 0;
    end = nullptr;
  }
  const double d = std::strtod(tok.c_str(), &end);
  if (errno != 0 || !end || *end != '\0') return false;
  v.kind = TomlValue::Kind::real;
  v.d = d;
  return true;
}

TomlValue parse_value(const std::string& origin, int line, const std::string& raw) {
  TomlValue v;
  v.line = line;
  const std::string tok = trim(raw);
  if (tok.empty()) fail(origin, line, "missing value");
  if (tok.front() == '"') {
    v.kind = TomlValue::Kind::string;
    v.s = parse_basic_string(origin, line, tok);
    return v;
  }
  if (tok == "true" || tok == "false") {
    v.kind = TomlValue::Kind::boolean;
    v.b = tok == "true";
    return v;
  }
  if (tok.front() == '[') {
    if (tok.back() != ']') fail(origin, line, "unterminated array");
    v.kind = TomlValue::Kind::array;
    const std::string inner = trim(tok.substr(1, tok.size() - 2));
    if (!inner.empty()) {
      std::stringstream ss(inner);
      std::string item;
      while (std::getline(ss, item, ',')) {
        TomlValue elem;
        const std::string et = trim(item);
        if (!parse_number(et, elem)) fail(origin, line, "arrays may hold numbers only: " + et);
        v.arr.push_back(elem.d);
      }
    }
    return v;
  }
  if (parse_number(tok, v)) return v;
  fail(origin, line, "cannot parse value: " + tok);
}

}  // namespace

double TomlValue::as_real() const {
  if (kind == Kind::real || kind == Kind::integer) return d;
  throw ConfigError("config line " + std::to_string(line) + ": expected a number");
}

long long TomlValue::as_int() const {
  if (kind == Kind::integer) return i;
  throw ConfigError("config line " + std::to_string(line) + ": expected an integer");
}

const std::string& TomlValue::as_string() const {
  if (kind == Kind::string) return s;
  throw ConfigError("config line " + std::to_string(line) + ": expected a string");
}

bool TomlValue::as_bool() const {
  if (kind == Kind::boolean) return b;
  throw ConfigError("config line " + std::to_string(line) + ": expected true/false");
}

const std::vector<double>& TomlValue::as_array() const {
  if (kind == Kind::array) return arr;
  throw ConfigError("config line " + std::to_string(line) + ": expected an array");
}

bool TomlDoc::has(const std::string& table, const std::string& key) const {
  return find(table, key) != nullptr;
}

const TomlValue* TomlDoc::find(const std::string& table, const std::string& key) const {
  const auto t = tables.find(table);
  if (t == tables.end()) return nullptr;
  const auto k = t->second.find(key);
  return k == t->second.end() ? nullptr : &k->second;
}

TomlDoc parse_toml(const std::string& text, const std::string& origin) {
  TomlDoc doc;
  std::string current;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') fail(origin, lineno, "unterminated table header");
      const std::string name = trim(line.substr(1, line.size() - 2));
      if (name.empty()) fail(origin, lineno, "empty table name");
      for (char c : name)
        if (!is_bare_key_char(c)) fail(origin, lineno, "bad table name: " + name);
      if (doc.tables.count(name)) fail(origin, lineno, "duplicate table [" + name + "]");
      doc.tables[name];
      current = name;
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(origin, lineno, "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) fail(origin, lineno, "empty key");
    for (char c : key)
      if (!is_bare_key_char(c)) fail(origin, lineno, "bad key: " + key);
    if (current.empty()) fail(origin, lineno, "key outside any [table]: " + key);
    TomlTable& table = doc.tables[current];
    if (table.count(key)) fail(origin, lineno, "duplicate key: " + key);
    table[key] = parse_value(origin, lineno, line.substr(eq + 1));
  }
  return doc;
}

TomlDoc parse_toml_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_toml(buf.str(), path);
}

}  // namespace neused
