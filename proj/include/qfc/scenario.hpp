#pragma once

// Scenario files: key = value pairs, nested `name { ... }` blocks and
// bracketed array / matrix literals. `#` starts a comment. Values are
// numbers, "quoted strings", true/false or arrays; complex matrix entries
// are written as [re, im] pairs (a bare number means a real entry).
//
//   model {
//     kind = "sme"
//     k = 1.0
//     c = [[[1, 0], [0, 0]],
//          [[0, 0], [-1, 0]]]
//   }
//
// Every key and value keeps its line, so checks done after parsing can
// still point at the offending line.

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "qfc/error.hpp"
#include "qfc/qstate.hpp"

namespace qfc {

struct ScenarioError : Error {
  using Error::Error;
};

namespace detail {

class ScenarioParser {
 public:
  ScenarioParser(std::string_view text, std::string source,
                 std::map<std::string, int>& lines)
      : text_(text), source_(std::move(source)), lines_(lines) {}

  nlohmann::json parse() {
    nlohmann::json root = nlohmann::json::object();
    lines_[""] = 1;
    entries(root, "", false);
    return root;
  }

 private:
  std::string_view text_;
  std::string source_;
  std::map<std::string, int>& lines_;
  std::size_t pos_ = 0;
  int line_ = 1;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ScenarioError(source_ + ":" + std::to_string(line_) + ": " + msg);
  }

  void skip() {
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == '\n') {
        ++line_;
        ++pos_;
      } else if (c == '#') {
        while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c)) || c == ';') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  bool at_end() {
    skip();
    return pos_ >= text_.size();
  }

  char peek() {
    skip();
    return pos_ < text_.size() ? text_[pos_] : '\0';
  }

  static bool key_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  }

  std::string key() {
    skip();
    const std::size_t start = pos_;
    while (pos_ < text_.size() && key_char(text_[pos_])) ++pos_;
    if (pos_ == start) {
      if (pos_ >= text_.size()) fail("unexpected end of file, expected a key");
      fail(std::string("expected a key, found '") + text_[pos_] + "'");
    }
    return std::string(text_.substr(start, pos_ - start));
  }

  static std::string escape_pointer(const std::string& k) {
    std::string out;
    for (char c : k) {
      if (c == '~')
        out += "~0";
      else if (c == '/')
        out += "~1";
      else
        out += c;
    }
    return out;
  }

  void entries(nlohmann::json& obj, const std::string& ptr, bool nested) {
    while (true) {
      if (at_end()) {
        if (nested) fail("unexpected end of file, missing '}'");
        return;
      }
      if (peek() == '}') {
        if (!nested) fail("unmatched '}'");
        ++pos_;
        return;
      }
      const int key_line = line_;
      const std::string k = key();
      const std::string child = ptr + "/" + escape_pointer(k);
      if (obj.contains(k)) fail("duplicate key '" + k + "'");
      lines_[child] = key_line;
      const char c = peek();
      if (c == '{') {
        ++pos_;
        nlohmann::json sub = nlohmann::json::object();
        entries(sub, child, true);
        obj[k] = std::move(sub);
      } else if (c == '=') {
        ++pos_;
        obj[k] = value(child);
      } else {
        fail("expected '=' or '{' after '" + k + "'");
      }
    }
  }

  nlohmann::json value(const std::string& ptr) {
    const char c = peek();
    if (pos_ >= text_.size()) fail("unexpected end of file, expected a value");
    lines_.emplace(ptr, line_);
    if (c == '"') return string();
    if (c == '[') return array(ptr);
    if (c == '-' || c == '+' || c == '.' ||
        std::isdigit(static_cast<unsigned char>(c)))
      return number();
    const std::size_t start = pos_;
    while (pos_ < text_.size() && key_char(text_[pos_])) ++pos_;
    const std::string_view word = text_.substr(start, pos_ - start);
    if (word == "true") return true;
    if (word == "false") return false;
    if (word.empty()) fail(std::string("unexpected character '") + c + "'");
    fail("unquoted word '" + std::string(word) +
         "' (strings must be in double quotes)");
  }

  nlohmann::json string() {
    ++pos_;
    std::string out;
    while (true) {
      if (pos_ >= text_.size()) fail("unterminated string");
      const char c = text_[pos_++];
      if (c == '"') break;
      if (c == '\n') fail("newline inside string");
      if (c == '\\') {
        if (pos_ >= text_.size()) fail("unterminated string");
        const char e = text_[pos_++];
        if (e == 'n')
          out += '\n';
        else if (e == '"' || e == '\\')
          out += e;
        else
          fail(std::string("unknown escape '\\") + e + "'");
      } else {
        out += c;
      }
    }
    return out;
  }

  nlohmann::json number() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) ||
            text_[pos_] == '.' || text_[pos_] == '-' || text_[pos_] == '+'))
      ++pos_;
    const std::string tok(text_.substr(start, pos_ - start));
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      fail("malformed number '" + tok + "'");
    }
    if (used != tok.size() || !std::isfinite(v))
      fail("malformed number '" + tok + "'");
    const bool integral = tok.find_first_of(".eE") == std::string::npos;
    if (integral && std::abs(v) < 9e15) return static_cast<std::int64_t>(v);
    return v;
  }

  nlohmann::json array(const std::string& ptr) {
    ++pos_;
    nlohmann::json arr = nlohmann::json::array();
    bool need_sep = false;
    while (true) {
      const char c = peek();
      if (pos_ >= text_.size()) fail("unexpected end of file, missing ']'");
      if (c == ']') {
        ++pos_;
        return arr;
      }
      if (c == ',') {
        if (!need_sep) fail("unexpected ','");
        ++pos_;
        need_sep = false;
        continue;
      }
      if (need_sep) fail("expected ',' or ']' in array");
      arr.push_back(value(ptr + "/" + std::to_string(arr.size())));
      need_sep = true;
    }
  }
};

}  // namespace detail

/// A parsed scenario plus typed, line-anchored accessors. Paths are JSON
/// pointers such as "/model/k".
class Scenario {
 public:
  static Scenario parse(std::string_view text, std::string source = "<scenario>") {
    Scenario s;
    s.source_ = source;
    detail::ScenarioParser p(text, std::move(source), s.lines_);
    s.root_ = p.parse();
    return s;
  }

  static Scenario load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ScenarioError(path.string() + ": cannot open scenario file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  const nlohmann::json& root() const { return root_; }
  nlohmann::json& root() { return root_; }
  const std::string& source() const { return source_; }

  bool has(const std::string& ptr) const {
    return root_.contains(nlohmann::json::json_pointer(ptr));
  }

  /// Line of `ptr` or of its nearest ancestor that has one.
  int line_of(std::string ptr) const {
    while (true) {
      const auto it = lines_.find(ptr);
      if (it != lines_.end()) return it->second;
      if (ptr.empty()) return 1;
      ptr.erase(ptr.rfind('/'));
    }
  }

  [[noreturn]] void fail(const std::string& ptr, const std::string& msg) const {
    throw ScenarioError(source_ + ":" + std::to_string(line_of(ptr)) + ": " +
                        label(ptr) + msg);
  }

  const nlohmann::json& at(const std::string& ptr) const {
    if (!has(ptr)) fail(ptr, "missing required entry");
    return root_.at(nlohmann::json::json_pointer(ptr));
  }

  double number(const std::string& ptr) const {
    const auto& v = at(ptr);
    if (!v.is_number()) fail(ptr, "expected a number");
    return v.get<double>();
  }
  double number(const std::string& ptr, double fallback) const {
    return has(ptr) ? number(ptr) : fallback;
  }
  double positive(const std::string& ptr) const {
    const double v = number(ptr);
    if (!(v > 0)) fail(ptr, "must be positive");
    return v;
  }
  double positive(const std::string& ptr, double fallback) const {
    return has(ptr) ? positive(ptr) : fallback;
  }

  std::int64_t integer(const std::string& ptr) const {
    const auto& v = at(ptr);
    if (!v.is_number_integer()) fail(ptr, "expected an integer");
    return v.get<std::int64_t>();
  }
  std::int64_t integer(const std::string& ptr, std::int64_t fallback) const {
    return has(ptr) ? integer(ptr) : fallback;
  }

  bool boolean(const std::string& ptr, bool fallback) const {
    if (!has(ptr)) return fallback;
    const auto& v = at(ptr);
    if (!v.is_boolean()) fail(ptr, "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& ptr) const {
    const auto& v = at(ptr);
    if (!v.is_string()) fail(ptr, "expected a quoted string");
    return v.get<std::string>();
  }
  std::string string(const std::string& ptr, const std::string& fallback) const {
    return has(ptr) ? string(ptr) : fallback;
  }

  /// String restricted to a fixed set of choices.
  std::string choice(const std::string& ptr, const std::vector<std::string>& allowed,
                     std::optional<std::string> fallback = std::nullopt) const {
    if (!has(ptr) && fallback) return *fallback;
    const std::string v = string(ptr);
    for (const auto& a : allowed)
      if (v == a) return v;
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    fail(ptr, "unknown value \"" + v + "\" (expected one of: " + list + ")");
  }

  std::vector<double> numbers(const std::string& ptr) const {
    const auto& v = at(ptr);
    if (v.is_number()) return {v.get<double>()};
    if (!v.is_array()) fail(ptr, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) fail(ptr + "/" + std::to_string(i), "expected a number");
      out.push_back(v[i].get<double>());
    }
    return out;
  }

  /// Square complex matrix, row-major, entries [re, im] or real numbers.
  CMatrix matrix(const std::string& ptr) const {
    const auto& v = at(ptr);
    if (!v.is_array() || v.empty()) fail(ptr, "expected a matrix literal");
    const auto n = static_cast<Eigen::Index>(v.size());
    CMatrix m(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const std::string row_ptr = ptr + "/" + std::to_string(i);
      const auto& row = v[static_cast<std::size_t>(i)];
      if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n)
        fail(row_ptr, "matrix must be square (" + std::to_string(n) + " rows)");
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto& e = row[static_cast<std::size_t>(j)];
        const std::string e_ptr = row_ptr + "/" + std::to_string(j);
        if (e.is_number()) {
          m(i, j) = {e.get<double>(), 0.0};
        } else if (e.is_array() && e.size() == 2 && e[0].is_number() &&
                   e[1].is_number()) {
          m(i, j) = {e[0].get<double>(), e[1].get<double>()};
        } else {
          fail(e_ptr, "matrix entry must be a number or a [re, im] pair");
        }
      }
    }
    return m;
  }

  Observable observable(const std::string& ptr) const {
    try {
      return Observable(matrix(ptr));
    } catch (const ScenarioError&) {
      throw;
    } catch (const Error& e) {
      fail(ptr, e.what());
    }
  }

  /// Re-raises a library error raised while building from `ptr`.
  template <class Fn>
  auto guarded(const std::string& ptr, Fn&& fn) const -> decltype(fn()) {
    try {
      return fn();
    } catch (const ScenarioError&) {
      throw;
    } catch (const Error& e) {
      fail(ptr, e.what());
    }
  }

 private:
  nlohmann::json root_;
  std::string source_;
  std::map<std::string, int> lines_;

  static std::string label(const std::string& ptr) {
    if (ptr.empty()) return "";
    std::string out;
    for (std::size_t i = 1; i < ptr.size(); ++i) out += ptr[i] == '/' ? '.' : ptr[i];
    return out + ": ";
  }
};

}  // namespace qfc
