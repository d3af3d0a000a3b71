#pragma once

#include "hetsense/common.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hetsense {

/// Flat configuration: dotted keys mapped to their raw text values.
///
/// Text form, one entry per line:
///
///   # comment
///   model.d = 100
///   grid = 0, 1, 2, 3
///
/// A JSON object is accepted as well; nested objects flatten to dotted keys and
/// arrays become comma-separated lists.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  /// Later entries win.
  void merge(const KeyValueConfig& other);

  std::optional<std::string> get(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<std::uint64_t> get_seeds(const std::string& key, const std::vector<std::uint64_t>& fallback) const;

  /// Keys not in `known`; used to reject typos.
  std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Sorted `key = value` lines.
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Locale-independent shortest round-trip decimal form.
std::string format_double(double v);

/// Strict parse of a whole string as a double; throws ConfigError naming `what`.
double parse_double(const std::string& text, const std::string& what);

}  // namespace hetsense
