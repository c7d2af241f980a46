#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tfn {

// Bad or unknown configuration entry; key() names the offender.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Flat `key = value` text. `#` starts a comment, blank lines are skipped and
/// `include = path` splices another file (relative to the including file) at
/// that point. Later assignments override earlier ones.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::filesystem::path& base_dir = ".");
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const;
  std::optional<std::string> get(const std::string& key) const;
  void set(const std::string& key, const std::string& value);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<long long> get_int_list(const std::string& key, const std::vector<long long>& fallback) const;

  // Keys in first-assignment order.
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  std::string to_text() const;

  // Throws ConfigError for the first key not in `known`.
  void require_known(const std::vector<std::string>& known) const;

 private:
  void parse_into(const std::string& text, const std::filesystem::path& base_dir, int depth);
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Shortest text that parses back to exactly the same double.
std::string format_double(double v);

}  // namespace tfn
