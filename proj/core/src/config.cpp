#include "tfn/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace tfn {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("include", "cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::filesystem::path& base_dir) {
  KeyValues kv;
  kv.parse_into(text, base_dir, 0);
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  KeyValues kv;
  kv.parse_into(read_file(path), path.parent_path(), 0);
  return kv;
}

void KeyValues::parse_into(const std::string& text, const std::filesystem::path& base_dir, int depth) {
  if (depth > 16) throw ConfigError("include", "nesting too deep (cycle?)");
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected key = value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
    if (key == "include") {
      const std::filesystem::path inc = base_dir / value;
      parse_into(read_file(inc), inc.parent_path(), depth + 1);
    } else {
      set(key, value);
    }
  }
}

bool KeyValues::has(const std::string& key) const { return get(key).has_value(); }

std::optional<std::string> KeyValues::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

void KeyValues::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

long long KeyValues::get_int(const std::string& key, long long fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  long long out = 0;
  const auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || p != v->data() + v->size()) throw ConfigError(key, "expected an integer, got '" + *v + "'");
  return out;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  double out = 0;
  const auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || p != v->data() + v->size()) throw ConfigError(key, "expected a number, got '" + *v + "'");
  return out;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  if (*v == "on" || *v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "off" || *v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError(key, "expected on/off, got '" + *v + "'");
}

std::vector<long long> KeyValues::get_int_list(const std::string& key, const std::vector<long long>& fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::vector<long long> out;
  std::istringstream is(*v);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    long long x = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
    if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
      throw ConfigError(key, "expected a comma-separated integer list, got '" + *v + "'");
    }
    out.push_back(x);
  }
  return out;
}

std::string KeyValues::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

void KeyValues::require_known(const std::vector<std::string>& known) const {
  for (const auto& [k, v] : entries_) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError(k, "unknown key");
  }
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace tfn
