#pragma once

// Human-readable configuration: `key = value` lines, `#` comments, and
// `[section]` headers that prefix following keys with `section.`.
// Config structs expose `fields(visitor)`; the helpers below bind them to
// dotted keys and reject anything unknown.

#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cdhvae/core/text.hpp"

namespace cdhvae {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, const std::string& source) {
    KeyValueConfig kv;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
      ++line_no;
      const auto hash = raw.find('#');
      std::string_view line = trim(std::string_view(raw).substr(0, hash));
      if (line.empty()) continue;
      const std::string where = source + ":" + std::to_string(line_no);
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
        section = std::string(trim(line.substr(1, line.size() - 2)));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
      const std::string key = std::string(trim(line.substr(0, eq)));
      if (key.empty()) throw ConfigError(where + ": empty key");
      kv.set(section.empty() ? key : section + "." + key, std::string(trim(line.substr(eq + 1))));
    }
    return kv;
  }

  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  void erase(const std::string& key) { entries_.erase(key); }

  /// Apply a command-line `key=value` override.
  void apply_override(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || trim(assignment.substr(0, eq)).empty())
      throw ConfigError("override must look like key=value: '" + std::string(assignment) + "'");
    set(std::string(trim(assignment.substr(0, eq))), std::string(trim(assignment.substr(eq + 1))));
  }

  const std::string* find(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
  }

  const std::map<std::string, std::string>& entries() const noexcept { return entries_; }

  /// Sorted `key = value` lines; stable for identical contents.
  std::string text() const {
    std::string s;
    for (const auto& [k, v] : entries_) s += k + " = " + v + "\n";
    return s;
  }

 private:
  std::map<std::string, std::string> entries_;
};

namespace kv_detail {

inline void parse_into(const std::string& text, const std::string& key, int& out) {
  const auto v = parse_int(text, key);
  if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(key + ": out of range");
  out = static_cast<int>(v);
}
inline void parse_into(const std::string& text, const std::string& key, std::uint64_t& out) {
  const auto v = parse_int(text, key);
  if (v < 0) throw ConfigError(key + ": must be non-negative");
  out = static_cast<std::uint64_t>(v);
}
inline void parse_into(const std::string& text, const std::string& key, double& out) { out = parse_double(text, key); }
inline void parse_into(const std::string& text, const std::string& key, bool& out) { out = parse_bool(text, key); }
inline void parse_into(const std::string& text, const std::string&, std::string& out) { out = text; }
template <typename E>
void parse_into(const std::string& text, const std::string& key, std::vector<E>& out) {
  out.clear();
  if (trim(text).empty()) return;
  for (const auto& part : split(text, ',')) {
    E e{};
    parse_into(part, key, e);
    out.push_back(e);
  }
}

inline std::string format(int v) { return std::to_string(v); }
inline std::string format(std::uint64_t v) { return std::to_string(v); }
inline std::string format(double v) { return format_double(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(const std::string& v) { return v; }
template <typename E>
std::string format(const std::vector<E>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format(v[i]);
  return s;
}

}  // namespace kv_detail

/// Read every field of `cfg` present under `prefix.` and record the keys used.
template <typename Cfg>
void read_section(const KeyValueConfig& kv, const std::string& prefix, Cfg& cfg, std::set<std::string>& consumed) {
  cfg.fields([&](const char* name, auto& field) {
    const std::string key = prefix.empty() ? name : prefix + "." + name;
    if (const auto* v = kv.find(key)) {
      kv_detail::parse_into(*v, key, field);
      consumed.insert(key);
    }
  });
}

template <typename Cfg>
void write_section(KeyValueConfig& kv, const std::string& prefix, Cfg cfg) {
  cfg.fields([&](const char* name, auto& field) {
    kv.set(prefix.empty() ? name : prefix + "." + name, kv_detail::format(field));
  });
}

inline void reject_unknown(const KeyValueConfig& kv, const std::set<std::string>& consumed) {
  for (const auto& [k, v] : kv.entries())
    if (!consumed.count(k)) throw ConfigError("unknown configuration key: " + k);
}

/// Round-trip a config struct through its own key-value text.
template <typename Cfg>
std::string section_text(const Cfg& cfg) {
  KeyValueConfig kv;
  write_section(kv, "", cfg);
  return kv.text();
}

template <typename Cfg>
Cfg parse_section_text(const std::string& text, const std::string& source) {
  const auto kv = KeyValueConfig::parse(text, source);
  Cfg cfg;
  std::set<std::string> consumed;
  read_section(kv, "", cfg, consumed);
  reject_unknown(kv, consumed);
  return cfg;
}

}  // namespace cdhvae
