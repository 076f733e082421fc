// SPDX-License-Identifier: Apache-2.0
#ifndef METRO_CONFIG_HPP
#define METRO_CONFIG_HPP

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "metro/chem_text.hpp"
#include "metro/error.hpp"

namespace metro {

/// Parses "key = value" lines. '#' starts a comment, [section] headers are
/// ignored, values may be double-quoted.
inline std::map<std::string, std::string> parse_key_values(std::istream &in,
                                                           const std::string &origin) {
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::string t = trim(line);
    if (t.empty() || t.front() == '[') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kInvalidArgument,
                  origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (key.empty()) {
      throw Error(ErrorCode::kInvalidArgument,
                  origin + ":" + std::to_string(lineno) + ": empty key");
    }
    out[key] = value;
  }
  return out;
}

inline std::map<std::string, std::string> read_key_values(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  return parse_key_values(in, path.string());
}

template <typename Number>
Number parse_number(const std::string &key, const std::string &text) {
  Number value{};
  const char *first = text.data();
  const char *last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw Error(ErrorCode::kInvalidArgument,
                "bad value '" + text + "' for " + key);
  }
  return value;
}

inline bool parse_bool(const std::string &key, const std::string &text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw Error(ErrorCode::kInvalidArgument, "bad boolean '" + text + "' for " + key);
}

}  // namespace metro

#endif  // METRO_CONFIG_HPP
