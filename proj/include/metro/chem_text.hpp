// SPDX-License-Identifier: Apache-2.0
//
// SMILES text handling: atom-level tokenization, reactant-set joining and the
// token vocabulary shared by the encoder and decoder.

#ifndef METRO_CHEM_TEXT_HPP
#define METRO_CHEM_TEXT_HPP

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <unistd.h>

#include "metro/error.hpp"

namespace metro {

inline constexpr char kReactantSeparator = '.';

/// Characters that may never occur inside a single molecule string.
inline bool is_reserved_char(char c) {
  return c == '.' || c == '>' || c == '^' || c == '$' || c == ' ' ||
         c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

inline void validate_molecule(std::string_view smiles) {
  if (smiles.empty()) throw Error(ErrorCode::kEmptyInput, "empty molecule");
  for (char c : smiles) {
    if (is_reserved_char(c)) {
      throw Error(ErrorCode::kInvalidCharacter,
                  "character '" + std::string(1, c) + "' in molecule '" +
                      std::string(smiles) + "'");
    }
  }
}

inline bool is_valid_molecule(std::string_view smiles) {
  if (smiles.empty()) return false;
  return std::none_of(smiles.begin(), smiles.end(), is_reserved_char);
}

/// Splits a SMILES (or a "."-joined reactant set) into atom-level tokens:
/// bracket atoms are one token, Cl and Br are one token, everything else is a
/// single character. Concatenating the result reproduces the input.
inline std::vector<std::string> tokenize(std::string_view smiles) {
  if (smiles.empty()) throw Error(ErrorCode::kEmptyInput, "empty SMILES");
  std::vector<std::string> tokens;
  tokens.reserve(smiles.size());
  for (std::size_t i = 0; i < smiles.size();) {
    const char c = smiles[i];
    if (c != '.' && is_reserved_char(c)) {
      throw Error(ErrorCode::kInvalidCharacter,
                  "character '" + std::string(1, c) + "' at " +
                      std::to_string(i) + " in '" + std::string(smiles) + "'");
    }
    if (c == '[') {
      std::size_t j = i + 1;
      while (j < smiles.size() && smiles[j] != ']' && smiles[j] != '[') ++j;
      if (j == smiles.size() || smiles[j] != ']') {
        throw Error(ErrorCode::kUnbalancedBracket,
                    "'[' at " + std::to_string(i) + " in '" +
                        std::string(smiles) + "'");
      }
      tokens.emplace_back(smiles.substr(i, j - i + 1));
      i = j + 1;
      continue;
    }
    if (c == ']') {
      throw Error(ErrorCode::kUnbalancedBracket,
                  "stray ']' at " + std::to_string(i) + " in '" +
                      std::string(smiles) + "'");
    }
    if (i + 1 < smiles.size() &&
        ((c == 'C' && smiles[i + 1] == 'l') ||
         (c == 'B' && smiles[i + 1] == 'r'))) {
      tokens.emplace_back(smiles.substr(i, 2));
      i += 2;
      continue;
    }
    tokens.emplace_back(1, c);
    ++i;
  }
  return tokens;
}

inline std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (const auto &t : tokens) out += t;
  return out;
}

/// "r1.r2...rn" in the given order.
inline std::string join_reactants(std::span<const std::string> reactants) {
  if (reactants.empty()) throw Error(ErrorCode::kEmptyList, "no reactants");
  std::string out;
  for (std::size_t i = 0; i < reactants.size(); ++i) {
    if (i) out += kReactantSeparator;
    out += reactants[i];
  }
  return out;
}

inline std::vector<std::string> split_reactants(std::string_view text) {
  if (text.empty()) throw Error(ErrorCode::kEmptyInput, "empty reactant set");
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = text.find(kReactantSeparator, start);
    const std::string_view part =
        text.substr(start, dot == std::string_view::npos ? text.npos
                                                         : dot - start);
    if (part.empty()) {
      throw Error(ErrorCode::kEmptyComponent,
                  "empty component in '" + std::string(text) + "'");
    }
    out.emplace_back(part);
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return out;
}

/// Token vocabulary. Ids 0..4 are reserved and fixed:
///   0 "<pad>", 1 "^" (start), 2 "$" (end), 3 "." (reactant separator),
///   4 "<unk>".
/// Corpus tokens follow in lexicographic order of their text.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kSeparator = 3;
  static constexpr int kUnknown = 4;
  static constexpr int kNumReserved = 5;

  Vocab() : tokens_{"<pad>", "^", "$", ".", "<unk>"} { reindex(); }

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    const Vocab reserved;
    if (tokens_.size() < kNumReserved ||
        !std::equal(reserved.tokens_.begin(), reserved.tokens_.end(),
                     tokens_.begin())) {
      throw Error(ErrorCode::kSchemaMismatch,
                  "vocabulary does not start with the reserved block");
    }
    reindex();
    if (index_.size() != tokens_.size()) {
      throw Error(ErrorCode::kSchemaMismatch, "duplicate vocabulary token");
    }
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string> &tokens() const { return tokens_; }
  const std::string &text(int id) const { return tokens_.at(id); }

  bool contains(std::string_view token) const {
    return index_.find(std::string(token)) != index_.end();
  }

  int id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnknown : it->second;
  }

  std::vector<int> encode(std::span<const std::string> tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto &t : tokens) ids.push_back(id(t));
    return ids;
  }

  std::vector<std::string> decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(text(i));
    return out;
  }

  /// "^" + tokens + "$" as ids.
  std::vector<int> encode_sequence(std::string_view smiles) const {
    auto tokens = tokenize(smiles);
    std::vector<int> ids;
    ids.reserve(tokens.size() + 2);
    ids.push_back(kStart);
    for (const auto &t : tokens) ids.push_back(id(t));
    ids.push_back(kEnd);
    return ids;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      index_.emplace(tokens_[i], static_cast<int>(i));
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

template <typename Range>
Vocab build_vocab(const Range &corpus) {
  const Vocab reserved;
  std::set<std::string> seen;
  for (const auto &text : corpus) {
    if (std::string_view(text).empty()) continue;
    for (auto &t : tokenize(text)) {
      if (!reserved.contains(t)) seen.insert(std::move(t));
    }
  }
  std::vector<std::string> tokens = reserved.tokens();
  tokens.insert(tokens.end(), seen.begin(), seen.end());
  return Vocab(std::move(tokens));
}

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == s.npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

/// Reads a starting-material list: one SMILES per line, blank lines and
/// lines starting with '#' ignored. Trailing text after whitespace is
/// dropped so "SMILES name" files work.
inline std::set<std::string> read_starting_materials(
    const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  std::set<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto ws = t.find_first_of(" \t");
    if (ws != std::string::npos) t.resize(ws);
    validate_molecule(t);
    out.insert(std::move(t));
  }
  return out;
}

/// Runs an external canonicalizer as a filter: one SMILES per input line,
/// exactly one canonical SMILES per output line, same order.
inline std::vector<std::string> canonicalize_with(
    const std::string &command, std::span<const std::string> smiles) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto input = dir / ("metro_canon_" + std::to_string(::getpid()) + ".smi");
  {
    std::ofstream out(input);
    if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + input.string());
    for (const auto &s : smiles) out << s << '\n';
  }
  const std::string full = command + " < '" + input.string() + "'";
  FILE *pipe = ::popen(full.c_str(), "r");
  if (!pipe) {
    std::filesystem::remove(input);
    throw Error(ErrorCode::kIoFailure, "cannot run canonicalizer: " + command);
  }
  std::vector<std::string> out;
  std::string line;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) {
    line += buf;
    if (!line.empty() && line.back() == '\n') {
      out.push_back(trim(line));
      line.clear();
    }
  }
  if (!line.empty()) out.push_back(trim(line));
  const int status = ::pclose(pipe);
  std::filesystem::remove(input);
  if (status != 0 || out.size() != smiles.size()) {
    throw Error(ErrorCode::kIoFailure,
                "canonicalizer '" + command + "' returned " +
                    std::to_string(out.size()) + " lines for " +
                    std::to_string(smiles.size()) + " inputs");
  }
  return out;
}

}  // namespace metro

#endif  // METRO_CHEM_TEXT_HPP
