// SPDX-License-Identifier: Apache-2.0
// Small models and random routes shared by unit and acceptance tests.
#ifndef METRO_TEST_FIXTURES_HPP
#define METRO_TEST_FIXTURES_HPP

#include <random>
#include <string>
#include <vector>

#include "metro/model.hpp"

namespace fixture {

inline metro::ModelConfig tiny_config(int memory_layers = 1) {
  metro::ModelConfig c;
  c.max_len = 6;
  c.d_model = 8;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.memory_layers = memory_layers;
  c.heads = 2;
  c.d_head = 4;
  c.ffn_hidden = 16;
  c.dropout = 0.0;
  c.seed = 3;
  return c;
}

inline metro::Vocab tiny_vocab() {
  return metro::build_vocab(std::vector<std::string>{"CNOS", "c.n"});
}

/// A random molecule over "CNOSc" with 1..max_tokens tokens.
inline std::string random_molecule(std::mt19937_64 &rng, int max_tokens) {
  static const std::string atoms = "CNOSc";
  std::string s;
  const int n = 1 + static_cast<int>(rng() % max_tokens);
  for (int i = 0; i < n; ++i) s += atoms[rng() % atoms.size()];
  return s;
}

inline std::vector<std::string> random_route(std::mt19937_64 &rng, int n, int max_tokens) {
  std::vector<std::string> r;
  for (int i = 0; i < n; ++i) r.push_back(random_molecule(rng, max_tokens));
  return r;
}

/// Replaces every weight by a fresh normal draw so that tests do not depend
/// on the initializer.
template <typename T>
void scramble(metro::MetroModel<T> &model, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  auto &ps = model.params();
  for (std::size_t p = 0; p < ps.size(); ++p)
    for (auto &x : ps[p].value.data) x = static_cast<T>(n(rng));
}

}  // namespace fixture

#endif  // METRO_TEST_FIXTURES_HPP
