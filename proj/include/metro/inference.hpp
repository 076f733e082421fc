// SPDX-License-Identifier: Apache-2.0
//
// Inference on a trained model: full-route forward passes for inspection,
// greedy and beam decoding of the reactant set for the last product of a
// route prefix.

#ifndef METRO_INFERENCE_HPP
#define METRO_INFERENCE_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <map>
#include <string>
#include <vector>

#include "metro/chem_text.hpp"
#include "metro/error.hpp"
#include "metro/model.hpp"

namespace metro {

/// Per-molecule tensors of one route, dropout off.
template <typename T>
struct RouteForward {
  std::vector<nn::Tensor<T>> encoded;  // X_i, l_i x d
  std::vector<nn::Tensor<T>> memory;   // M_i, l_i x d (empty without memory)
  /// Memory attention weights, one n x n matrix per layer and head.
  std::vector<typename nn::Tensor<T>::Matrix> attention;
  /// Logits per step (target length x |V|), when targets were given.
  std::vector<nn::Tensor<T>> logits;
};

namespace detail {

template <typename T>
nn::Tensor<T> slice_rows(const nn::Tensor<T> &t, int begin, int len) {
  nn::Tensor<T> out({len, t.cols()});
  std::copy_n(&t.data[static_cast<std::size_t>(begin) * t.cols()],
              static_cast<std::size_t>(len) * t.cols(), out.data.begin());
  return out;
}

}  // namespace detail

/// Runs encoder, memory and (optionally) the teacher-forced decoder on one
/// route given as token ids.
template <typename T>
RouteForward<T> forward_route(MetroModel<T> &model,
                              const std::vector<std::vector<int>> &products,
                              const std::vector<std::vector<int>> &targets = {}) {
  nn::Tape<T> tape(false);
  RouteForward<T> out;
  auto enc = model.encode(tape, {products}, &out.attention);
  for (const auto &m : enc.routes[0]) {
    out.encoded.push_back(detail::slice_rows(tape.value(enc.x), m.begin, m.len));
    if (enc.memory) out.memory.push_back(detail::slice_rows(tape.value(*enc.memory), m.begin, m.len));
  }
  if (!targets.empty()) {
    std::vector<StepQuery> queries;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      queries.push_back({0, static_cast<int>(i), {targets[i].begin(), targets[i].end() - 1}});
    }
    auto logits = tape.value(model.decode(tape, enc, queries));
    int row = 0;
    for (const auto &q : queries) {
      const int len = static_cast<int>(q.input.size());
      out.logits.push_back(detail::slice_rows(logits, row, len));
      row += len;
    }
  }
  return out;
}

template <typename T>
RouteForward<T> forward_route(MetroModel<T> &model,
                              const std::vector<std::string> &products,
                              const std::vector<std::string> &step_targets = {}) {
  std::vector<std::vector<int>> p, t;
  for (const auto &s : products) p.push_back(model.encode_text(s));
  for (const auto &s : step_targets) t.push_back(model.encode_text(s));
  return forward_route(model, p, t);
}

struct Candidate {
  std::string text;
  double logprob = 0;
  bool complete = true;
};

struct BeamResult {
  /// Ranked by total token log-probability, best first.
  std::vector<Candidate> candidates;
  /// Set when no hypothesis emitted END; candidates then holds the best
  /// partial sequence.
  bool incomplete = false;
};

namespace detail {

inline std::string set_key(const std::string &text) {
  try {
    auto parts = split_reactants(text);
    std::sort(parts.begin(), parts.end());
    parts.erase(std::unique(parts.begin(), parts.end()), parts.end());
    return join_reactants(parts);
  } catch (const Error &) {
    return "\x01" + text;
  }
}

struct Hypothesis {
  std::vector<int> ids;  // starts with START
  double score = 0;
};

inline bool better(const Hypothesis &a, const Hypothesis &b) {
  if (a.score != b.score) return a.score > b.score;
  return a.ids < b.ids;
}

inline bool generatable(int id) {
  return id != Vocab::kPad && id != Vocab::kStart && id != Vocab::kUnknown;
}

template <typename T>
std::vector<std::vector<double>> next_token_logprobs(
    MetroModel<T> &model, nn::Tape<T> &tape,
    const typename MetroModel<T>::Encoded &enc, int step,
    const std::vector<Hypothesis> &live) {
  std::vector<StepQuery> queries;
  for (const auto &h : live) queries.push_back({0, step, h.ids});
  const auto &logits = tape.value(model.decode(tape, enc, queries));
  std::vector<std::vector<double>> out;
  int row = -1;
  const int V = logits.cols();
  for (const auto &h : live) {
    row += static_cast<int>(h.ids.size());
    std::vector<double> lp(V);
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < V; ++c) mx = std::max(mx, static_cast<double>(logits(row, c)));
    double total = 0;
    for (int c = 0; c < V; ++c) total += std::exp(static_cast<double>(logits(row, c)) - mx);
    const double lse = mx + std::log(total);
    for (int c = 0; c < V; ++c) lp[c] = static_cast<double>(logits(row, c)) - lse;
    out.push_back(std::move(lp));
  }
  return out;
}

template <typename T>
std::string ids_to_text(const MetroModel<T> &model, const std::vector<int> &ids) {
  std::string s;
  for (int id : ids) {
    if (id == Vocab::kStart || id == Vocab::kEnd) continue;
    s += model.vocab().text(id);
  }
  return s;
}

template <typename T>
std::vector<std::vector<int>> encode_route(const MetroModel<T> &model,
                                           const std::vector<std::string> &route) {
  if (route.empty()) throw Error(ErrorCode::kInvalidArgument, "empty route prefix");
  std::vector<std::vector<int>> ids;
  for (const auto &s : route) ids.push_back(model.encode_text(s));
  return ids;
}

}  // namespace detail

/// Argmax decoding of the reactant set for route.back().
template <typename T>
Candidate greedy_decode(MetroModel<T> &model, const std::vector<std::string> &route) {
  nn::Tape<T> tape(false);
  auto enc = model.encode(tape, {detail::encode_route(model, route)});
  const int step = static_cast<int>(route.size()) - 1;
  detail::Hypothesis h{{Vocab::kStart}, 0.0};
  while (static_cast<int>(h.ids.size()) < model.config().max_len) {
    const auto lp = detail::next_token_logprobs(model, tape, enc, step, {h})[0];
    int best = -1;
    for (int c = 0; c < static_cast<int>(lp.size()); ++c) {
      if (!detail::generatable(c)) continue;
      if (best < 0 || lp[c] > lp[best]) best = c;
    }
    h.ids.push_back(best);
    h.score += lp[best];
    if (best == Vocab::kEnd) return {detail::ids_to_text(model, h.ids), h.score, true};
  }
  return {detail::ids_to_text(model, h.ids), h.score, false};
}

/// Beam search over the decoder for the last product of `route`.
/// Hypotheses finish on END; finished sequences that spell the same
/// reactant set are merged, keeping the better score.
template <typename T>
BeamResult beam_decode(MetroModel<T> &model, const std::vector<std::string> &route,
                       int width) {
  if (width < 1) throw Error(ErrorCode::kInvalidArgument, "beam width must be >= 1");
  nn::Tape<T> tape(false);
  auto enc = model.encode(tape, {detail::encode_route(model, route)});
  const int step = static_cast<int>(route.size()) - 1;
  std::vector<detail::Hypothesis> live{{{Vocab::kStart}, 0.0}};
  std::vector<detail::Hypothesis> finished;
  detail::Hypothesis best_partial = live.front();
  while (!live.empty() && static_cast<int>(live.front().ids.size()) < model.config().max_len) {
    const auto lps = detail::next_token_logprobs(model, tape, enc, step, live);
    std::vector<detail::Hypothesis> grown;
    for (std::size_t h = 0; h < live.size(); ++h) {
      std::vector<int> order;
      for (int c = 0; c < static_cast<int>(lps[h].size()); ++c) {
        if (detail::generatable(c)) order.push_back(c);
      }
      const int keep = std::min<int>(width, static_cast<int>(order.size()));
      std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&](int a, int b) {
        if (lps[h][a] != lps[h][b]) return lps[h][a] > lps[h][b];
        return a < b;
      });
      for (int i = 0; i < keep; ++i) {
        detail::Hypothesis next = live[h];
        next.ids.push_back(order[i]);
        next.score += lps[h][order[i]];
        grown.push_back(std::move(next));
      }
    }
    std::sort(grown.begin(), grown.end(), detail::better);
    if (grown.size() > static_cast<std::size_t>(width)) grown.resize(width);
    live.clear();
    for (auto &g : grown) {
      if (g.ids.back() == Vocab::kEnd) finished.push_back(std::move(g));
      else live.push_back(std::move(g));
    }
    if (!live.empty()) best_partial = live.front();  // deepest surviving hypothesis
    std::sort(finished.begin(), finished.end(), detail::better);
    if (finished.size() >= static_cast<std::size_t>(width) && !live.empty() &&
        live.front().score <= finished[width - 1].score) {
      break;  // scores only decrease as sequences grow
    }
  }
  BeamResult result;
  if (finished.empty()) {
    result.incomplete = true;
    result.candidates.push_back({detail::ids_to_text(model, best_partial.ids), best_partial.score, false});
    return result;
  }
  std::set<std::string> seen;
  for (const auto &f : finished) {
    const std::string text = detail::ids_to_text(model, f.ids);
    if (!seen.insert(detail::set_key(text)).second) continue;
    result.candidates.push_back({text, f.score, true});
    if (result.candidates.size() == static_cast<std::size_t>(width)) break;
  }
  return result;
}

}  // namespace metro

#endif  // METRO_INFERENCE_HPP
