// SPDX-License-Identifier: Apache-2.0
//
// Teacher-forced training: tokenization of route examples, the warmup /
// inverse-square-root learning-rate schedule, Adam, and the epoch loop with
// validation, CSV logging and checkpoints.

#ifndef METRO_TRAIN_HPP
#define METRO_TRAIN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metro/dataset.hpp"
#include "metro/error.hpp"
#include "metro/inference.hpp"
#include "metro/model.hpp"

namespace metro {

/// lr_factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
inline double noam_lr(const ModelConfig &c, std::int64_t step) {
  if (step < 1) step = 1;
  const double s = static_cast<double>(step);
  return c.lr_factor / std::sqrt(static_cast<double>(c.d_model)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(static_cast<double>(c.warmup_steps), -1.5));
}

struct TokenizedRoute {
  std::vector<std::vector<int>> products;
  std::vector<std::vector<int>> targets;
};

struct TokenizedSet {
  std::vector<TokenizedRoute> routes;
  std::size_t dropped_too_long = 0;
  std::size_t dropped_prefix = 0;
};

namespace detail {

inline bool is_step_prefix(const RouteExample &a, const RouteExample &b) {
  if (a.products.size() > b.products.size()) return false;
  return std::equal(a.products.begin(), a.products.end(), b.products.begin()) &&
         std::equal(a.step_targets.begin(), a.step_targets.end(), b.step_targets.begin());
}

}  // namespace detail

/// Tokenizes examples; any example with a sequence over max_len is dropped
/// and counted. With `dedupe_prefix`, an example whose steps are a prefix of
/// another example of the same tree is dropped as well.
inline TokenizedSet tokenize_examples(const std::vector<RouteExample> &examples,
                                      const Vocab &vocab, int max_len, bool dedupe_prefix) {
  TokenizedSet out;
  std::vector<const RouteExample *> kept;
  if (dedupe_prefix) {
    std::map<std::string, std::vector<const RouteExample *>> by_tree;
    for (const auto &ex : examples) by_tree[ex.tree_id].push_back(&ex);
    std::set<const RouteExample *> keep;
    for (auto &[id, group] : by_tree) {
      std::stable_sort(group.begin(), group.end(), [](const auto *a, const auto *b) {
        return a->products.size() > b->products.size();
      });
      std::vector<const RouteExample *> chosen;
      for (const auto *ex : group) {
        const bool covered = std::any_of(chosen.begin(), chosen.end(), [&](const auto *c) {
          return detail::is_step_prefix(*ex, *c);
        });
        if (covered) ++out.dropped_prefix;
        else chosen.push_back(ex);
      }
      keep.insert(chosen.begin(), chosen.end());
    }
    for (const auto &ex : examples) {
      if (keep.count(&ex)) kept.push_back(&ex);
    }
  } else {
    for (const auto &ex : examples) kept.push_back(&ex);
  }
  for (const auto *ex : kept) {
    if (ex->products.size() != ex->step_targets.size() || ex->products.empty()) {
      throw Error(ErrorCode::kSchemaMismatch, "route example " + ex->tree_id + " is malformed");
    }
    TokenizedRoute r;
    bool fits = true;
    for (std::size_t i = 0; i < ex->products.size() && fits; ++i) {
      r.products.push_back(vocab.encode_sequence(ex->products[i]));
      r.targets.push_back(vocab.encode_sequence(ex->step_targets[i]));
      fits = static_cast<int>(r.products.back().size()) <= max_len &&
             static_cast<int>(r.targets.back().size()) <= max_len;
    }
    if (fits) out.routes.push_back(std::move(r));
    else ++out.dropped_too_long;
  }
  return out;
}

/// Adam with bias correction.
template <typename T>
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(nn::ParameterSet<T> &params, double lr) {
    if (m_.empty()) {
      for (std::size_t p = 0; p < params.size(); ++p) {
        m_.emplace_back(params[p].value.size(), 0.0);
        v_.emplace_back(params[p].value.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto &par = params[p];
      auto &m = m_[p];
      auto &v = v_[p];
      for (std::size_t i = 0; i < par.value.size(); ++i) {
        const double g = static_cast<double>(par.grad.data[i]);
        m[i] = b1_ * m[i] + (1 - b1_) * g;
        v[i] = b2_ * v[i] + (1 - b2_) * g * g;
        const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        par.value.data[i] = static_cast<T>(static_cast<double>(par.value.data[i]) - update);
      }
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

template <typename T>
double grad_norm(const nn::ParameterSet<T> &params) {
  double s = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (T g : params[p].grad.data) s += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(s);
}

struct TrainLogRow {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainOptions {
  /// Checkpoints go here (final one at the root, periodic ones under
  /// checkpoints/); empty disables writing.
  std::filesystem::path out_dir;
  /// Called after every logged epoch.
  std::function<void(const TrainLogRow &)> on_epoch;
};

struct TrainResult {
  std::int64_t steps = 0;
  std::vector<TrainLogRow> log;
};

namespace detail {

template <typename T>
double batch_loss(MetroModel<T> &model, const std::vector<const TokenizedRoute *> &batch,
                  nn::Tape<T> &tape, nn::Var *out_var = nullptr) {
  typename MetroModel<T>::RouteBatch products, targets;
  for (const auto *r : batch) {
    products.push_back(r->products);
    targets.push_back(r->targets);
  }
  nn::Var loss = model.loss(tape, products, targets);
  if (out_var) *out_var = loss;
  return static_cast<double>(tape.value(loss).data.at(0));
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

}  // namespace detail

/// Mean per-token loss over a set, dropout off.
template <typename T>
double evaluate_loss(MetroModel<T> &model, const TokenizedSet &data, int batch_size) {
  if (data.routes.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  std::size_t batches = 0;
  for (std::size_t b = 0; b < data.routes.size(); b += batch_size) {
    std::vector<const TokenizedRoute *> batch;
    for (std::size_t i = b; i < std::min(data.routes.size(), b + batch_size); ++i) {
      batch.push_back(&data.routes[i]);
    }
    nn::Tape<T> tape(false);
    total += detail::batch_loss(model, batch, tape);
    ++batches;
  }
  return total / static_cast<double>(batches);
}

/// Runs config.epochs epochs of shuffled mini-batches. Deterministic given
/// the model seed.
template <typename T>
TrainResult train(MetroModel<T> &model, const TokenizedSet &train_set,
                  const TokenizedSet *val_set, const TrainOptions &options = {}) {
  const ModelConfig &c = model.config();
  if (train_set.routes.empty()) throw Error(ErrorCode::kEmptyInput, "no training routes");
  std::mt19937_64 order_rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  nn::DropoutState<T> dropout;
  dropout.rate = c.dropout;
  dropout.rng.seed(c.seed + 1);
  Adam<T> adam(c.adam_beta1, c.adam_beta2, c.adam_eps);
  auto &params = model.params();
  TrainResult result;

  std::vector<std::size_t> order(train_set.routes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    detail::seeded_shuffle(order, order_rng);
    double epoch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += c.batch) {
      std::vector<const TokenizedRoute *> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + c.batch); ++i) {
        batch.push_back(&train_set.routes[order[i]]);
      }
      params.zero_grad();
      nn::Tape<T> tape(true);
      tape.set_dropout(&dropout);
      nn::Var loss;
      const double value = detail::batch_loss(model, batch, tape, &loss);
      if (!std::isfinite(value)) {
        throw Error(ErrorCode::kNonFiniteLoss,
                    "non-finite loss in batch " + std::to_string(epoch) + ":" +
                        std::to_string(b / c.batch));
      }
      tape.backward(loss);
      if (c.clip_norm > 0) {
        const double norm = grad_norm(params);
        if (norm > c.clip_norm) {
          const T s = static_cast<T>(c.clip_norm / norm);
          for (std::size_t p = 0; p < params.size(); ++p) {
            for (T &g : params[p].grad.data) g *= s;
          }
        }
      }
      adam.step(params, noam_lr(c, adam.steps() + 1));
      epoch_loss += value;
      ++batches;
    }
    result.steps = adam.steps();
    const bool last = epoch == c.epochs;
    if ((c.eval_every > 0 && epoch % c.eval_every == 0) || last) {
      TrainLogRow row{adam.steps(), epoch, noam_lr(c, adam.steps()),
                      epoch_loss / static_cast<double>(batches)};
      if (val_set && !val_set->routes.empty()) row.val_loss = evaluate_loss(model, *val_set, c.batch);
      result.log.push_back(row);
      if (options.on_epoch) options.on_epoch(row);
    }
    if (!options.out_dir.empty() && c.checkpoint_every > 0 && epoch % c.checkpoint_every == 0 && !last) {
      std::ostringstream name;
      name << "step-" << std::setw(8) << std::setfill('0') << adam.steps();
      save_model(options.out_dir / "checkpoints" / name.str(), model, adam.steps());
    }
  }
  if (!options.out_dir.empty()) save_model(options.out_dir, model, result.steps);
  return result;
}

inline void write_train_log(const std::filesystem::path &path, const std::vector<TrainLogRow> &log) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << "step,lr,train_loss,val_loss\n";
  for (const auto &r : log) {
    out << r.step << ',' << detail::format_double(r.lr) << ','
        << detail::format_double(r.train_loss) << ',' << detail::format_double(r.val_loss) << '\n';
  }
}

struct StepAccuracy {
  std::size_t steps = 0;
  std::size_t correct = 0;
  double rate() const { return steps ? static_cast<double>(correct) / steps : 0.0; }
};

/// Top-1 single-step accuracy over the distinct (route prefix, reactant
/// set) pairs of a set of examples; a hit is an exact set match.
template <typename T>
StepAccuracy single_step_accuracy(MetroModel<T> &model, const std::vector<RouteExample> &examples,
                                  int beam_width = 1) {
  std::set<std::pair<std::vector<std::string>, std::string>> steps;
  for (const auto &ex : examples) {
    for (std::size_t i = 0; i < ex.products.size(); ++i) {
      steps.insert({{ex.products.begin(), ex.products.begin() + i + 1}, ex.step_targets[i]});
    }
  }
  StepAccuracy acc;
  for (const auto &[prefix, truth] : steps) {
    ++acc.steps;
    const auto result = beam_decode(model, prefix, beam_width);
    if (!result.incomplete && !result.candidates.empty() &&
        detail::set_key(result.candidates.front().text) == detail::set_key(truth)) {
      ++acc.correct;
    }
  }
  return acc;
}

}  // namespace metro

#endif  // METRO_TRAIN_HPP
