// SPDX-License-Identifier: Apache-2.0
//
// Encoder / route memory / decoder sequence-to-sequence model.
//
// Every product on a route is encoded independently into a token matrix
// X_i. The memory stack mixes those matrices along the route: per layer,
// v_i = flatten(X_i) W_p, queries and keys come from the v_i, values are the
// token matrices themselves, and molecule i attends to molecules 1..i with
// one scalar weight per (i, j) pair and head. The decoder for step i
// cross-attends to the row concatenation of X_i and M_i.

#ifndef METRO_MODEL_HPP
#define METRO_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metro/chem_text.hpp"
#include "metro/config.hpp"
#include "metro/error.hpp"
#include "metro/tensor.hpp"

namespace metro {

struct ModelConfig {
  int max_len = 200;
  int d_model = 64;
  int encoder_layers = 3;
  int decoder_layers = 3;
  int memory_layers = 3;
  int heads = 10;
  /// Width of each attention head; heads * d_head is projected back to
  /// d_model, so d_model need not be divisible by heads.
  int d_head = 64;
  int ffn_hidden = 512;
  double dropout = 0.1;
  int epochs = 4000;
  int batch = 64;
  int warmup_steps = 16000;
  double lr_factor = 20.0;
  std::uint64_t seed = 0;
  double label_smoothing = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  /// Validation loss every this many epochs; 0 disables.
  int eval_every = 1;
  /// Checkpoint every this many epochs (final checkpoint always written).
  int checkpoint_every = 0;
  /// Skip route examples that are a step-prefix of another example of the
  /// same tree; their steps are already trained by the longer route.
  bool dedupe_prefix_routes = true;

  void validate() const {
    const bool ok = max_len > 2 && d_model > 0 && encoder_layers > 0 &&
                    decoder_layers > 0 && memory_layers >= 0 && heads > 0 &&
                    d_head > 0 && ffn_hidden > 0 && dropout >= 0 && dropout < 1 &&
                    epochs >= 0 && batch > 0 && warmup_steps > 0 && lr_factor > 0 &&
                    label_smoothing >= 0 && label_smoothing < 1;
    if (!ok) throw Error(ErrorCode::kInvalidArgument, "invalid model configuration");
  }

  /// Applies "key = value" overrides; unknown keys are rejected.
  void apply(const std::map<std::string, std::string> &kv) {
    for (const auto &[k, v] : kv) {
      if (k == "max_len") max_len = parse_number<int>(k, v);
      else if (k == "d_model") d_model = parse_number<int>(k, v);
      else if (k == "encoder_layers") encoder_layers = parse_number<int>(k, v);
      else if (k == "decoder_layers") decoder_layers = parse_number<int>(k, v);
      else if (k == "memory_layers") memory_layers = parse_number<int>(k, v);
      else if (k == "heads") heads = parse_number<int>(k, v);
      else if (k == "d_head") d_head = parse_number<int>(k, v);
      else if (k == "ffn_hidden") ffn_hidden = parse_number<int>(k, v);
      else if (k == "dropout") dropout = parse_number<double>(k, v);
      else if (k == "epochs") epochs = parse_number<int>(k, v);
      else if (k == "batch") batch = parse_number<int>(k, v);
      else if (k == "warmup_steps") warmup_steps = parse_number<int>(k, v);
      else if (k == "lr_factor") lr_factor = parse_number<double>(k, v);
      else if (k == "seed") seed = parse_number<std::uint64_t>(k, v);
      else if (k == "label_smoothing") label_smoothing = parse_number<double>(k, v);
      else if (k == "adam_beta1") adam_beta1 = parse_number<double>(k, v);
      else if (k == "adam_beta2") adam_beta2 = parse_number<double>(k, v);
      else if (k == "adam_eps") adam_eps = parse_number<double>(k, v);
      else if (k == "clip_norm") clip_norm = parse_number<double>(k, v);
      else if (k == "eval_every") eval_every = parse_number<int>(k, v);
      else if (k == "checkpoint_every") checkpoint_every = parse_number<int>(k, v);
      else if (k == "dedupe_prefix_routes") dedupe_prefix_routes = parse_bool(k, v);
      else throw Error(ErrorCode::kInvalidArgument, "unknown config key '" + k + "'");
    }
  }

  nlohmann::json to_json() const {
    return {{"max_len", max_len},           {"d_model", d_model},
            {"encoder_layers", encoder_layers}, {"decoder_layers", decoder_layers},
            {"memory_layers", memory_layers}, {"heads", heads},
            {"d_head", d_head},             {"ffn_hidden", ffn_hidden},
            {"dropout", dropout},           {"epochs", epochs},
            {"batch", batch},               {"warmup_steps", warmup_steps},
            {"lr_factor", lr_factor},       {"seed", seed},
            {"label_smoothing", label_smoothing}, {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},     {"adam_eps", adam_eps},
            {"clip_norm", clip_norm},       {"eval_every", eval_every},
            {"checkpoint_every", checkpoint_every},
            {"dedupe_prefix_routes", dedupe_prefix_routes}};
  }

  static ModelConfig from_json(const nlohmann::json &j) {
    ModelConfig c;
    std::map<std::string, std::string> kv;
    for (auto it = j.begin(); it != j.end(); ++it) {
      kv[it.key()] = it.value().is_string() ? it.value().get<std::string>()
                                            : it.value().dump();
    }
    c.apply(kv);
    return c;
  }
};

/// One decoder stream: step `step` of route `route`, fed `input` (START
/// followed by the target tokens, END excluded).
struct StepQuery {
  int route = 0;
  int step = 0;
  std::vector<int> input;
};

template <typename T>
class MetroModel {
 public:
  using Tape = nn::Tape<T>;
  using Var = nn::Var;
  using Tensor = nn::Tensor<T>;
  using Matrix = typename Tensor::Matrix;

  /// Token ids of each product of each route (with START/END).
  using RouteBatch = std::vector<std::vector<std::vector<int>>>;

  struct Encoded {
    Var x;                       // encoder output, one row per product token
    std::optional<Var> memory;   // memory output aligned with x
    std::vector<std::vector<nn::RouteMolecule>> routes;
  };

  MetroModel(ModelConfig config, Vocab vocab)
      : config_(std::move(config)), vocab_(std::move(vocab)) {
    config_.validate();
    build_parameters();
    init_parameters(config_.seed);
    build_positions();
  }

  const ModelConfig &config() const { return config_; }
  const Vocab &vocab() const { return vocab_; }
  nn::ParameterSet<T> &params() { return params_; }
  const nn::ParameterSet<T> &params() const { return params_; }
  bool has_memory() const { return config_.memory_layers > 0; }

  void init_parameters(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto &p = params_[i];
      const std::string &n = p.name;
      if (ends_with(n, ".g")) {
        std::fill(p.value.data.begin(), p.value.data.end(), T(1));
      } else if (ends_with(n, ".b")) {
        std::fill(p.value.data.begin(), p.value.data.end(), T(0));
      } else if (ends_with(n, "embed")) {
        nn::normal_init(p.value, 1.0 / std::sqrt(static_cast<double>(config_.d_model)), rng);
      } else {
        nn::xavier_uniform(p.value, rng);
      }
    }
  }

  /// START + tokens + END, rejecting sequences longer than max_len.
  std::vector<int> encode_text(const std::string &smiles) const {
    auto ids = vocab_.encode_sequence(smiles);
    if (static_cast<int>(ids.size()) > config_.max_len) {
      throw Error(ErrorCode::kSequenceTooLong,
                  std::to_string(ids.size()) + " tokens > max_len " +
                      std::to_string(config_.max_len) + " for '" + smiles + "'");
    }
    return ids;
  }

  // ------------------------------------------------------------- encoder

  Encoded encode(Tape &tape, const RouteBatch &batch,
                 std::vector<Matrix> *memory_weights = nullptr) {
    Encoded enc;
    std::vector<int> ids;
    std::vector<int> positions;
    std::vector<nn::AttentionSegment> segments;
    int row = 0;
    int mol = 0;
    for (const auto &route : batch) {
      if (route.empty()) throw Error(ErrorCode::kInvalidArgument, "empty route");
      std::vector<nn::RouteMolecule> layout;
      for (const auto &product : route) {
        const int len = static_cast<int>(product.size());
        if (len == 0 || len > config_.max_len) {
          throw Error(ErrorCode::kSequenceTooLong,
                      std::to_string(len) + " tokens > max_len " + std::to_string(config_.max_len));
        }
        for (int p = 0; p < len; ++p) {
          ids.push_back(product[p]);
          positions.push_back(p);
        }
        segments.push_back({row, len, row, len, false});
        layout.push_back({mol++, row, len});
        row += len;
      }
      enc.routes.push_back(std::move(layout));
    }
    Var x = embed(tape, "enc.embed", ids, positions);
    for (int l = 0; l < config_.encoder_layers; ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      Var h = layer_norm(tape, x, p + "ln1");
      x = tape.add(x, tape.dropout(self_attention(tape, h, p + "attn.", segments)));
      x = tape.add(x, tape.dropout(feed_forward(tape, layer_norm(tape, x, p + "ln2"), p + "ffn.")));
    }
    enc.x = layer_norm(tape, x, "enc.ln_f");
    if (has_memory()) enc.memory = memory_stack(tape, enc.x, enc.routes, memory_weights);
    return enc;
  }

  // -------------------------------------------------------------- memory

  Var memory_stack(Tape &tape, Var x, const std::vector<std::vector<nn::RouteMolecule>> &routes,
                   std::vector<Matrix> *weights) {
    std::vector<nn::RouteMolecule> molecules;
    for (const auto &r : routes) molecules.insert(molecules.end(), r.begin(), r.end());
    for (int l = 0; l < config_.memory_layers; ++l) {
      const std::string p = "mem." + std::to_string(l) + ".";
      Var h = layer_norm(tape, x, p + "ln1");
      Var v = tape.flatten_project(h, param(tape, p + "wp"), molecules);
      Var q = tape.matmul(v, param(tape, p + "wq"));
      Var k = tape.matmul(v, param(tape, p + "wk"));
      Var val = tape.matmul(h, param(tape, p + "wv"));
      Var a = tape.route_attention(q, k, val, config_.heads, routes, weights);
      x = tape.add(x, tape.dropout(tape.matmul(a, param(tape, p + "wo"))));
      x = tape.add(x, tape.dropout(feed_forward(tape, layer_norm(tape, x, p + "ln2"), p + "ffn.")));
    }
    return layer_norm(tape, x, "mem.ln_f");
  }

  // ------------------------------------------------------------- decoder

  /// Logits (total query tokens x |V|) for every query, in query order.
  Var decode(Tape &tape, const Encoded &enc, const std::vector<StepQuery> &queries) {
    // Cross-attention bank: X_i rows then M_i rows, one block per distinct
    // (route, step).
    std::map<std::pair<int, int>, std::pair<int, int>> bank_of;
    std::vector<std::pair<int, int>> picks;
    for (const auto &q : queries) {
      const auto key = std::make_pair(q.route, q.step);
      if (bank_of.count(key)) continue;
      const auto &m = enc.routes.at(q.route).at(q.step);
      const int begin = static_cast<int>(picks.size());
      for (int r = 0; r < m.len; ++r) picks.emplace_back(0, m.begin + r);
      if (enc.memory) {
        for (int r = 0; r < m.len; ++r) picks.emplace_back(1, m.begin + r);
      }
      bank_of[key] = {begin, static_cast<int>(picks.size()) - begin};
    }
    std::vector<Var> sources{enc.x};
    if (enc.memory) sources.push_back(*enc.memory);
    Var bank = tape.gather_rows(sources, std::move(picks));

    std::vector<int> ids;
    std::vector<int> positions;
    std::vector<nn::AttentionSegment> self_segments;
    std::vector<nn::AttentionSegment> cross_segments;
    int row = 0;
    for (const auto &q : queries) {
      const int len = static_cast<int>(q.input.size());
      if (len == 0 || len > config_.max_len) {
        throw Error(ErrorCode::kSequenceTooLong, "decoder input of " + std::to_string(len) + " tokens");
      }
      for (int p = 0; p < len; ++p) {
        ids.push_back(q.input[p]);
        positions.push_back(p);
      }
      const auto [kb, kl] = bank_of.at({q.route, q.step});
      self_segments.push_back({row, len, row, len, true});
      cross_segments.push_back({row, len, kb, kl, false});
      row += len;
    }
    Var y = embed(tape, "dec.embed", ids, positions);
    for (int l = 0; l < config_.decoder_layers; ++l) {
      const std::string p = "dec." + std::to_string(l) + ".";
      Var h = layer_norm(tape, y, p + "ln1");
      y = tape.add(y, tape.dropout(self_attention(tape, h, p + "self.", self_segments)));
      h = layer_norm(tape, y, p + "ln2");
      Var q = tape.matmul(h, param(tape, p + "cross.wq"));
      Var k = tape.matmul(bank, param(tape, p + "cross.wk"));
      Var v = tape.matmul(bank, param(tape, p + "cross.wv"));
      Var a = tape.segment_attention(q, k, v, config_.heads, cross_segments);
      y = tape.add(y, tape.dropout(tape.matmul(a, param(tape, p + "cross.wo"))));
      y = tape.add(y, tape.dropout(feed_forward(tape, layer_norm(tape, y, p + "ln3"), p + "ffn.")));
    }
    y = layer_norm(tape, y, "dec.ln_f");
    return tape.add_row(tape.matmul(y, param(tape, "out.w")), param(tape, "out.b"));
  }

  /// Teacher-forced loss of a batch of routes: every step of every route
  /// is decoded in one pass. targets[r][i] is the START/END-wrapped reactant
  /// set of step i of route r; the decoder reads it without END and is
  /// scored against it without START.
  Var loss(Tape &tape, const RouteBatch &products, const RouteBatch &targets) {
    if (products.size() != targets.size()) {
      throw Error(ErrorCode::kShapeMismatch, "products/targets route count");
    }
    Encoded enc = encode(tape, products);
    std::vector<StepQuery> queries;
    std::vector<int> labels;
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r].size() != products[r].size()) {
        throw Error(ErrorCode::kShapeMismatch, "route steps vs targets");
      }
      for (std::size_t i = 0; i < targets[r].size(); ++i) {
        const auto &t = targets[r][i];
        if (t.size() < 2) throw Error(ErrorCode::kShapeMismatch, "target without START/END");
        queries.push_back({static_cast<int>(r), static_cast<int>(i), {t.begin(), t.end() - 1}});
        labels.insert(labels.end(), t.begin() + 1, t.end());
      }
    }
    Var logits = decode(tape, enc, queries);
    return tape.cross_entropy(logits, std::move(labels), Vocab::kPad,
                              static_cast<T>(config_.label_smoothing));
  }

  // ------------------------------------------------------------ helpers

  Var param(Tape &tape, const std::string &name) {
    auto *p = params_.find(name);
    if (!p) throw Error(ErrorCode::kInvalidArgument, "no parameter " + name);
    return tape.param(*p);
  }

 private:
  static bool ends_with(const std::string &s, const std::string &suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

  void add_layer_norm(const std::string &p) {
    params_.add(p + ".g", {config_.d_model});
    params_.add(p + ".b", {config_.d_model});
  }

  void add_attention(const std::string &p) {
    const int d = config_.d_model, w = config_.heads * config_.d_head;
    params_.add(p + "wq", {d, w});
    params_.add(p + "wk", {d, w});
    params_.add(p + "wv", {d, w});
    params_.add(p + "wo", {w, d});
  }

  void add_ffn(const std::string &p) {
    params_.add(p + "w1", {config_.d_model, config_.ffn_hidden});
    params_.add(p + "w1.b", {config_.ffn_hidden});
    params_.add(p + "w2", {config_.ffn_hidden, config_.d_model});
    params_.add(p + "w2.b", {config_.d_model});
  }

  void build_parameters() {
    const int d = config_.d_model, V = vocab_.size();
    params_.add("enc.embed", {V, d});
    for (int l = 0; l < config_.encoder_layers; ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      add_layer_norm(p + "ln1");
      add_attention(p + "attn.");
      add_layer_norm(p + "ln2");
      add_ffn(p + "ffn.");
    }
    add_layer_norm("enc.ln_f");
    for (int l = 0; l < config_.memory_layers; ++l) {
      const std::string p = "mem." + std::to_string(l) + ".";
      add_layer_norm(p + "ln1");
      params_.add(p + "wp", {config_.max_len * d, d});
      add_attention(p);
      add_layer_norm(p + "ln2");
      add_ffn(p + "ffn.");
    }
    if (config_.memory_layers > 0) add_layer_norm("mem.ln_f");
    params_.add("dec.embed", {V, d});
    for (int l = 0; l < config_.decoder_layers; ++l) {
      const std::string p = "dec." + std::to_string(l) + ".";
      add_layer_norm(p + "ln1");
      add_attention(p + "self.");
      add_layer_norm(p + "ln2");
      add_attention(p + "cross.");
      add_layer_norm(p + "ln3");
      add_ffn(p + "ffn.");
    }
    add_layer_norm("dec.ln_f");
    params_.add("out.w", {d, V});
    params_.add("out.b", {V});
  }

  void build_positions() {
    const int L = config_.max_len, d = config_.d_model;
    positions_ = Tensor({L, d});
    for (int pos = 0; pos < L; ++pos)
      for (int i = 0; i < d; ++i) {
        const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
        positions_(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate));
      }
  }

  Var embed(Tape &tape, const std::string &table, const std::vector<int> &ids,
            const std::vector<int> &positions) {
    Var e = tape.scale(tape.embedding(param(tape, table), ids),
                       static_cast<T>(std::sqrt(static_cast<double>(config_.d_model))));
    Tensor pe({static_cast<int>(ids.size()), config_.d_model});
    for (std::size_t i = 0; i < positions.size(); ++i) {
      std::copy_n(&positions_.data[static_cast<std::size_t>(positions[i]) * config_.d_model],
                  config_.d_model, &pe.data[i * config_.d_model]);
    }
    return tape.dropout(tape.add(e, tape.constant(std::move(pe))));
  }

  Var layer_norm(Tape &tape, Var x, const std::string &p) {
    return tape.layer_norm(x, param(tape, p + ".g"), param(tape, p + ".b"));
  }

  Var self_attention(Tape &tape, Var h, const std::string &p,
                     const std::vector<nn::AttentionSegment> &segments) {
    Var q = tape.matmul(h, param(tape, p + "wq"));
    Var k = tape.matmul(h, param(tape, p + "wk"));
    Var v = tape.matmul(h, param(tape, p + "wv"));
    Var a = tape.segment_attention(q, k, v, config_.heads, segments);
    return tape.matmul(a, param(tape, p + "wo"));
  }

  Var feed_forward(Tape &tape, Var h, const std::string &p) {
    Var u = tape.relu(tape.add_row(tape.matmul(h, param(tape, p + "w1")), param(tape, p + "w1.b")));
    return tape.add_row(tape.matmul(u, param(tape, p + "w2")), param(tape, p + "w2.b"));
  }

  ModelConfig config_;
  Vocab vocab_;
  nn::ParameterSet<T> params_;
  Tensor positions_;
};

/// Checkpoint with config and vocabulary so a model can be rebuilt.
template <typename T>
void save_model(const std::filesystem::path &dir, const MetroModel<T> &model,
                std::int64_t step) {
  nlohmann::json extra = {{"config", model.config().to_json()},
                          {"vocab", model.vocab().tokens()}};
  nn::save_checkpoint(dir, model.params(), model.config().seed, step, extra);
}

template <typename T>
MetroModel<T> load_model(const std::filesystem::path &dir) {
  const auto manifest = nn::read_manifest(dir);
  try {
    MetroModel<T> model(ModelConfig::from_json(manifest.at("config")),
                        Vocab(manifest.at("vocab").get<std::vector<std::string>>()));
    nn::load_checkpoint(dir, model.params());
    return model;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::kSchemaMismatch, e.what());
  }
}

}  // namespace metro

#endif  // METRO_MODEL_HPP
