// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "metro/inference.hpp"
#include "metro/train.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using metro::MetroModel;
using metro::Vocab;

namespace {

using Model = MetroModel<double>;

Model tiny_model(int memory_layers = 1, std::uint64_t seed = 1) {
  Model m(fixture::tiny_config(memory_layers), fixture::tiny_vocab());
  fixture::scramble(m, seed);
  return m;
}

void expect_close(const metro::nn::Tensor<double> &a, const metro::nn::Tensor<double> &b, double tol) {
  ASSERT_EQ(a.shape, b.shape);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], tol) << i;
}

}  // namespace

TEST(Model, Shapes) {
  auto m = tiny_model();
  const auto f = metro::forward_route(m, {"CNO", "C", "OS"}, {"CN.O", "c", "n.SS"});
  ASSERT_EQ(f.encoded.size(), 3u);
  ASSERT_EQ(f.memory.size(), 3u);
  EXPECT_EQ(f.encoded[0].shape, (std::vector<int>{5, 8}));
  EXPECT_EQ(f.memory[1].shape, (std::vector<int>{3, 8}));
  EXPECT_EQ(f.logits[2].shape, (std::vector<int>{5, m.vocab().size()}));
  EXPECT_EQ(f.attention.size(), 2u);  // 1 layer x 2 heads
  EXPECT_EQ(f.attention[0].rows(), 3);
}

TEST(Model, SequenceTooLong) {
  auto m = tiny_model();
  try {
    metro::forward_route(m, std::vector<std::string>{"CNOSC"});
    FAIL();
  } catch (const metro::Error &e) {
    EXPECT_EQ(e.code(), metro::ErrorCode::kSequenceTooLong);
  }
}

TEST(Model, SingleMoleculeAttendsToItself) {
  auto m = tiny_model();
  const auto f = metro::forward_route(m, std::vector<std::string>{"CCN"});
  for (const auto &a : f.attention) {
    ASSERT_EQ(a.rows(), 1);
    EXPECT_EQ(a(0, 0), 1.0);
  }
}

TEST(Model, IdenticalMoleculesShareAttention) {
  auto m = tiny_model();
  const auto f = metro::forward_route(m, std::vector<std::string>{"CNO", "CNO"});
  for (const auto &a : f.attention) {
    EXPECT_NEAR(a(1, 0), 0.5, 1e-12);
    EXPECT_NEAR(a(1, 1), 0.5, 1e-12);
  }
  expect_close(f.encoded[0], f.encoded[1], 1e-12);
}

TEST(Model, AttentionIsCausalAndRowStochastic) {
  auto m = tiny_model();
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = metro::forward_route(m, fixture::random_route(rng, 4, 4));
    for (const auto &a : f.attention) {
      for (int i = 0; i < a.rows(); ++i) {
        double sum = 0;
        for (int j = 0; j < a.cols(); ++j) {
          if (j > i) {
            EXPECT_EQ(a(i, j), 0.0);
          }
          EXPECT_GE(a(i, j), 0.0);
          sum += a(i, j);
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
    }
  }
}

TEST(Model, LaterProductsDoNotChangeEarlierMemory) {
  auto m = tiny_model();
  const auto a = metro::forward_route(m, {"CNO", "OS", "CCCC"}, {"C.N", "O", "S"});
  const auto b = metro::forward_route(m, {"CNO", "OS", "NSNS"}, {"C.N", "O", "c"});
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(a.memory[i].data, b.memory[i].data);
    EXPECT_EQ(a.logits[i].data, b.logits[i].data);
  }
  EXPECT_NE(a.memory[2].data, b.memory[2].data);
}

TEST(Model, BatchCompositionDoesNotMatter) {
  auto m = tiny_model();
  metro::nn::Tape<double> alone(false), batched(false);
  const std::vector<std::vector<int>> route{m.encode_text("CN"), m.encode_text("OSC")};
  const std::vector<std::vector<int>> other{m.encode_text("CCCC")};
  auto e1 = m.encode(alone, {route});
  auto e2 = m.encode(batched, {other, route, route});
  const auto &x1 = alone.value(*e1.memory);
  const auto &x2 = batched.value(*e2.memory);
  const int offset = 6;  // rows of `other`
  for (int r = 0; r < x1.rows(); ++r)
    for (int c = 0; c < x1.cols(); ++c) EXPECT_NEAR(x1(r, c), x2(offset + r, c), 1e-12);
}

TEST(Model, NoMemoryAblationIgnoresRoute) {
  auto m = tiny_model(0);
  const auto full = metro::forward_route(m, {"CNO", "OS", "CC"}, {"C.N", "O", "S.c"});
  const auto last = metro::forward_route(m, {"CC"}, {"S.c"});
  EXPECT_TRUE(full.memory.empty());
  EXPECT_TRUE(full.attention.empty());
  expect_close(full.logits[2], last.logits[0], 1e-12);
}

TEST(Model, TeacherForcingShift) {
  // Target "^B.C$" is fed as "^B.C" and scored against "B.C$".
  auto m = tiny_model();
  const auto target = m.encode_text("c.n");
  const auto f = metro::forward_route(m, {m.encode_text("CN")}, {target});
  ASSERT_EQ(f.logits[0].rows(), static_cast<int>(target.size()) - 1);
  double expected = 0;
  for (int r = 0; r < f.logits[0].rows(); ++r) {
    double mx = -1e300;
    for (int c = 0; c < f.logits[0].cols(); ++c) mx = std::max(mx, f.logits[0](r, c));
    double z = 0;
    for (int c = 0; c < f.logits[0].cols(); ++c) z += std::exp(f.logits[0](r, c) - mx);
    expected += -(f.logits[0](r, target[r + 1]) - mx - std::log(z));
  }
  expected /= f.logits[0].rows();
  metro::nn::Tape<double> tape(false);
  const double loss = tape.value(m.loss(tape, {{m.encode_text("CN")}}, {{target}})).data[0];
  EXPECT_NEAR(loss, expected, 1e-12);
}

TEST(Model, PadTargetsAreIgnored) {
  auto m = tiny_model();
  auto target = m.encode_text("CN");
  auto padded = target;
  padded.push_back(Vocab::kPad);
  padded.push_back(Vocab::kPad);
  metro::nn::Tape<double> t1(false), t2(false);
  const double a = t1.value(m.loss(t1, {{m.encode_text("O")}}, {{target}})).data[0];
  const double b = t2.value(m.loss(t2, {{m.encode_text("O")}}, {{padded}})).data[0];
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(Model, GradientCheck) {
  auto m = tiny_model(1, 7);
  const typename Model::RouteBatch products{{m.encode_text("CNO"), m.encode_text("OS")}};
  const typename Model::RouteBatch targets{{m.encode_text("C.N"), m.encode_text("S.c")}};
  auto build = [&](metro::nn::Tape<double> &tape) { return m.loss(tape, products, targets); };
  const auto report = metro::nn::grad_check<double>(build, m.params());
  EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Model, CheckpointRoundTrip) {
  MetroModel<float> m(fixture::tiny_config(), fixture::tiny_vocab());
  const auto dir = std::filesystem::temp_directory_path() / "metro_model_ckpt";
  std::filesystem::remove_all(dir);
  metro::save_model(dir, m, 12);
  auto back = metro::load_model<float>(dir);
  EXPECT_EQ(back.config().to_json(), m.config().to_json());
  EXPECT_EQ(back.vocab().tokens(), m.vocab().tokens());
  const std::vector<std::string> route{"CN", "O"}, steps{"C", "N"};
  const auto a = metro::forward_route(m, route, steps);
  const auto b = metro::forward_route(back, route, steps);
  EXPECT_EQ(a.logits[1].data, b.logits[1].data);
  std::filesystem::remove_all(dir);
}

TEST(Config, ApplyAndJson) {
  metro::ModelConfig c;
  c.apply({{"d_model", "32"}, {"dropout", "0.25"}, {"dedupe_prefix_routes", "false"}});
  EXPECT_EQ(c.d_model, 32);
  EXPECT_EQ(c.dropout, 0.25);
  EXPECT_FALSE(c.dedupe_prefix_routes);
  EXPECT_EQ(metro::ModelConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(c.apply({{"d_modle", "3"}}), metro::Error);
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), metro::Error);
}

TEST(Schedule, NoamValues) {
  metro::ModelConfig c;
  c.lr_factor = 20;
  c.d_model = 64;
  c.warmup_steps = 16000;
  const double expected = 20.0 / 8.0 * std::pow(16000.0, -1.5);
  EXPECT_NEAR(metro::noam_lr(c, 1), expected, 1e-18);
  EXPECT_NEAR(metro::noam_lr(c, 1), 1.235e-6, 0.001e-6);
  double best = 0;
  std::int64_t arg = 0;
  for (std::int64_t s = 1; s <= 40000; ++s) {
    if (metro::noam_lr(c, s) > best) {
      best = metro::noam_lr(c, s);
      arg = s;
    }
  }
  EXPECT_EQ(arg, 16000);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  metro::nn::ParameterSet<double> ps;
  auto &p = ps.add("p", {1, 3});
  p.value.data = {1.0, -2.0, 0.5};
  p.grad.data = {0.3, -4.0, 1e-3};
  metro::Adam<double> adam(0.9, 0.98, 1e-12);
  adam.step(ps, 0.01);
  EXPECT_NEAR(p.value.data[0], 0.99, 1e-9);
  EXPECT_NEAR(p.value.data[1], -1.99, 1e-9);
  EXPECT_NEAR(p.value.data[2], 0.49, 1e-8);
}

TEST(Beam, WidthOneIsGreedy) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = tiny_model(1, 100 + trial);
    const auto route = fixture::random_route(rng, 1 + trial % 3, 4);
    const auto g = metro::greedy_decode(m, route);
    const auto b = metro::beam_decode(m, route, 1);
    ASSERT_EQ(b.candidates.size(), 1u);
    EXPECT_EQ(b.candidates[0].text, g.text);
    EXPECT_NEAR(b.candidates[0].logprob, g.logprob, 1e-9);
    EXPECT_EQ(b.incomplete, !g.complete);
  }
}

TEST(Beam, ScoresNonIncreasingAndSetsDistinct) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = tiny_model(1, 200 + trial);
    const auto b = metro::beam_decode(m, fixture::random_route(rng, 2, 4), 5);
    std::set<std::string> keys;
    for (std::size_t i = 0; i < b.candidates.size(); ++i) {
      if (i > 0) {
        EXPECT_LE(b.candidates[i].logprob, b.candidates[i - 1].logprob);
      }
      EXPECT_LE(b.candidates[i].logprob, 0.0);
      if (b.candidates[i].complete) {
        EXPECT_TRUE(keys.insert(metro::detail::set_key(b.candidates[i].text)).second);
      }
    }
  }
}

TEST(TokenizeExamples, PrefixRoutesDeduplicated) {
  using metro::make_reaction;
  const auto tree = metro::make_tree("A", {make_reaction("A", {"B", "C"}), make_reaction("B", {"D", "F"}),
                                           make_reaction("D", {"E"}), make_reaction("C", {"G", "H"})});
  const auto examples = metro::tree_to_examples(tree);
  const auto vocab = metro::build_vocab(std::vector<std::string>{"ABCDEFGH"});
  const auto deduped = metro::tokenize_examples(examples, vocab, 10, true);
  EXPECT_EQ(deduped.routes.size(), 2u);
  EXPECT_EQ(deduped.dropped_prefix, 2u);
  const auto all = metro::tokenize_examples(examples, vocab, 10, false);
  EXPECT_EQ(all.routes.size(), 4u);
  const auto short_len = metro::tokenize_examples(examples, vocab, 4, false);
  EXPECT_EQ(short_len.dropped_too_long, 4u);
}

TEST(Train, DeterministicAndLearns) {
  auto cfg = fixture::tiny_config();
  cfg.epochs = 30;
  cfg.batch = 2;
  cfg.warmup_steps = 10;
  cfg.lr_factor = 1.0;
  cfg.dropout = 0.1;
  cfg.eval_every = 10;
  std::vector<metro::RouteExample> ex{{"t0", "CN", {"CN", "C"}, {"C.N", "c"}, 2},
                                      {"t1", "ON", {"ON", "O"}, {"O.N", "n"}, 2},
                                      {"t2", "SC", {"SC"}, {"S.C"}, 1}};
  const auto vocab = fixture::tiny_vocab();
  const auto data = metro::tokenize_examples(ex, vocab, cfg.max_len, true);
  MetroModel<double> a(cfg, vocab), b(cfg, vocab);
  const auto ra = metro::train(a, data, &data);
  const auto rb = metro::train(b, data, &data);
  ASSERT_EQ(ra.log.size(), 3u);
  EXPECT_EQ(ra.steps, 60);
  EXPECT_LT(ra.log.back().train_loss, ra.log.front().train_loss);
  for (std::size_t p = 0; p < a.params().size(); ++p) {
    EXPECT_EQ(a.params()[p].value.data, b.params()[p].value.data);
  }
}
