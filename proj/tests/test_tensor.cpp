// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "metro/tensor.hpp"
#include "support/oracles.hpp"

using namespace metro::nn;
using metro::ErrorCode;

namespace {

using T = double;

void randomize(ParameterSet<T> &ps, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (std::size_t p = 0; p < ps.size(); ++p)
    for (auto &x : ps[p].value.data) x = n(rng);
}

Tensor<T> random_tensor(std::vector<int> shape, std::mt19937_64 &rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto &x : t.data) x = n(rng);
  return t;
}

// Reduces any output to a scalar with fixed random weights so every
// output coordinate gets a distinct upstream gradient.
Var weighted_sum(Tape<T> &tape, Var x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto &v = tape.value(x);
  return tape.sum(tape.mul(x, tape.constant(random_tensor(v.shape, rng))));
}

// Both checkers must agree that the gradient is right.
void expect_gradients(const std::function<Var(Tape<T> &)> &build, ParameterSet<T> &ps) {
  const auto report = grad_check<T>(build, ps);
  EXPECT_LT(report.max_rel_error, 1e-6);
  EXPECT_LT(oracle::max_relative_gradient_error<T>(build, ps), 1e-6);
}

}  // namespace

TEST(Tensor, ShapeChecked) {
  EXPECT_THROW(Tensor<T>({2, 3}, std::vector<T>{1, 2, 3}), metro::Error);
  Tape<T> tape;
  auto a = tape.constant(Tensor<T>({2, 3}));
  auto b = tape.constant(Tensor<T>({2, 3}));
  try {
    tape.matmul(a, b);
    FAIL();
  } catch (const metro::Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
}

TEST(Tensor, SoftmaxUniformRow) {
  Tape<T> tape;
  auto s = tape.softmax(tape.constant(Tensor<T>({1, 4}, 3.0)));
  for (T x : tape.value(s).data) EXPECT_DOUBLE_EQ(x, 0.25);
}

TEST(Tensor, SoftmaxRowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({3, 1 + static_cast<int>(rng() % 7)}, rng);
    for (auto &v : x.data) v *= 10;
    auto shifted = x;
    for (auto &v : shifted.data) v += 123.0;
    Tape<T> tape;
    const auto &a = tape.value(tape.softmax(tape.constant(x)));
    const auto &b = tape.value(tape.softmax(tape.constant(shifted)));
    for (int r = 0; r < a.rows(); ++r) {
      double sum = 0;
      for (int c = 0; c < a.cols(); ++c) {
        sum += a(r, c);
        EXPECT_NEAR(a(r, c), b(r, c), 1e-12);
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(Tensor, MatmulIdentity) {
  std::mt19937_64 rng(2);
  Tensor<T> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye(i, i) = 1;
  const auto m = random_tensor({3, 5}, rng);
  Tape<T> tape;
  EXPECT_EQ(tape.value(tape.matmul(tape.constant(eye), tape.constant(m))).data, m.data);
}

TEST(Tensor, CrossEntropyVanishesWithMargin) {
  double previous = 1e9;
  for (double margin : {1.0, 5.0, 10.0, 20.0, 40.0}) {
    Tensor<T> logits({1, 3});
    logits(0, 1) = margin;
    Tape<T> tape;
    const double loss = tape.value(tape.cross_entropy(tape.constant(logits), {1}, 0)).data[0];
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-15);
}

TEST(Tensor, CrossEntropyIgnoresPad) {
  std::mt19937_64 rng(3);
  const auto logits = random_tensor({3, 5}, rng);
  Tensor<T> first({1, 5});
  std::copy_n(logits.data.begin(), 5, first.data.begin());
  Tape<T> tape;
  const double with_pad = tape.value(tape.cross_entropy(tape.constant(logits), {2, 0, 0}, 0)).data[0];
  const double alone = tape.value(tape.cross_entropy(tape.constant(first), {2}, 0)).data[0];
  EXPECT_NEAR(with_pad, alone, 1e-14);
}

TEST(GradCheck, QuadraticLoss) {
  ParameterSet<T> ps;
  ps.add("p", {2, 3});
  randomize(ps, 4);
  auto build = [&](Tape<T> &tape) {
    Var p = tape.param(ps[0]);
    return tape.scale(tape.sum(tape.mul(p, p)), 0.5);
  };
  const auto report = grad_check<T>(build, ps);
  EXPECT_LT(report.max_rel_error, 1e-8);
  for (std::size_t i = 0; i < ps[0].value.size(); ++i) {
    EXPECT_NEAR(ps[0].grad.data[i], ps[0].value.data[i], 1e-12);
  }
}

TEST(GradCheck, NonFiniteLoss) {
  ParameterSet<T> ps;
  ps.add("p", {1, 1}).value.data[0] = std::numeric_limits<double>::infinity();
  auto build = [&](Tape<T> &tape) { return tape.sum(tape.param(ps[0])); };
  try {
    grad_check<T>(build, ps);
    FAIL();
  } catch (const metro::Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteValue);
  }
}

TEST(GradCheck, ElementwiseAndShapeOps) {
  ParameterSet<T> ps;
  ps.add("a", {3, 4});
  ps.add("b", {4, 2});
  ps.add("c", {3, 2});
  ps.add("bias", {1, 2});
  ps.add("emb", {6, 3});
  randomize(ps, 5);
  auto build = [&](Tape<T> &tape) {
    Var ab = tape.matmul(tape.param(ps[0]), tape.param(ps[1]));
    Var h = tape.relu(tape.add_row(tape.add(ab, tape.param(ps[2])), tape.param(ps[3])));
    Var e = tape.embedding(tape.param(ps[4]), {1, 4, 1});
    Var cat = tape.concat_cols({h, tape.scale(e, 0.7)});
    Var r = tape.reshape(cat, {5, 3});
    Var g = tape.gather_rows({r, e}, {{0, 4}, {1, 2}, {0, 0}});
    std::vector<std::uint8_t> mask(15, 0);
    mask[2] = mask[7] = 1;
    Var m = tape.masked_fill(r, mask, -1.5);
    return tape.add(tape.add(weighted_sum(tape, m, 1), weighted_sum(tape, g, 2)),
                    weighted_sum(tape, tape.flatten(e), 3));
  };
  expect_gradients(build, ps);
}

TEST(GradCheck, SoftmaxLayerNormCrossEntropy) {
  ParameterSet<T> ps;
  ps.add("x", {4, 5});
  ps.add("g", {1, 5});
  ps.add("b", {1, 5});
  randomize(ps, 6);
  auto build = [&](Tape<T> &tape) {
    Var ln = tape.layer_norm(tape.param(ps[0]), tape.param(ps[1]), tape.param(ps[2]));
    Var s = weighted_sum(tape, tape.softmax(ln), 3);
    Var ce = tape.cross_entropy(ln, {1, 0, 4, 2}, 0, 0.1);
    return tape.add(s, ce);
  };
  expect_gradients(build, ps);
}

TEST(GradCheck, SegmentAttention) {
  ParameterSet<T> ps;
  ps.add("q", {5, 4});
  ps.add("k", {6, 4});
  ps.add("v", {6, 4});
  randomize(ps, 7);
  auto build = [&](Tape<T> &tape) {
    std::vector<AttentionSegment> segs{{0, 3, 0, 3, true}, {3, 2, 3, 3, false}};
    return weighted_sum(tape,
                        tape.segment_attention(tape.param(ps[0]), tape.param(ps[1]),
                                               tape.param(ps[2]), 2, segs),
                        4);
  };
  expect_gradients(build, ps);
}

TEST(GradCheck, RouteAttentionAndFlattenProject) {
  // n=3 molecules of lengths 2, 4, 1 in one route; l = 4, d = 8.
  ParameterSet<T> ps;
  ps.add("x", {7, 8});
  ps.add("wp", {32, 8});
  ps.add("wq", {8, 8});
  ps.add("wk", {8, 8});
  randomize(ps, 8, 0.5);
  const std::vector<RouteMolecule> mols{{0, 0, 2}, {1, 2, 4}, {2, 6, 1}};
  auto build = [&](Tape<T> &tape) {
    Var x = tape.param(ps[0]);
    Var v = tape.flatten_project(x, tape.param(ps[1]), mols);
    Var q = tape.matmul(v, tape.param(ps[2]));
    Var k = tape.matmul(v, tape.param(ps[3]));
    return weighted_sum(tape, tape.route_attention(q, k, x, 2, {mols}), 5);
  };
  expect_gradients(build, ps);
}

TEST(GradCheck, FrozenDropoutMask) {
  ParameterSet<T> ps;
  ps.add("x", {3, 4});
  ps.add("w", {4, 4});
  randomize(ps, 9);
  DropoutState<T> drop;
  drop.rate = 0.3;
  drop.rng.seed(10);
  drop.record = true;
  {
    Tape<T> tape;
    tape.set_dropout(&drop);
    tape.dropout(tape.matmul(tape.param(ps[0]), tape.param(ps[1])));
  }
  drop.record = false;
  drop.replay = true;
  auto build = [&](Tape<T> &tape) {
    drop.cursor = 0;
    tape.set_dropout(&drop);
    return weighted_sum(tape, tape.dropout(tape.matmul(tape.param(ps[0]), tape.param(ps[1]))), 6);
  };
  expect_gradients(build, ps);
}

TEST(Checkpoint, RoundTripAndTamper) {
  ParameterSet<float> ps;
  ps.add("w", {3, 2});
  ps.add("b", {1, 2});
  std::mt19937_64 rng(11);
  for (std::size_t p = 0; p < ps.size(); ++p)
    for (auto &x : ps[p].value.data) x = static_cast<float>(uniform01(rng));
  const auto dir = std::filesystem::temp_directory_path() / "metro_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, ps, 42, 7);
  ParameterSet<float> back;
  back.add("w", {3, 2});
  back.add("b", {1, 2});
  const auto manifest = load_checkpoint(dir, back);
  EXPECT_EQ(manifest.at("step").get<int>(), 7);
  for (std::size_t p = 0; p < ps.size(); ++p) EXPECT_EQ(back[p].value.data, ps[p].value.data);

  ParameterSet<float> wrong;
  wrong.add("w", {2, 3});
  wrong.add("b", {1, 2});
  EXPECT_THROW(load_checkpoint(dir, wrong), metro::Error);
  {
    std::fstream f(dir / "weights.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put(static_cast<char>(0x5a));
  }
  try {
    load_checkpoint(dir, back);
    FAIL();
  } catch (const metro::Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kSchemaMismatch);
  }
  std::filesystem::remove_all(dir);
}
