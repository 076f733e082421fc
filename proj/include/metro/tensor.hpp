// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and a reverse-mode tape over a fixed operator set.
// Everything is templated on the scalar type: double for gradient checking,
// float for training.

#ifndef METRO_TENSOR_HPP
#define METRO_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "metro/error.hpp"

namespace metro::nn {

inline std::string shape_string(const std::vector<int> &shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

[[noreturn]] inline void shape_error(const std::string &op,
                                     const std::vector<int> &a,
                                     const std::vector<int> &b) {
  throw Error(ErrorCode::kShapeMismatch,
              op + ": " + shape_string(a) + " vs " + shape_string(b));
}

template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> dims, T fill = T(0))
      : shape(std::move(dims)), data(count(shape), fill) {}
  Tensor(std::vector<int> dims, std::vector<T> values)
      : shape(std::move(dims)), data(std::move(values)) {
    if (data.size() != count(shape)) {
      throw Error(ErrorCode::kShapeMismatch,
                  "tensor " + shape_string(shape) + " with " +
                      std::to_string(data.size()) + " values");
    }
  }

  static std::size_t count(const std::vector<int> &dims) {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return shape.empty(); }
  /// Last dimension.
  int cols() const { return shape.empty() ? 0 : shape.back(); }
  /// Product of the leading dimensions.
  int rows() const {
    return cols() == 0 ? 0 : static_cast<int>(data.size() / cols());
  }
  T &operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  T operator()(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols() + c];
  }

  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<Matrix> mat() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const Matrix> mat() const { return {data.data(), rows(), cols()}; }
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Ordered, named parameter storage. Order is creation order and is the
/// order used by checkpoints and optimizers.
template <typename T>
class ParameterSet {
 public:
  Parameter<T> &add(const std::string &name, std::vector<int> shape) {
    for (const auto &p : params_) {
      if (p->name == name) {
        throw Error(ErrorCode::kInvalidArgument, "duplicate parameter " + name);
      }
    }
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = Tensor<T>(shape);
    p->grad = Tensor<T>(shape);
    params_.push_back(std::move(p));
    return *params_.back();
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T> &operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T> &operator[](std::size_t i) const { return *params_[i]; }

  Parameter<T> *find(const std::string &name) {
    for (auto &p : params_) {
      if (p->name == name) return p.get();
    }
    return nullptr;
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto &p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto &p : params_) std::fill(p->grad.data.begin(), p->grad.data.end(), T(0));
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

/// Uniform double in [0, 1) from the top 53 bits; stable across platforms.
inline double uniform01(std::mt19937_64 &rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <typename T>
void xavier_uniform(Tensor<T> &t, std::mt19937_64 &rng) {
  const int fan_out = t.cols();
  const int fan_in = t.rows();
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto &x : t.data) x = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
}

template <typename T>
void normal_init(Tensor<T> &t, double stddev, std::mt19937_64 &rng) {
  // Box-Muller on the platform-stable uniform source.
  for (std::size_t i = 0; i < t.data.size(); i += 2) {
    const double u1 = std::max(uniform01(rng), 1e-300);
    const double u2 = uniform01(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    t.data[i] = static_cast<T>(stddev * r * std::cos(2 * M_PI * u2));
    if (i + 1 < t.data.size()) {
      t.data[i + 1] = static_cast<T>(stddev * r * std::sin(2 * M_PI * u2));
    }
  }
}

/// Dropout masks. In replay mode the masks recorded earlier are returned in
/// the same order, which makes a dropout network a deterministic function
/// for finite differences.
template <typename T>
struct DropoutState {
  double rate = 0.0;
  std::mt19937_64 rng{0};
  bool record = false;
  bool replay = false;
  std::vector<std::vector<T>> masks;
  std::size_t cursor = 0;

  std::vector<T> next_mask(std::size_t n) {
    if (replay) {
      if (cursor >= masks.size() || masks[cursor].size() != n) {
        throw Error(ErrorCode::kShapeMismatch, "dropout replay out of sync");
      }
      return masks[cursor++];
    }
    std::vector<T> m(n);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (auto &x : m) x = uniform01(rng) < rate ? T(0) : keep_scale;
    if (record) masks.push_back(m);
    return m;
  }
};

/// Contiguous query rows attending to contiguous key rows.
struct AttentionSegment {
  int q_begin = 0;
  int q_len = 0;
  int k_begin = 0;
  int k_len = 0;
  bool causal = false;
};

/// One molecule of a route: its token rows [begin, begin + len) and its row
/// in the per-molecule query/key matrices.
struct RouteMolecule {
  int row = 0;
  int begin = 0;
  int len = 0;
};

/// Handle to a tape node.
struct Var {
  int id = -1;
};

template <typename T>
class Tape {
 public:
  using Matrix = typename Tensor<T>::Matrix;
  using MapM = Eigen::Map<Matrix>;
  using CMapM = Eigen::Map<const Matrix>;
  using Stride = Eigen::OuterStride<>;
  using Block = Eigen::Map<Matrix, 0, Stride>;
  using CBlock = Eigen::Map<const Matrix, 0, Stride>;

  /// With recording off no backward closures are kept (inference).
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_dropout(DropoutState<T> *state) { dropout_ = state; }
  std::size_t num_nodes() const { return nodes_.size(); }

  const Tensor<T> &value(Var v) const { return nodes_.at(v.id).value; }
  const std::vector<int> &shape(Var v) const { return nodes_.at(v.id).value.shape; }
  /// Gradient of a node after backward(); empty if it received none.
  const Tensor<T> &grad(Var v) const { return nodes_.at(v.id).grad; }

  Var constant(Tensor<T> t) { return push(std::move(t), false); }

  Var param(Parameter<T> &p) {
    Var v = push(p.value, recording_);
    if (recording_) {
      nodes_[v.id].backward = [this, v, &p] {
        auto &g = nodes_[v.id].grad.data;
        for (std::size_t i = 0; i < g.size(); ++i) p.grad.data[i] += g[i];
      };
    }
    return v;
  }

  /// Reverse sweep from a scalar node.
  void backward(Var loss) {
    if (!recording_) throw Error(ErrorCode::kInvalidArgument, "tape not recording");
    auto &root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw Error(ErrorCode::kShapeMismatch,
                  "backward from non-scalar " + shape_string(root.value.shape));
    }
    gradient(loss).data[0] += T(1);
    for (int i = loss.id; i >= 0; --i) {
      auto &n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward();
    }
  }

  // ---------------------------------------------------------------- basics

  /// a (.. x k) times b (k x n).
  Var matmul(Var a, Var b) {
    const auto &A = value(a);
    const auto &B = value(b);
    if (B.shape.size() != 2 || A.cols() != B.shape[0]) shape_error("matmul", A.shape, B.shape);
    std::vector<int> out_shape = A.shape;
    out_shape.back() = B.shape[1];
    Tensor<T> out(out_shape);
    out.mat().noalias() = A.mat() * B.mat();
    Var o = push(std::move(out), needs(a) || needs(b));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, b, o] {
        const auto &dC = nodes_[o.id].grad;
        if (needs(a)) gradient(a).mat().noalias() += dC.mat() * value(b).mat().transpose();
        if (needs(b)) gradient(b).mat().noalias() += value(a).mat().transpose() * dC.mat();
      };
    }
    return o;
  }

  Var add(Var a, Var b) {
    if (shape(a) != shape(b)) shape_error("add", shape(a), shape(b));
    Tensor<T> out = value(a);
    const auto &B = value(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B[i];
    Var o = push(std::move(out), needs(a) || needs(b));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, b, o] {
        const auto &g = nodes_[o.id].grad.data;
        for (Var v : {a, b}) {
          if (!needs(v)) continue;
          auto &d = gradient(v).data;
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      };
    }
    return o;
  }

  /// Adds a vector to every row.
  Var add_row(Var a, Var bias) {
    const auto &A = value(a);
    const auto &b = value(bias);
    if (b.size() != static_cast<std::size_t>(A.cols())) shape_error("add_row", A.shape, b.shape);
    Tensor<T> out = A;
    const int R = A.rows(), C = A.cols();
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) out(r, c) += b.data[c];
    Var o = push(std::move(out), needs(a) || needs(bias));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, bias, o] {
        const auto &g = nodes_[o.id].grad;
        if (needs(a)) {
          auto &d = gradient(a).data;
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g.data[i];
        }
        if (needs(bias)) {
          auto &d = gradient(bias).data;
          const int R = g.rows(), C = g.cols();
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) d[c] += g(r, c);
        }
      };
    }
    return o;
  }

  Var mul(Var a, Var b) {
    if (shape(a) != shape(b)) shape_error("mul", shape(a), shape(b));
    Tensor<T> out = value(a);
    const auto &B = value(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B[i];
    Var o = push(std::move(out), needs(a) || needs(b));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, b, o] {
        const auto &g = nodes_[o.id].grad.data;
        if (needs(a)) {
          auto &d = gradient(a).data;
          const auto &B = value(b).data;
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * B[i];
        }
        if (needs(b)) {
          auto &d = gradient(b).data;
          const auto &A = value(a).data;
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * A[i];
        }
      };
    }
    return o;
  }

  Var scale(Var a, T s) {
    Tensor<T> out = value(a);
    for (auto &x : out.data) x *= s;
    Var o = push(std::move(out), needs(a));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, o, s] {
        const auto &g = nodes_[o.id].grad.data;
        auto &d = gradient(a).data;
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
      };
    }
    return o;
  }

  Var relu(Var a) {
    Tensor<T> out = value(a);
    for (auto &x : out.data) x = x > T(0) ? x : T(0);
    Var o = push(std::move(out), needs(a));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, o] {
        const auto &g = nodes_[o.id].grad.data;
        const auto &x = value(a).data;
        auto &d = gradient(a).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] > T(0)) d[i] += g[i];
        }
      };
    }
    return o;
  }

  /// Sum of all elements, as a scalar.
  Var sum(Var a) {
    T s = 0;
    for (T x : value(a).data) s += x;
    Var o = push(Tensor<T>({1}, std::vector<T>{s}), needs(a));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, o] {
        const T g = nodes_[o.id].grad.data[0];
        for (auto &d : gradient(a).data) d += g;
      };
    }
    return o;
  }

  Var reshape(Var a, std::vector<int> new_shape) {
    if (Tensor<T>::count(new_shape) != value(a).size()) {
      shape_error("reshape", value(a).shape, new_shape);
    }
    Tensor<T> out(std::move(new_shape), value(a).data);
    Var o = push(std::move(out), needs(a));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, o] {
        const auto &g = nodes_[o.id].grad.data;
        auto &d = gradient(a).data;
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      };
    }
    return o;
  }

  /// Collapses all dimensions into one row: shape [1, n].
  Var flatten(Var a) {
    return reshape(a, {1, static_cast<int>(value(a).size())});
  }

  /// Concatenation along the last dimension.
  Var concat_cols(const std::vector<Var> &parts) {
    if (parts.empty()) throw Error(ErrorCode::kInvalidArgument, "concat of nothing");
    const int R = value(parts[0]).rows();
    int C = 0;
    bool any = false;
    for (Var p : parts) {
      if (value(p).rows() != R) shape_error("concat_cols", value(parts[0]).shape, value(p).shape);
      C += value(p).cols();
      any = any || needs(p);
    }
    std::vector<int> out_shape = value(parts[0]).shape;
    out_shape.back() = C;
    Tensor<T> out(out_shape);
    int off = 0;
    for (Var p : parts) {
      const auto &P = value(p);
      for (int r = 0; r < R; ++r)
        std::copy_n(&P.data[static_cast<std::size_t>(r) * P.cols()], P.cols(),
                    &out.data[static_cast<std::size_t>(r) * C + off]);
      off += P.cols();
    }
    Var o = push(std::move(out), any);
    if (live(o)) {
      nodes_[o.id].backward = [this, parts, o, R, C] {
        const auto &g = nodes_[o.id].grad.data;
        int off = 0;
        for (Var p : parts) {
          const int pc = value(p).cols();
          if (needs(p)) {
            auto &d = gradient(p).data;
            for (int r = 0; r < R; ++r)
              for (int c = 0; c < pc; ++c)
                d[static_cast<std::size_t>(r) * pc + c] += g[static_cast<std::size_t>(r) * C + off + c];
          }
          off += pc;
        }
      };
    }
    return o;
  }

  /// Builds a 2-D tensor from rows of several sources: row i of the result
  /// is row picks[i].second of sources[picks[i].first].
  Var gather_rows(const std::vector<Var> &sources,
                  std::vector<std::pair<int, int>> picks) {
    if (sources.empty()) throw Error(ErrorCode::kInvalidArgument, "gather from nothing");
    const int C = value(sources[0]).cols();
    bool any = false;
    for (Var s : sources) {
      if (value(s).cols() != C) shape_error("gather_rows", value(sources[0]).shape, value(s).shape);
      any = any || needs(s);
    }
    Tensor<T> out({static_cast<int>(picks.size()), C});
    for (std::size_t i = 0; i < picks.size(); ++i) {
      const auto &S = value(sources.at(picks[i].first));
      if (picks[i].second < 0 || picks[i].second >= S.rows()) {
        throw Error(ErrorCode::kShapeMismatch, "gather_rows: row out of range");
      }
      std::copy_n(&S.data[static_cast<std::size_t>(picks[i].second) * C], C,
                  &out.data[i * C]);
    }
    Var o = push(std::move(out), any);
    if (live(o)) {
      nodes_[o.id].backward = [this, sources, picks = std::move(picks), o, C] {
        const auto &g = nodes_[o.id].grad.data;
        for (std::size_t i = 0; i < picks.size(); ++i) {
          Var s = sources[picks[i].first];
          if (!needs(s)) continue;
          auto &d = gradient(s).data;
          const std::size_t base = static_cast<std::size_t>(picks[i].second) * C;
          for (int c = 0; c < C; ++c) d[base + c] += g[i * C + c];
        }
      };
    }
    return o;
  }

  /// Rows of an embedding table.
  Var embedding(Var table, const std::vector<int> &ids) {
    const auto &W = value(table);
    std::vector<std::pair<int, int>> picks;
    picks.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || id >= W.rows()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "embedding id " + std::to_string(id) + " for table " +
                        shape_string(W.shape));
      }
      picks.emplace_back(0, id);
    }
    return gather_rows({table}, std::move(picks));
  }

  /// Row-wise softmax over the last dimension.
  Var softmax(Var a) {
    Tensor<T> out = value(a);
    const int R = out.rows(), C = out.cols();
    for (int r = 0; r < R; ++r) softmax_row(&out.data[static_cast<std::size_t>(r) * C], C);
    Var o = push(std::move(out), needs(a));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, o, R, C] {
        const auto &y = nodes_[o.id].value.data;
        const auto &g = nodes_[o.id].grad.data;
        auto &d = gradient(a).data;
        for (int r = 0; r < R; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * C;
          T dot = 0;
          for (int c = 0; c < C; ++c) dot += g[base + c] * y[base + c];
          for (int c = 0; c < C; ++c) d[base + c] += y[base + c] * (g[base + c] - dot);
        }
      };
    }
    return o;
  }

  /// Row-wise layer normalization with learned gain and bias.
  Var layer_norm(Var a, Var gain, Var bias, T eps = T(1e-5)) {
    const auto &X = value(a);
    const int R = X.rows(), C = X.cols();
    if (value(gain).size() != static_cast<std::size_t>(C) ||
        value(bias).size() != static_cast<std::size_t>(C)) {
      shape_error("layer_norm", X.shape, value(gain).shape);
    }
    Tensor<T> out(X.shape);
    auto xhat = std::make_shared<std::vector<T>>(X.size());
    auto inv_std = std::make_shared<std::vector<T>>(R);
    const auto &g = value(gain).data;
    const auto &b = value(bias).data;
    for (int r = 0; r < R; ++r) {
      const T *x = &X.data[static_cast<std::size_t>(r) * C];
      T mean = 0;
      for (int c = 0; c < C; ++c) mean += x[c];
      mean /= C;
      T var = 0;
      for (int c = 0; c < C; ++c) var += (x[c] - mean) * (x[c] - mean);
      var /= C;
      const T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[r] = is;
      for (int c = 0; c < C; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * C + c;
        (*xhat)[i] = (x[c] - mean) * is;
        out.data[i] = (*xhat)[i] * g[c] + b[c];
      }
    }
    Var o = push(std::move(out), needs(a) || needs(gain) || needs(bias));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, gain, bias, o, xhat, inv_std, R, C] {
        const auto &dy = nodes_[o.id].grad.data;
        const auto &g = value(gain).data;
        if (needs(gain) || needs(bias)) {
          auto *dg = needs(gain) ? &gradient(gain).data : nullptr;
          auto *db = needs(bias) ? &gradient(bias).data : nullptr;
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) {
              const std::size_t i = static_cast<std::size_t>(r) * C + c;
              if (dg) (*dg)[c] += dy[i] * (*xhat)[i];
              if (db) (*db)[c] += dy[i];
            }
        }
        if (!needs(a)) return;
        auto &dx = gradient(a).data;
        for (int r = 0; r < R; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * C;
          T sum_d = 0, sum_dx = 0;
          for (int c = 0; c < C; ++c) {
            const T dh = dy[base + c] * g[c];
            sum_d += dh;
            sum_dx += dh * (*xhat)[base + c];
          }
          for (int c = 0; c < C; ++c) {
            const T dh = dy[base + c] * g[c];
            dx[base + c] += (*inv_std)[r] / C *
                            (C * dh - sum_d - (*xhat)[base + c] * sum_dx);
          }
        }
      };
    }
    return o;
  }

  /// Inverted dropout; identity when no dropout state is attached or the
  /// rate is zero.
  Var dropout(Var a) {
    if (!dropout_ || dropout_->rate <= 0.0) return a;
    auto mask = std::make_shared<std::vector<T>>(dropout_->next_mask(value(a).size()));
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= (*mask)[i];
    Var o = push(std::move(out), needs(a));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, o, mask] {
        const auto &g = nodes_[o.id].grad.data;
        auto &d = gradient(a).data;
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (*mask)[i];
      };
    }
    return o;
  }

  /// Replaces elements where mask is set by `fill`; no gradient flows there.
  Var masked_fill(Var a, std::vector<std::uint8_t> mask, T fill) {
    if (mask.size() != value(a).size()) {
      throw Error(ErrorCode::kShapeMismatch, "masked_fill: mask size");
    }
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      if (mask[i]) out.data[i] = fill;
    }
    Var o = push(std::move(out), needs(a));
    if (live(o)) {
      nodes_[o.id].backward = [this, a, o, mask = std::move(mask)] {
        const auto &g = nodes_[o.id].grad.data;
        auto &d = gradient(a).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!mask[i]) d[i] += g[i];
        }
      };
    }
    return o;
  }

  /// Mean token cross-entropy of logits (N x V) against labels; labels equal
  /// to `ignore_index` contribute nothing. Optional label smoothing spreads
  /// `smoothing` mass uniformly over the vocabulary.
  Var cross_entropy(Var logits, std::vector<int> labels, int ignore_index,
                    T smoothing = T(0)) {
    const auto &L = value(logits);
    const int N = L.rows(), V = L.cols();
    if (static_cast<int>(labels.size()) != N) {
      throw Error(ErrorCode::kShapeMismatch,
                  "cross_entropy: " + std::to_string(labels.size()) +
                      " labels for logits " + shape_string(L.shape));
    }
    auto probs = std::make_shared<std::vector<T>>(L.data);
    T total = 0;
    int counted = 0;
    for (int r = 0; r < N; ++r) {
      T *row = &(*probs)[static_cast<std::size_t>(r) * V];
      softmax_row(row, V);
      if (labels[r] == ignore_index) continue;
      if (labels[r] < 0 || labels[r] >= V) {
        throw Error(ErrorCode::kShapeMismatch, "cross_entropy: label out of range");
      }
      ++counted;
      const T tiny = std::numeric_limits<T>::min();
      T nll = -std::log(std::max(row[labels[r]], tiny));
      if (smoothing > T(0)) {
        T uniform = 0;
        for (int c = 0; c < V; ++c) uniform -= std::log(std::max(row[c], tiny));
        nll = (T(1) - smoothing) * nll + smoothing * uniform / V;
      }
      total += nll;
    }
    const T loss = counted ? total / counted : T(0);
    Var o = push(Tensor<T>({1}, std::vector<T>{loss}), needs(logits));
    if (live(o) && counted) {
      nodes_[o.id].backward = [this, logits, o, probs, labels = std::move(labels),
                               ignore_index, smoothing, counted, N, V] {
        const T g = nodes_[o.id].grad.data[0] / counted;
        auto &d = gradient(logits).data;
        for (int r = 0; r < N; ++r) {
          if (labels[r] == ignore_index) continue;
          const std::size_t base = static_cast<std::size_t>(r) * V;
          for (int c = 0; c < V; ++c) {
            T target = smoothing / V;
            if (c == labels[r]) target += T(1) - smoothing;
            d[base + c] += g * ((*probs)[base + c] - target);
          }
        }
      };
    }
    return o;
  }

  // ----------------------------------------------------------- attention

  /// Multi-head scaled dot-product attention over segments,
  /// softmax(Q K^T / sqrt(d_head)) V per head. q: (Nq x H*dh),
  /// k and v: (Nk x H*dh). Rows outside every segment are zero.
  Var segment_attention(Var q, Var k, Var v, int heads,
                        std::vector<AttentionSegment> segments) {
    const auto &Q = value(q);
    const auto &K = value(k);
    const auto &Vv = value(v);
    if (K.cols() != Q.cols() || Vv.cols() != Q.cols() || K.rows() != Vv.rows() ||
        heads <= 0 || Q.cols() % heads != 0) {
      shape_error("segment_attention", Q.shape, K.shape);
    }
    const int width = Q.cols();
    const int dh = width / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> out({Q.rows(), width});
    auto probs = std::make_shared<std::vector<Matrix>>();
    probs->reserve(segments.size() * heads);
    for (const auto &s : segments) {
      if (s.q_begin < 0 || s.q_begin + s.q_len > Q.rows() || s.k_begin < 0 ||
          s.k_begin + s.k_len > K.rows() || s.k_len <= 0) {
        throw Error(ErrorCode::kShapeMismatch, "segment_attention: bad segment");
      }
      const int shift = s.k_len - s.q_len;
      for (int h = 0; h < heads; ++h) {
        Matrix S = cblock(Q, s.q_begin, h * dh, s.q_len, dh) *
                   cblock(K, s.k_begin, h * dh, s.k_len, dh).transpose();
        S *= scale;
        if (s.causal) {
          for (int t = 0; t < s.q_len; ++t)
            for (int u = t + shift + 1; u < s.k_len; ++u)
              S(t, u) = -std::numeric_limits<T>::infinity();
        }
        for (int t = 0; t < s.q_len; ++t) softmax_row(S.row(t).data(), s.k_len);
        block(out, s.q_begin, h * dh, s.q_len, dh).noalias() =
            S * cblock(Vv, s.k_begin, h * dh, s.k_len, dh);
        probs->push_back(std::move(S));
      }
    }
    Var o = push(std::move(out), needs(q) || needs(k) || needs(v));
    if (live(o)) {
      nodes_[o.id].backward = [this, q, k, v, o, heads, dh, scale, probs,
                               segments = std::move(segments)] {
        const auto &dO = nodes_[o.id].grad;
        const auto &Q = value(q);
        const auto &K = value(k);
        const auto &Vv = value(v);
        Tensor<T> *dQ = needs(q) ? &gradient(q) : nullptr;
        Tensor<T> *dK = needs(k) ? &gradient(k) : nullptr;
        Tensor<T> *dV = needs(v) ? &gradient(v) : nullptr;
        std::size_t idx = 0;
        for (const auto &s : segments) {
          for (int h = 0; h < heads; ++h) {
            const Matrix &P = (*probs)[idx++];
            auto dOh = cblock(dO, s.q_begin, h * dh, s.q_len, dh);
            if (dV) block(*dV, s.k_begin, h * dh, s.k_len, dh).noalias() += P.transpose() * dOh;
            if (!dQ && !dK) continue;
            Matrix dP = dOh * cblock(Vv, s.k_begin, h * dh, s.k_len, dh).transpose();
            Matrix dS = softmax_backward(P, dP) * scale;
            if (dQ) block(*dQ, s.q_begin, h * dh, s.q_len, dh).noalias() +=
                dS * cblock(K, s.k_begin, h * dh, s.k_len, dh);
            if (dK) block(*dK, s.k_begin, h * dh, s.k_len, dh).noalias() +=
                dS.transpose() * cblock(Q, s.q_begin, h * dh, s.q_len, dh);
          }
        }
      };
    }
    return o;
  }

  /// Projection of flattened, zero-padded molecule matrices:
  /// out[i] = flatten(x rows of molecule i) * wp[0 : len_i * d, :], which
  /// equals padding every molecule to wp.rows() / d rows with zeros.
  Var flatten_project(Var x, Var wp, const std::vector<RouteMolecule> &molecules) {
    const auto &X = value(x);
    const auto &W = value(wp);
    const int d = X.cols();
    if (W.rows() % d != 0) shape_error("flatten_project", X.shape, W.shape);
    const int max_rows = W.rows() / d;
    const int n = static_cast<int>(molecules.size());
    Tensor<T> out({n, W.cols()});
    for (const auto &m : molecules) {
      if (m.len > max_rows) {
        throw Error(ErrorCode::kSequenceTooLong,
                    std::to_string(m.len) + " rows exceed projection length " +
                        std::to_string(max_rows));
      }
      if (m.row < 0 || m.row >= n || m.begin < 0 || m.begin + m.len > X.rows()) {
        throw Error(ErrorCode::kShapeMismatch, "flatten_project: bad molecule");
      }
      CMapM flat(&X.data[static_cast<std::size_t>(m.begin) * d], 1, m.len * d);
      CMapM top(W.data.data(), m.len * d, W.cols());
      MapM dst(&out.data[static_cast<std::size_t>(m.row) * W.cols()], 1, W.cols());
      dst.noalias() = flat * top;
    }
    Var o = push(std::move(out), needs(x) || needs(wp));
    if (live(o)) {
      nodes_[o.id].backward = [this, x, wp, o, molecules, d] {
        const auto &G = nodes_[o.id].grad;
        const auto &X = value(x);
        const auto &W = value(wp);
        for (const auto &m : molecules) {
          CMapM g(&G.data[static_cast<std::size_t>(m.row) * W.cols()], 1, W.cols());
          if (needs(x)) {
            MapM dflat(&gradient(x).data[static_cast<std::size_t>(m.begin) * d], 1, m.len * d);
            dflat.noalias() += g * CMapM(W.data.data(), m.len * d, W.cols()).transpose();
          }
          if (needs(wp)) {
            MapM dtop(gradient(wp).data.data(), m.len * d, W.cols());
            dtop.noalias() += CMapM(&X.data[static_cast<std::size_t>(m.begin) * d], 1, m.len * d)
                                  .transpose() * g;
          }
        }
      };
    }
    return o;
  }

  /// Attention between whole molecules of a route. Per head, scalar weights
  /// a = softmax(Q K^T / sqrt(d_head)) from one query/key row per molecule,
  /// masked so molecule i sees molecules 0..i; the value of molecule j is
  /// its token matrix (zero beyond its length), and row r of molecule i's
  /// output is sum_j a_ij V_j[r]. Output rows align with v's token rows.
  /// If `weights` is given, it receives one n x n matrix per route and head
  /// (route-major).
  Var route_attention(Var q, Var k, Var v, int heads,
                      std::vector<std::vector<RouteMolecule>> routes,
                      std::vector<Matrix> *weights = nullptr) {
    const auto &Q = value(q);
    const auto &K = value(k);
    const auto &Vv = value(v);
    if (K.cols() != Q.cols() || Vv.cols() != Q.cols() || K.rows() != Q.rows() ||
        heads <= 0 || Q.cols() % heads != 0) {
      shape_error("route_attention", Q.shape, Vv.shape);
    }
    const int width = Q.cols();
    const int dh = width / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> out({Vv.rows(), width});
    auto probs = std::make_shared<std::vector<Matrix>>();
    for (const auto &route : routes) {
      const int n = static_cast<int>(route.size());
      for (const auto &m : route) {
        if (m.row < 0 || m.row >= Q.rows() || m.begin < 0 || m.begin + m.len > Vv.rows()) {
          throw Error(ErrorCode::kShapeMismatch, "route_attention: bad molecule");
        }
      }
      for (int h = 0; h < heads; ++h) {
        Matrix S(n, n);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j) {
            if (j > i) {
              S(i, j) = -std::numeric_limits<T>::infinity();
              continue;
            }
            S(i, j) = scale * cblock(Q, route[i].row, h * dh, 1, dh)
                                  .row(0)
                                  .dot(cblock(K, route[j].row, h * dh, 1, dh).row(0));
          }
        for (int i = 0; i < n; ++i) softmax_row(S.row(i).data(), n);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j <= i; ++j) {
            const int rows = std::min(route[i].len, route[j].len);
            if (rows == 0) continue;
            block(out, route[i].begin, h * dh, rows, dh) +=
                S(i, j) * cblock(Vv, route[j].begin, h * dh, rows, dh);
          }
        if (weights) weights->push_back(S);
        probs->push_back(std::move(S));
      }
    }
    Var o = push(std::move(out), needs(q) || needs(k) || needs(v));
    if (live(o)) {
      nodes_[o.id].backward = [this, q, k, v, o, heads, dh, scale, probs,
                               routes = std::move(routes)] {
        const auto &dO = nodes_[o.id].grad;
        const auto &Q = value(q);
        const auto &K = value(k);
        const auto &Vv = value(v);
        Tensor<T> *dQ = needs(q) ? &gradient(q) : nullptr;
        Tensor<T> *dK = needs(k) ? &gradient(k) : nullptr;
        Tensor<T> *dV = needs(v) ? &gradient(v) : nullptr;
        std::size_t idx = 0;
        for (const auto &route : routes) {
          const int n = static_cast<int>(route.size());
          for (int h = 0; h < heads; ++h) {
            const Matrix &P = (*probs)[idx++];
            Matrix dP = Matrix::Zero(n, n);
            for (int i = 0; i < n; ++i)
              for (int j = 0; j <= i; ++j) {
                const int rows = std::min(route[i].len, route[j].len);
                if (rows == 0) continue;
                auto g = cblock(dO, route[i].begin, h * dh, rows, dh);
                dP(i, j) = g.cwiseProduct(cblock(Vv, route[j].begin, h * dh, rows, dh)).sum();
                if (dV) block(*dV, route[j].begin, h * dh, rows, dh) += P(i, j) * g;
              }
            if (!dQ && !dK) continue;
            Matrix dS = softmax_backward(P, dP) * scale;
            for (int i = 0; i < n; ++i)
              for (int j = 0; j <= i; ++j) {
                if (dS(i, j) == T(0)) continue;
                if (dQ) block(*dQ, route[i].row, h * dh, 1, dh) +=
                    dS(i, j) * cblock(K, route[j].row, h * dh, 1, dh);
                if (dK) block(*dK, route[j].row, h * dh, 1, dh) +=
                    dS(i, j) * cblock(Q, route[i].row, h * dh, 1, dh);
              }
          }
        }
      };
    }
    return o;
  }

  static void softmax_row(T *row, int n) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, row[i]);
    T total = 0;
    for (int i = 0; i < n; ++i) {
      row[i] = row[i] == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(row[i] - mx);
      total += row[i];
    }
    for (int i = 0; i < n; ++i) row[i] /= total;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  Var push(Tensor<T> value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = recording_ && needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  bool live(Var v) const { return nodes_[v.id].needs_grad; }

  Tensor<T> &gradient(Var v) {
    auto &n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }

  static Block block(Tensor<T> &t, int r, int c, int nr, int nc) {
    return Block(&t.data[static_cast<std::size_t>(r) * t.cols() + c], nr, nc, Stride(t.cols()));
  }
  static CBlock cblock(const Tensor<T> &t, int r, int c, int nr, int nc) {
    return CBlock(&t.data[static_cast<std::size_t>(r) * t.cols() + c], nr, nc, Stride(t.cols()));
  }

  template <typename Dp>
  static Matrix softmax_backward(const Matrix &P, const Dp &dP) {
    Matrix dS = P.cwiseProduct(dP);
    for (int i = 0; i < P.rows(); ++i) {
      const T dot = dS.row(i).sum();
      dS.row(i) -= P.row(i) * dot;
    }
    return dS;
  }

  bool recording_;
  DropoutState<T> *dropout_ = nullptr;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------- gradient check

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::vector<GradCheckEntry> worst_per_param;
  std::size_t coordinates = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Central finite differences against the tape gradient for every
/// coordinate of every parameter. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, floor). `build` must be a deterministic function
/// of the parameter values (freeze dropout masks before calling).
template <typename T>
GradCheckReport grad_check(const std::function<Var(Tape<T> &)> &build,
                           ParameterSet<T> &params, double eps = 1e-5,
                           double floor = 1e-6) {
  auto eval = [&] {
    Tape<T> tape(false);
    const Var loss = build(tape);
    return static_cast<double>(tape.value(loss).data.at(0));
  };
  params.zero_grad();
  {
    Tape<T> tape(true);
    const Var loss = build(tape);
    const double v = static_cast<double>(tape.value(loss).data.at(0));
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFiniteValue, "loss is not finite");
    tape.backward(loss);
  }
  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto &par = params[p];
    GradCheckEntry worst{par.name};
    for (std::size_t i = 0; i < par.value.size(); ++i) {
      const double a = static_cast<double>(par.grad.data[i]);
      if (!std::isfinite(a)) {
        throw Error(ErrorCode::kNonFiniteValue, "gradient of " + par.name);
      }
      const T saved = par.value.data[i];
      par.value.data[i] = static_cast<T>(saved + eps);
      const double up = eval();
      par.value.data[i] = static_cast<T>(saved - eps);
      const double down = eval();
      par.value.data[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw Error(ErrorCode::kNonFiniteValue, "perturbed loss of " + par.name);
      }
      const double n = (up - down) / (2 * eps);
      const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
      ++report.coordinates;
      if (rel >= worst.rel_error) worst = {par.name, i, a, n, rel};
    }
    report.max_rel_error = std::max(report.max_rel_error, worst.rel_error);
    report.worst_per_param.push_back(worst);
  }
  return report;
}

// ------------------------------------------------------------ checkpoints

/// FNV-1a over raw bytes.
inline std::uint64_t fnv1a64(const void *data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto *p = static_cast<const unsigned char *>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

/// Writes <dir>/weights.bin (little-endian f32 arrays, concatenated in
/// parameter order) and <dir>/manifest.json (names, shapes, offsets, seed,
/// step, weight hash and caller-supplied extra fields).
template <typename T>
void save_checkpoint(const std::filesystem::path &dir, const ParameterSet<T> &params,
                     std::uint64_t seed, std::int64_t step, nlohmann::json extra = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + dir.string());
  std::vector<float> flat;
  flat.reserve(params.num_values());
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto &par = params[p];
    entries.push_back({{"name", par.name}, {"shape", par.value.shape}, {"offset", flat.size()}});
    for (T x : par.value.data) flat.push_back(static_cast<float>(x));
  }
  {
    std::ofstream out(dir / "weights.bin", std::ios::binary);
    if (!out) throw Error(ErrorCode::kIoFailure, "cannot write weights in " + dir.string());
    out.write(reinterpret_cast<const char *>(flat.data()),
              static_cast<std::streamsize>(flat.size() * sizeof(float)));
    if (!out) throw Error(ErrorCode::kIoFailure, "write failed in " + dir.string());
  }
  nlohmann::json manifest = {
      {"format", "metro-ckpt-v1"},
      {"dtype", "f32"},
      {"seed", seed},
      {"step", step},
      {"num_values", flat.size()},
      {"weights_fnv1a64", hex64(fnv1a64(flat.data(), flat.size() * sizeof(float)))},
      {"params", entries}};
  if (!extra.is_null()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path &dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + (dir / "manifest.json").string());
  try {
    auto j = nlohmann::json::parse(in);
    if (j.value("format", "") != "metro-ckpt-v1") {
      throw Error(ErrorCode::kSchemaMismatch, "not a metro checkpoint");
    }
    return j;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::kSchemaMismatch, e.what());
  }
}

/// Loads weights into parameters that already exist with matching names
/// and shapes.
template <typename T>
nlohmann::json load_checkpoint(const std::filesystem::path &dir, ParameterSet<T> &params) {
  auto manifest = read_manifest(dir);
  const auto n = manifest.at("num_values").get<std::size_t>();
  std::vector<float> flat(n);
  std::ifstream in(dir / "weights.bin", std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open weights in " + dir.string());
  in.read(reinterpret_cast<char *>(flat.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw Error(ErrorCode::kSchemaMismatch, "truncated weights in " + dir.string());
  if (hex64(fnv1a64(flat.data(), n * sizeof(float))) !=
      manifest.at("weights_fnv1a64").get<std::string>()) {
    throw Error(ErrorCode::kSchemaMismatch, "weight hash mismatch in " + dir.string());
  }
  const auto &entries = manifest.at("params");
  if (entries.size() != params.size()) {
    throw Error(ErrorCode::kSchemaMismatch, "parameter count mismatch");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto &par = params[p];
    const auto &e = entries[p];
    if (e.at("name").get<std::string>() != par.name ||
        e.at("shape").get<std::vector<int>>() != par.value.shape) {
      throw Error(ErrorCode::kSchemaMismatch, "parameter " + par.name + " mismatch");
    }
    const auto off = e.at("offset").get<std::size_t>();
    if (off + par.value.size() > n) throw Error(ErrorCode::kSchemaMismatch, "bad offset");
    for (std::size_t i = 0; i < par.value.size(); ++i) {
      par.value.data[i] = static_cast<T>(flat[off + i]);
    }
  }
  return manifest;
}

}  // namespace metro::nn

#endif  // METRO_TENSOR_HPP
