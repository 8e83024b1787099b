#pragma once

// Differentiable primitives. Each op computes its forward value eagerly and,
// when the tape is recording and some input requires a gradient, appends a
// record whose rule adds the vector-Jacobian product into the inputs' grads.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lkd/error.hpp"
#include "lkd/kernels.hpp"
#include "lkd/tensor.hpp"

namespace lkd::ops {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kLogFloor = 1e-12;
inline constexpr double kGeluC = 0.7978845608;
inline constexpr double kGeluA = 0.044715;

namespace detail {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) throw ConformanceError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ConformanceError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                           " differ");
  }
}

template <typename T>
void check_inputs(const Tape<T>& tape, OpKind kind, std::initializer_list<const Tensor<T>*> inputs) {
  if (!tape.debug_numerics()) return;
  for (const Tensor<T>* t : inputs) tape.check_input(kind, *t);
}

inline bool row_kept(std::span<const std::uint8_t> keep, std::size_t r) { return keep.empty() || keep[r] != 0; }

inline std::size_t kept_rows(std::span<const std::uint8_t> keep, std::size_t rows) {
  if (keep.empty()) return rows;
  std::size_t n = 0;
  for (auto k : keep) n += (k != 0);
  return n;
}

/// Row-wise softmax of logits/temperature into out (double accumulation).
template <typename T>
void softmax_rows(std::span<const T> logits, std::size_t cols, double temperature, std::span<T> out) {
  const std::size_t rows = logits.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.data() + r * cols;
    T* p = out.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(z[c]) / temperature);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(static_cast<double>(z[c]) / temperature - mx);
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = static_cast<T>(std::exp(static_cast<double>(z[c]) / temperature - mx) / sum);
    }
  }
}

}  // namespace detail

/// a[M,K] * b[K,N]
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ConformanceError("matmul inner dimensions differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  detail::check_inputs(tape, OpKind::kMatmul, {&a, &b});
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({M, N});
  kernels::gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data().data());
  tape.check_output(OpKind::kMatmul, out);
  if (tape.wants({&a, &b})) {
    tape.record(OpKind::kMatmul, {a, b}, out, [a, b, out, M, N, K]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) kernels::gemm_nt(M, K, N, g.data(), b.data().data(), a.grad().data());
      if (b.requires_grad()) kernels::gemm_tn(K, N, M, a.data().data(), g.data(), b.grad().data());
    });
  }
  return out;
}

/// x[N,in] * w[out,in]^T, the layout used for every weight matrix.
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w) {
  detail::require_matrix(x, "linear");
  detail::require_matrix(w, "linear");
  if (x.dim(1) != w.dim(1)) {
    throw ConformanceError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  detail::check_inputs(tape, OpKind::kLinear, {&x, &w});
  const std::size_t N = x.dim(0), in = x.dim(1), outd = w.dim(0);
  Tensor<T> out = Tensor<T>::zeros({N, outd});
  kernels::gemm_nt(N, outd, in, x.data().data(), w.data().data(), out.data().data());
  tape.check_output(OpKind::kLinear, out);
  if (tape.wants({&x, &w})) {
    tape.record(OpKind::kLinear, {x, w}, out, [x, w, out, N, in, outd]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) kernels::gemm_nn(N, in, outd, g.data(), w.data().data(), x.grad().data());
      if (w.requires_grad()) kernels::gemm_tn(outd, in, N, g.data(), x.data().data(), w.grad().data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  detail::check_inputs(tape, OpKind::kAdd, {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (tape.wants({&a, &b})) {
    tape.record(OpKind::kAdd, {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) accumulate_grad<T>(a, g);
      if (b.requires_grad()) accumulate_grad<T>(b, g);
    });
  }
  return out;
}

/// a[N,d] + row[d] broadcast over rows.
template <typename T>
Tensor<T> add_row(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& row) {
  if (row.numel() != a.cols()) {
    throw ConformanceError("add_row: row " + shape_str(row.shape()) + " does not match " + shape_str(a.shape()));
  }
  detail::check_inputs(tape, OpKind::kAddRow, {&a, &row});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t rows = a.rows(), cols = a.cols();
  auto o = out.data();
  auto x = a.data(), r = row.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) o[i * cols + j] = x[i * cols + j] + r[j];
  }
  if (tape.wants({&a, &row})) {
    tape.record(OpKind::kAddRow, {a, row}, out, [a, row, out, rows, cols]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) accumulate_grad<T>(a, g);
      if (row.requires_grad()) {
        auto gr = row.grad();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) gr[j] += g[i * cols + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  detail::check_inputs(tape, OpKind::kSub, {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  if (tape.wants({&a, &b})) {
    tape.record(OpKind::kSub, {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) accumulate_grad<T>(a, g);
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T s) {
  detail::check_inputs(tape, OpKind::kScale, {&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  if (tape.wants({&a})) {
    tape.record(OpKind::kScale, {a}, out, [a, out, s]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  detail::check_inputs(tape, OpKind::kMul, {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (tape.wants({&a, &b})) {
    tape.record(OpKind::kMul, {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

/// tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& a) {
  detail::check_inputs(tape, OpKind::kGelu, {&a});
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto x = a.data();
  const T c = static_cast<T>(kGeluC), k = static_cast<T>(kGeluA);
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T v = x[i];
    o[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  }
  tape.check_output(OpKind::kGelu, out);
  if (tape.wants({&a})) {
    tape.record(OpKind::kGelu, {a}, out, [a, out, c, k]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = x[i];
        const T t = std::tanh(c * (v + k * v * v * v));
        const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
        ga[i] += g[i] * d;
      }
    });
  }
  return out;
}

/// Per-row normalization over the last dimension with learned gain and bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.numel() != cols || bias.numel() != cols) {
    throw ConformanceError("layer_norm: affine " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                           " does not match " + shape_str(x.shape()));
  }
  detail::check_inputs(tape, OpKind::kLayerNorm, {&x, &gain, &bias});
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto in = x.data();
  auto o = out.data();
  auto gn = gain.data(), bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * cols;
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<T>(cols);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    inv_std[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (row[c] - mean) * inv;
      xhat[r * cols + c] = h;
      o[r * cols + c] = h * gn[c] + bs[c];
    }
  }
  tape.check_output(OpKind::kLayerNorm, out);
  if (tape.wants({&x, &gain, &bias})) {
    tape.record(OpKind::kLayerNorm, {x, gain, bias}, out,
                [x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols]() mutable {
                  auto g = out.grad();
                  auto gn = gain.data();
                  if (gain.requires_grad()) {
                    auto gg = gain.grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * xhat[r * cols + c];
                    }
                  }
                  if (bias.requires_grad()) {
                    auto gb = bias.grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                    }
                  }
                  if (x.requires_grad()) {
                    auto gx = x.grad();
                    std::vector<T> dxhat(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T mean_d = 0, mean_dx = 0;
                      for (std::size_t c = 0; c < cols; ++c) {
                        dxhat[c] = g[r * cols + c] * gn[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[r * cols + c];
                      }
                      mean_d /= static_cast<T>(cols);
                      mean_dx /= static_cast<T>(cols);
                      for (std::size_t c = 0; c < cols; ++c) {
                        gx[r * cols + c] += inv_std[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                      }
                    }
                  }
                });
  }
  return out;
}

/// Gathers rows of table[V,d] by id into [ids.size(), d].
template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const int> ids) {
  detail::require_matrix(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ConformanceError("embedding: empty id list");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
    }
  }
  Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
  auto o = out.data();
  auto tb = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tb.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
  }
  if (tape.wants({&table})) {
    tape.record(OpKind::kEmbedding, {table}, out,
                [table, out, idv = std::vector<int>(ids.begin(), ids.end()), d]() mutable {
                  auto g = out.grad();
                  auto gt = table.grad();
                  for (std::size_t i = 0; i < idv.size(); ++i) {
                    T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                    const T* src = g.data() + i * d;
                    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                  }
                });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ConformanceError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), a.values());
  if (tape.wants({&a})) {
    tape.record(OpKind::kReshape, {a}, out, [a, out]() mutable { accumulate_grad<T>(a, out.grad()); });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t R = a.dim(0), C = a.dim(1);
  Tensor<T> out(Shape{C, R}, kernels::detail::transpose_copy(R, C, a.data().data()));
  if (tape.wants({&a})) {
    tape.record(OpKind::kTranspose, {a}, out, [a, out, R, C]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += g[c * R + r];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (tape.wants({&a})) {
    tape.record(OpKind::kSum, {a}, out, [a, out]() mutable {
      const T g = out.grad()[0];
      for (T& v : a.grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (tape.wants({&a})) {
    tape.record(OpKind::kMean, {a}, out, [a, out, n]() mutable {
      const T g = out.grad()[0] / static_cast<T>(n);
      for (T& v : a.grad()) v += g;
    });
  }
  return out;
}

/// Row-wise softmax(logits / temperature) over the last dimension.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be positive, got " + std::to_string(temperature));
  detail::check_inputs(tape, OpKind::kSoftmax, {&logits});
  const std::size_t cols = logits.cols(), rows = logits.rows();
  Tensor<T> out = Tensor<T>::zeros(logits.shape());
  detail::softmax_rows<T>(logits.data(), cols, temperature, out.data());
  if (tape.wants({&logits})) {
    tape.record(OpKind::kSoftmax, {logits}, out, [logits, out, rows, cols, temperature]() mutable {
      auto g = out.grad();
      auto p = out.data();
      auto gl = logits.grad();
      const T inv_t = static_cast<T>(1.0 / temperature);
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * p[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          gl[r * cols + c] += p[r * cols + c] * (g[r * cols + c] - dot) * inv_t;
        }
      }
    });
  }
  return out;
}

/// Mean token-level cross-entropy of logits[N,V] against target ids. Rows with
/// keep[r] == 0 are excluded from both the sum and the count.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const std::uint8_t> keep = {}) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows) {
    throw ConformanceError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                           shape_str(logits.shape()));
  }
  if (!keep.empty() && keep.size() != rows) throw ConformanceError("cross_entropy: mask length mismatch");
  for (std::size_t r = 0; r < rows; ++r) {
    if (!detail::row_kept(keep, r)) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw IndexError("target id " + std::to_string(targets[r]) + " outside [0, " + std::to_string(cols) + ")");
    }
  }
  const std::size_t count = detail::kept_rows(keep, rows);
  if (count == 0) throw DegenerateInputError("cross_entropy: every position is masked");
  detail::check_inputs(tape, OpKind::kCrossEntropy, {&logits});
  std::vector<T> probs(logits.numel());
  detail::softmax_rows<T>(logits.data(), cols, 1.0, probs);
  auto z = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!detail::row_kept(keep, r)) continue;
    const T* row = z.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
    total += (mx + std::log(s)) - static_cast<double>(row[targets[r]]);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
  tape.check_output(OpKind::kCrossEntropy, out);
  if (tape.wants({&logits})) {
    tape.record(OpKind::kCrossEntropy, {logits}, out,
                [logits, out, probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end()),
                 kp = std::vector<std::uint8_t>(keep.begin(), keep.end()), rows, cols, count]() mutable {
                  const T g = out.grad()[0] / static_cast<T>(count);
                  auto gl = logits.grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (!detail::row_kept(kp, r)) continue;
                    for (std::size_t c = 0; c < cols; ++c) {
                      const T onehot = (static_cast<int>(c) == tg[r]) ? T(1) : T(0);
                      gl[r * cols + c] += g * (probs[r * cols + c] - onehot);
                    }
                  }
                });
  }
  return out;
}

/// Row-mean KL(p || q) over distributions; q (and p inside the log) floored at 1e-12.
template <typename T>
Tensor<T> kl_divergence(Tape<T>& tape, const Tensor<T>& p, const Tensor<T>& q) {
  detail::require_same_shape(p, q, "kl_divergence");
  detail::check_inputs(tape, OpKind::kKlDivergence, {&p, &q});
  const std::size_t rows = p.rows(), cols = p.cols();
  auto pv = p.data(), qv = q.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double sp = 0.0, sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      sp += pv[r * cols + c];
      sq += qv[r * cols + c];
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) {
      throw ParameterError("kl_divergence: row " + std::to_string(r) + " is not a probability vector");
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double a = pv[i];
    if (a <= 0.0) continue;
    total += a * (std::log(std::max(a, kLogFloor)) - std::log(std::max(static_cast<double>(qv[i]), kLogFloor)));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows)));
  if (tape.wants({&p, &q})) {
    tape.record(OpKind::kKlDivergence, {p, q}, out, [p, q, out, rows]() mutable {
      const double g = static_cast<double>(out.grad()[0]) / static_cast<double>(rows);
      auto pv = p.data(), qv = q.data();
      if (p.requires_grad()) {
        auto gp = p.grad();
        for (std::size_t i = 0; i < pv.size(); ++i) {
          const double a = pv[i];
          const double lq = std::log(std::max(static_cast<double>(qv[i]), kLogFloor));
          const double d = a > kLogFloor ? std::log(a) + 1.0 - lq : (a > 0.0 ? std::log(kLogFloor) - lq : 0.0);
          gp[i] += static_cast<T>(g * d);
        }
      }
      if (q.requires_grad()) {
        auto gq = q.grad();
        for (std::size_t i = 0; i < pv.size(); ++i) {
          const double b = qv[i];
          if (b > kLogFloor) gq[i] += static_cast<T>(-g * static_cast<double>(pv[i]) / b);
        }
      }
    });
  }
  return out;
}

/// Row-mean KL(target || softmax(logits / T)) where `target` rows are fixed
/// probability vectors (no gradient). Masked rows are skipped.
template <typename T>
Tensor<T> kl_with_logits(Tape<T>& tape, const Tensor<T>& logits, std::span<const T> target, double temperature,
                         std::span<const std::uint8_t> keep = {}) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  if (target.size() != logits.numel()) throw ConformanceError("kl_with_logits: target size mismatch");
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (!keep.empty() && keep.size() != rows) throw ConformanceError("kl_with_logits: mask length mismatch");
  const std::size_t count = detail::kept_rows(keep, rows);
  if (count == 0) throw DegenerateInputError("kl_with_logits: every position is masked");
  detail::check_inputs(tape, OpKind::kKlWithLogits, {&logits});
  auto z = logits.data();
  std::vector<T> q(logits.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = z.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(row[c]) / temperature);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(static_cast<double>(row[c]) / temperature - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) {
      const double logq = static_cast<double>(row[c]) / temperature - lse;
      q[r * cols + c] = static_cast<T>(std::exp(logq));
      if (!detail::row_kept(keep, r)) continue;
      const double p = target[r * cols + c];
      if (p > 0.0) total += p * (std::log(std::max(p, kLogFloor)) - std::max(logq, std::log(kLogFloor)));
    }
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
  tape.check_output(OpKind::kKlWithLogits, out);
  if (tape.wants({&logits})) {
    tape.record(OpKind::kKlWithLogits, {logits}, out,
                [logits, out, q = std::move(q), p = std::vector<T>(target.begin(), target.end()),
                 kp = std::vector<std::uint8_t>(keep.begin(), keep.end()), rows, cols, count,
                 temperature]() mutable {
                  const T g = static_cast<T>(static_cast<double>(out.grad()[0]) /
                                             (static_cast<double>(count) * temperature));
                  auto gl = logits.grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (!detail::row_kept(kp, r)) continue;
                    for (std::size_t c = 0; c < cols; ++c) gl[r * cols + c] += g * (q[r * cols + c] - p[r * cols + c]);
                  }
                });
  }
  return out;
}

namespace detail {

/// log softmax(row / temperature) in double.
template <typename T>
void log_softmax_row(const T* row, std::size_t cols, double temperature, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(row[c]) / temperature);
  double s = 0.0;
  for (std::size_t c = 0; c < cols; ++c) s += std::exp(static_cast<double>(row[c]) / temperature - mx);
  const double lse = mx + std::log(s);
  for (std::size_t c = 0; c < cols; ++c) out[c] = static_cast<double>(row[c]) / temperature - lse;
}

}  // namespace detail

/// Row-mean KL(softmax(target_logits/T) || softmax(logits/T)) over kept rows.
/// target_logits are constants. Both sides go through the same log-softmax, so
/// equal logits give exactly zero.
template <typename T>
Tensor<T> kl_logits(Tape<T>& tape, const Tensor<T>& logits, std::span<const T> target_logits, double temperature,
                    std::span<const std::uint8_t> keep = {}) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  if (target_logits.size() != logits.numel()) throw ConformanceError("kl_logits: target size mismatch");
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (!keep.empty() && keep.size() != rows) throw ConformanceError("kl_logits: mask length mismatch");
  const std::size_t count = detail::kept_rows(keep, rows);
  if (count == 0) throw DegenerateInputError("kl_logits: every position is masked");
  detail::check_inputs(tape, OpKind::kKlWithLogits, {&logits});
  auto z = logits.data();
  std::vector<T> q(logits.numel()), p(logits.numel());
  std::vector<double> lq(cols), lp(cols);
  const double floor = std::log(kLogFloor);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    detail::log_softmax_row(z.data() + r * cols, cols, temperature, lq.data());
    detail::log_softmax_row(target_logits.data() + r * cols, cols, temperature, lp.data());
    const bool kept = detail::row_kept(keep, r);
    for (std::size_t c = 0; c < cols; ++c) {
      const double pc = std::exp(lp[c]);
      q[r * cols + c] = static_cast<T>(std::exp(lq[c]));
      p[r * cols + c] = static_cast<T>(pc);
      if (kept && pc > 0.0) total += pc * (std::max(lp[c], floor) - std::max(lq[c], floor));
    }
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
  tape.check_output(OpKind::kKlWithLogits, out);
  if (tape.wants({&logits})) {
    tape.record(OpKind::kKlWithLogits, {logits}, out,
                [logits, out, q = std::move(q), p = std::move(p), kp = std::vector<std::uint8_t>(keep.begin(), keep.end()),
                 rows, cols, count, temperature]() mutable {
                  const T g = static_cast<T>(static_cast<double>(out.grad()[0]) /
                                             (static_cast<double>(count) * temperature));
                  auto gl = logits.grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (!detail::row_kept(kp, r)) continue;
                    for (std::size_t c = 0; c < cols; ++c) gl[r * cols + c] += g * (q[r * cols + c] - p[r * cols + c]);
                  }
                });
  }
  return out;
}

/// Multi-head causal self-attention over q, k, v laid out as [batch*seq, d].
/// Position t attends to positions <= t within its own sequence.
template <typename T>
Tensor<T> causal_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t batch, std::size_t seq, std::size_t heads) {
  detail::require_same_shape(q, k, "causal_attention");
  detail::require_same_shape(q, v, "causal_attention");
  const std::size_t d = q.cols();
  if (q.rows() != batch * seq) throw ConformanceError("causal_attention: rows != batch*seq");
  if (heads == 0 || d % heads != 0) throw ConformanceError("causal_attention: d not divisible by heads");
  detail::check_inputs(tape, OpKind::kCausalAttention, {&q, &k, &v});
  const std::size_t dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> out = Tensor<T>::zeros(q.shape());
  std::vector<T> probs(batch * heads * seq * seq, T(0));
  std::vector<T> qh(seq * dh), kh(seq * dh), vh(seq * dh), oh(seq * dh), s(seq * seq);
  auto gather = [&](std::span<const T> src, std::size_t b, std::size_t h, std::vector<T>& dst) {
    for (std::size_t t = 0; t < seq; ++t) std::copy_n(src.data() + (b * seq + t) * d + h * dh, dh, dst.data() + t * dh);
  };
  auto od = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      gather(q.data(), b, h, qh);
      gather(k.data(), b, h, kh);
      gather(v.data(), b, h, vh);
      std::fill(s.begin(), s.end(), T(0));
      kernels::gemm_nt(seq, seq, dh, qh.data(), kh.data(), s.data());
      T* P = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        T mx = s[i * seq] * scale;
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, s[i * seq + j] * scale);
        T total = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          P[i * seq + j] = std::exp(s[i * seq + j] * scale - mx);
          total += P[i * seq + j];
        }
        for (std::size_t j = 0; j <= i; ++j) P[i * seq + j] /= total;
      }
      std::fill(oh.begin(), oh.end(), T(0));
      kernels::gemm_nn(seq, dh, seq, P, vh.data(), oh.data());
      for (std::size_t t = 0; t < seq; ++t) std::copy_n(oh.data() + t * dh, dh, od.data() + (b * seq + t) * d + h * dh);
    }
  }
  tape.check_output(OpKind::kCausalAttention, out);
  if (tape.wants({&q, &k, &v})) {
    tape.record(OpKind::kCausalAttention, {q, k, v}, out,
                [q, k, v, out, probs = std::move(probs), batch, seq, heads, d, dh, scale]() mutable {
                  auto g = out.grad();
                  std::vector<T> qh(seq * dh), kh(seq * dh), vh(seq * dh), gh(seq * dh);
                  std::vector<T> dP(seq * seq), dq(seq * dh), dk(seq * dh), dv(seq * dh);
                  auto gather = [&](std::span<const T> src, std::size_t b, std::size_t h, std::vector<T>& dst) {
                    for (std::size_t t = 0; t < seq; ++t) {
                      std::copy_n(src.data() + (b * seq + t) * d + h * dh, dh, dst.data() + t * dh);
                    }
                  };
                  auto scatter_add = [&](const Tensor<T>& dst, std::size_t b, std::size_t h, const std::vector<T>& src) {
                    auto gd = dst.grad();
                    for (std::size_t t = 0; t < seq; ++t) {
                      T* row = gd.data() + (b * seq + t) * d + h * dh;
                      for (std::size_t c = 0; c < dh; ++c) row[c] += src[t * dh + c];
                    }
                  };
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t h = 0; h < heads; ++h) {
                      const T* P = probs.data() + (b * heads + h) * seq * seq;
                      gather(std::span<const T>(g.data(), g.size()), b, h, gh);
                      gather(v.data(), b, h, vh);
                      if (v.requires_grad()) {
                        std::fill(dv.begin(), dv.end(), T(0));
                        kernels::gemm_tn(seq, dh, seq, P, gh.data(), dv.data());
                        scatter_add(v, b, h, dv);
                      }
                      if (!q.requires_grad() && !k.requires_grad()) continue;
                      std::fill(dP.begin(), dP.end(), T(0));
                      kernels::gemm_nt(seq, seq, dh, gh.data(), vh.data(), dP.data());
                      // dS = P * (dP - rowsum(P * dP)) * scale, zero above the diagonal.
                      for (std::size_t i = 0; i < seq; ++i) {
                        T dot = 0;
                        for (std::size_t j = 0; j <= i; ++j) dot += P[i * seq + j] * dP[i * seq + j];
                        for (std::size_t j = 0; j <= i; ++j) dP[i * seq + j] = P[i * seq + j] * (dP[i * seq + j] - dot) * scale;
                        for (std::size_t j = i + 1; j < seq; ++j) dP[i * seq + j] = T(0);
                      }
                      if (q.requires_grad()) {
                        gather(k.data(), b, h, kh);
                        std::fill(dq.begin(), dq.end(), T(0));
                        kernels::gemm_nn(seq, dh, seq, dP.data(), kh.data(), dq.data());
                        scatter_add(q, b, h, dq);
                      }
                      if (k.requires_grad()) {
                        gather(q.data(), b, h, qh);
                        std::fill(dk.begin(), dk.end(), T(0));
                        kernels::gemm_tn(seq, dh, seq, dP.data(), qh.data(), dk.data());
                        scatter_add(k, b, h, dk);
                      }
                    }
                  }
                });
  }
  return out;
}

}  // namespace lkd::ops
