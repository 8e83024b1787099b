#pragma once

// Dense row-major tensors and the reverse-mode tape that records operations on
// them. A Tensor is a shared handle: copies alias the same storage, which is
// what lets tape records refer back to their inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lkd/error.hpp"

namespace lkd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tensor {
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ParameterError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ConformanceError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                             " elements but " + std::to_string(data.size()) + " were given");
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }
  bool is_scalar() const { return numel() == 1; }

  /// Rows/cols when viewed as a matrix whose last dimension is the row length.
  std::size_t cols() const { return s_->shape.back(); }
  std::size_t rows() const { return numel() / cols(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  std::vector<T>& values() { return s_->data; }
  const std::vector<T>& values() const { return s_->data; }
  T item() const {
    if (!is_scalar()) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  // Gradient state lives in the shared storage; const handles may accumulate into it.
  void set_requires_grad(bool on) const { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient accumulator, allocated (zero-filled) on first use.
  std::span<T> grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }
  std::span<const T> grad_view() const { return s_->grad; }
  void zero_grad() const { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
  void clear_grad() const { std::vector<T>().swap(s_->grad); }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  /// Deep copy without gradient state.
  Tensor clone() const { return Tensor(s_->shape, s_->data, false); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(s_->data.begin(), s_->data.end());
    return Tensor<U>(s_->shape, std::move(out), s_->requires_grad);
  }

  /// Same storage, new shape (element count must match).
  void reshape_in_place(Shape shape) {
    if (shape_numel(shape) != numel()) {
      throw ConformanceError("cannot reshape " + shape_str(s_->shape) + " to " + shape_str(shape));
    }
    s_->shape = std::move(shape);
  }

  bool all_finite() const {
    return std::all_of(s_->data.begin(), s_->data.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  std::shared_ptr<Storage> s_;
};

enum class OpKind {
  kMatmul,
  kLinear,
  kAdd,
  kAddRow,
  kSub,
  kScale,
  kMul,
  kGelu,
  kLayerNorm,
  kEmbedding,
  kReshape,
  kTranspose,
  kMean,
  kSum,
  kSoftmax,
  kCrossEntropy,
  kKlDivergence,
  kKlWithLogits,
  kCausalAttention,
  kCustom,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kLinear: return "linear";
    case OpKind::kAdd: return "add";
    case OpKind::kAddRow: return "add_row";
    case OpKind::kSub: return "sub";
    case OpKind::kScale: return "scale";
    case OpKind::kMul: return "mul";
    case OpKind::kGelu: return "gelu";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kKlDivergence: return "kl_divergence";
    case OpKind::kKlWithLogits: return "kl_with_logits";
    case OpKind::kCausalAttention: return "causal_attention";
    case OpKind::kCustom: return "custom";
  }
  return "?";
}

/// Wengert list of recorded operations. Records are appended in execution order,
/// so every record's inputs were produced by earlier records (or are leaves).
template <typename T>
class Tape {
 public:
  struct Record {
    OpKind kind;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Tape() = default;
  explicit Tape(bool recording, bool debug_numerics = false)
      : recording_(recording), debug_numerics_(debug_numerics) {}

  /// A tape that never records; ops run forward only.
  static Tape no_grad() { return Tape(false); }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  bool debug_numerics() const { return debug_numerics_; }
  void set_debug_numerics(bool on) { debug_numerics_ = on; }

  /// True when an op over `inputs` must be recorded.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
  }

  void check_input(OpKind kind, const Tensor<T>& t) const {
    if (debug_numerics_ && !t.all_finite()) {
      throw NumericError(std::string("non-finite input to ") + op_name(kind));
    }
  }

  void check_output(OpKind kind, const Tensor<T>& t) const {
    if (debug_numerics_ && !t.all_finite()) {
      throw NumericError(std::string("non-finite output from ") + op_name(kind));
    }
  }

  void record(OpKind kind, std::vector<Tensor<T>> inputs, Tensor<T> output, std::function<void()> backward) {
    if (consumed_) throw ContractError("tape already ran backward; reset() before recording again");
    output.set_requires_grad(true);
    records_.push_back(Record{kind, std::move(inputs), std::move(output), std::move(backward)});
  }

  /// Seeds d(root)/d(root) = 1 and runs every record's rule in reverse order.
  void backward(Tensor<T> root) {
    if (!root.defined() || !root.is_scalar()) {
      throw ContractError("backward() needs a scalar root, got " +
                          (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
    }
    if (consumed_) throw ContractError("backward() already ran on this tape; call reset()");
    consumed_ = true;
    if (!root.requires_grad()) return;
    root.grad()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
  }

  /// Drops all records (and with them any references to intermediate values).
  void reset() {
    records_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }

 private:
  std::vector<Record> records_;
  bool recording_ = true;
  bool debug_numerics_ = false;
  bool consumed_ = false;
};

/// Adds `src` into the gradient of `dst` (allocating on first use).
template <typename T>
void accumulate_grad(const Tensor<T>& dst, std::span<const T> src) {
  auto g = dst.grad();
  for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i];
}

}  // namespace lkd
