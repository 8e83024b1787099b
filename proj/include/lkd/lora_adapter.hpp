#pragma once

// Low-rank adapter data: per-target factors A [r x k] and B [d x r] such that
// the adapted map is W x + (scale / r) * B (A x).

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lkd/ops.hpp"
#include "lkd/tensor.hpp"

namespace lkd {

template <typename T>
struct LoraEntry {
  std::string target;
  Tensor<T> a;  // [r x k]
  Tensor<T> b;  // [d x r]
};

template <typename T>
struct LoraAdapter {
  std::size_t rank = 4;
  double scale = 8.0;  // alpha_L; the applied factor is scale / rank
  std::vector<LoraEntry<T>> entries;
  std::uint64_t backbone_fingerprint = 0;

  double factor() const { return scale / static_cast<double>(rank); }

  const LoraEntry<T>* find(const std::string& target) const {
    for (const auto& e : entries) {
      if (e.target == target) return &e;
    }
    return nullptr;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& e : entries) {
      out.emplace_back(e.target + ".A", e.a);
      out.emplace_back(e.target + ".B", e.b);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.a.numel() + e.b.numel();
    return n;
  }

  void set_trainable(bool on) const {
    for (const auto& e : entries) {
      e.a.set_requires_grad(on);
      e.b.set_requires_grad(on);
    }
  }

  LoraAdapter clone() const {
    LoraAdapter copy = *this;
    for (auto& e : copy.entries) {
      const bool ga = e.a.requires_grad(), gb = e.b.requires_grad();
      e.a = e.a.clone();
      e.b = e.b.clone();
      e.a.set_requires_grad(ga);
      e.b.set_requires_grad(gb);
    }
    return copy;
  }

  template <typename U>
  LoraAdapter<U> cast() const {
    LoraAdapter<U> out;
    out.rank = rank;
    out.scale = scale;
    out.backbone_fingerprint = backbone_fingerprint;
    for (const auto& e : entries) out.entries.push_back({e.target, e.a.template cast<U>(), e.b.template cast<U>()});
    return out;
  }
};

/// x W^T + factor * (x A^T) B^T, never forming B A.
template <typename T>
Tensor<T> adapted_linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const LoraEntry<T>& entry,
                         double factor) {
  if (entry.a.rank() != 2 || entry.b.rank() != 2 || entry.a.dim(1) != w.dim(1) || entry.b.dim(0) != w.dim(0) ||
      entry.a.dim(0) != entry.b.dim(1)) {
    throw ConformanceError("adapter '" + entry.target + "' A" + shape_str(entry.a.shape()) + " B" +
                           shape_str(entry.b.shape()) + " does not fit weight " + shape_str(w.shape()));
  }
  Tensor<T> base = ops::linear(tape, x, w);
  Tensor<T> low = ops::linear(tape, ops::linear(tape, x, entry.a), entry.b);
  return ops::add(tape, base, ops::scale(tape, low, static_cast<T>(factor)));
}

}  // namespace lkd
