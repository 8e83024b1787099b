#pragma once

// Attaching, applying, folding and persisting low-rank adapters over a frozen
// backbone. The applied update is W + (alpha_L / r) * B A.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "lkd/checkpoint.hpp"
#include "lkd/error.hpp"
#include "lkd/kernels.hpp"
#include "lkd/lora_adapter.hpp"
#include "lkd/model.hpp"
#include "lkd/rng.hpp"

namespace lkd {

inline constexpr std::size_t kDefaultLoraRank = 4;
inline constexpr double kDefaultLoraScale = 8.0;

/// Attention W_q and W_v of every layer.
inline std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    out.push_back("layers." + std::to_string(i) + ".attn.wq");
    out.push_back("layers." + std::to_string(i) + ".attn.wv");
  }
  return out;
}

/// New adapter with A ~ Normal(0, 0.02) (seeded) and B = 0. Clears every
/// backbone gradient flag; only the adapter factors are trainable.
template <typename T>
LoraAdapter<T> attach(const Model<T>& model, const std::vector<std::string>& targets, std::size_t rank, double scale,
                      std::uint64_t seed) {
  if (rank < 1) throw ParameterError("LoRA rank must be >= 1");
  if (targets.empty()) throw ParameterError("no LoRA targets given");
  LoraAdapter<T> adapter;
  adapter.rank = rank;
  adapter.scale = scale;
  adapter.backbone_fingerprint = model.config.fingerprint();
  Rng rng = Rng::substream(seed, "lora");
  for (const auto& name : targets) {
    const Tensor<T> w = model.parameter(name);
    if (w.rank() != 2) throw ParameterError("LoRA target '" + name + "' is not a matrix");
    const std::size_t d = w.dim(0), k = w.dim(1);
    if (rank >= std::min(d, k)) {
      throw ParameterError("rank " + std::to_string(rank) + " must be < min(d, k) = " + std::to_string(std::min(d, k)) +
                           " for '" + name + "'");
    }
    std::vector<T> a(rank * k);
    for (auto& v : a) v = static_cast<T>(rng.normal(0.0, 0.02));
    adapter.entries.push_back({name, Tensor<T>({rank, k}, std::move(a), true), Tensor<T>::zeros({d, rank}, true)});
  }
  model.set_trainable(false);
  return adapter;
}

/// Wx + (alpha_L / r) * B (A x) for a single vector.
template <typename T>
std::vector<T> adapted_matvec(const Tensor<T>& w, const LoraEntry<T>& entry, double factor, const std::vector<T>& x) {
  Tape<T> tape = Tape<T>::no_grad();
  Tensor<T> xt({1, x.size()}, x);
  Tensor<T> y = adapted_linear(tape, xt, w, entry, factor);
  return y.values();
}

namespace detail {

/// factor * B A as a dense [d x k] matrix.
template <typename T>
std::vector<T> dense_delta(const LoraEntry<T>& e, double factor) {
  const std::size_t d = e.b.dim(0), r = e.b.dim(1), k = e.a.dim(1);
  std::vector<T> delta(d * k, T(0));
  kernels::gemm_nn(d, k, r, e.b.data().data(), e.a.data().data(), delta.data());
  for (auto& v : delta) v = static_cast<T>(v * factor);
  return delta;
}

template <typename T>
Model<T> fold(const Model<T>& model, const LoraAdapter<T>& adapter, double sign) {
  check_adapter_fits(model, adapter);
  Model<T> out = model.clone();
  for (const auto& e : adapter.entries) {
    Tensor<T> w = out.parameter(e.target);
    const auto delta = dense_delta(e, adapter.factor());
    auto wd = w.data();
    for (std::size_t i = 0; i < wd.size(); ++i) wd[i] = static_cast<T>(wd[i] + sign * delta[i]);
  }
  return out;
}

}  // namespace detail

/// New weights with W <- W + (alpha_L / r) B A per target; `model` is untouched.
template <typename T>
Model<T> merge(const Model<T>& model, const LoraAdapter<T>& adapter) {
  return detail::fold(model, adapter, 1.0);
}

/// Subtracts the same delta; inverse of merge up to round-off.
template <typename T>
Model<T> unmerge(const Model<T>& model, const LoraAdapter<T>& adapter) {
  return detail::fold(model, adapter, -1.0);
}

namespace detail {

/// Orthonormalizes the columns of m [rows x cols] in place (two-pass modified
/// Gram-Schmidt). Columns that collapse numerically are zeroed.
inline void orthonormalize_columns(std::vector<double>& m, std::size_t rows, std::size_t cols) {
  std::vector<double> norms0(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < rows; ++i) s += m[i * cols + j] * m[i * cols + j];
    norms0[j] = std::sqrt(s);
  }
  for (std::size_t j = 0; j < cols; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t p = 0; p < j; ++p) {
        double dot = 0;
        for (std::size_t i = 0; i < rows; ++i) dot += m[i * cols + p] * m[i * cols + j];
        for (std::size_t i = 0; i < rows; ++i) m[i * cols + j] -= dot * m[i * cols + p];
      }
    }
    double s = 0;
    for (std::size_t i = 0; i < rows; ++i) s += m[i * cols + j] * m[i * cols + j];
    const double n = std::sqrt(s);
    if (n <= 1e-12 * std::max(norms0[j], 1e-300) || n == 0.0) {
      for (std::size_t i = 0; i < rows; ++i) m[i * cols + j] = 0.0;
    } else {
      for (std::size_t i = 0; i < rows; ++i) m[i * cols + j] /= n;
    }
  }
}

/// Singular values of a small dense matrix m [rows x cols] by one-sided Jacobi
/// on its rows, descending.
inline std::vector<double> jacobi_singular_values(std::vector<double> m, std::size_t rows, std::size_t cols) {
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < rows; ++p) {
      for (std::size_t q = p + 1; q < rows; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t c = 0; c < cols; ++c) {
          const double x = m[p * cols + c], y = m[q * cols + c];
          alpha += x * x;
          beta += y * y;
          gamma += x * y;
        }
        if (gamma == 0.0) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(std::max(alpha * beta, 1e-300)));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t), sn = cs * t;
        for (std::size_t c = 0; c < cols; ++c) {
          const double x = m[p * cols + c], y = m[q * cols + c];
          m[p * cols + c] = cs * x - sn * y;
          m[q * cols + c] = sn * x + cs * y;
        }
      }
    }
    if (off < 1e-15) break;
  }
  std::vector<double> sv(rows);
  for (std::size_t p = 0; p < rows; ++p) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += m[p * cols + c] * m[p * cols + c];
    sv[p] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

}  // namespace detail

/// Top r+2 singular values of (alpha_L / r) B A by seeded randomized subspace
/// iteration (20 iterations, oversampling 4), computed in double precision.
template <typename T>
std::vector<double> adapter_spectrum(const LoraEntry<T>& entry, double factor, std::uint64_t seed = 0) {
  const std::size_t d = entry.b.dim(0), r = entry.b.dim(1), k = entry.a.dim(1);
  const std::size_t want = r + 2;
  const std::size_t width = std::min(want + 4, std::min(d, k));
  std::vector<double> M(d * k, 0.0);
  {
    std::vector<double> bd(entry.b.data().begin(), entry.b.data().end());
    std::vector<double> ad(entry.a.data().begin(), entry.a.data().end());
    kernels::gemm_nn(d, k, r, bd.data(), ad.data(), M.data());
    for (auto& v : M) v *= factor;
  }
  Rng rng = Rng::substream(seed, "spectrum");
  std::vector<double> omega(k * width);
  for (auto& v : omega) v = rng.normal();
  std::vector<double> Y(d * width, 0.0), Z(k * width, 0.0);
  kernels::gemm_nn(d, width, k, M.data(), omega.data(), Y.data());
  for (int it = 0; it < 20; ++it) {
    detail::orthonormalize_columns(Y, d, width);
    std::fill(Z.begin(), Z.end(), 0.0);
    kernels::gemm_tn(k, width, d, M.data(), Y.data(), Z.data());
    detail::orthonormalize_columns(Z, k, width);
    std::fill(Y.begin(), Y.end(), 0.0);
    kernels::gemm_nn(d, width, k, M.data(), Z.data(), Y.data());
  }
  detail::orthonormalize_columns(Y, d, width);
  // Project: small = Q^T M  [width x k]
  std::vector<double> small(width * k, 0.0);
  kernels::gemm_tn(width, k, d, Y.data(), M.data(), small.data());
  auto sv = detail::jacobi_singular_values(std::move(small), width, k);
  sv.resize(want, 0.0);
  return sv;
}

// Persistence -------------------------------------------------------------

template <typename T>
std::string encode_adapter(const LoraAdapter<T>& adapter, const ModelConfig& backbone, json extra = json::object()) {
  std::vector<std::string> targets;
  std::vector<TensorRecord> records;
  for (const auto& e : adapter.entries) {
    targets.push_back(e.target);
    records.push_back(to_record(e.target + ".A", e.a));
    records.push_back(to_record(e.target + ".B", e.b));
  }
  extra["rank"] = adapter.rank;
  extra["lora_scale"] = adapter.scale;
  extra["targets"] = targets;
  extra["config"] = backbone.to_json();
  extra["config_fingerprint"] = adapter.backbone_fingerprint;
  return encode_lkd("adapter", std::move(extra), records);
}

template <typename T>
void save_adapter(const LoraAdapter<T>& adapter, const ModelConfig& backbone, const std::string& path,
                  json extra = json::object()) {
  write_file_bytes(path, encode_adapter(adapter, backbone, std::move(extra)));
}

template <typename T>
LoraAdapter<T> adapter_from_file(const LkdFile& file) {
  LoraAdapter<T> adapter;
  try {
    const auto& h = file.header;
    adapter.rank = h.at("rank").get<std::size_t>();
    adapter.scale = h.at("lora_scale").get<double>();
    adapter.backbone_fingerprint = h.at("config_fingerprint").get<std::uint64_t>();
    for (const auto& name : h.at("targets").get<std::vector<std::string>>()) {
      adapter.entries.push_back({name, from_record<T>(file.tensor(name + ".A")), from_record<T>(file.tensor(name + ".B"))});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("adapter header: ") + e.what());
  }
  return adapter;
}

template <typename T>
LoraAdapter<T> load_adapter(const std::string& path) {
  return adapter_from_file<T>(read_lkd(path, "adapter"));
}

}  // namespace lkd
