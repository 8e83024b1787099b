#pragma once

// The gradient audit: every tape primitive, the KD loss and the full
// transformer loss (with and without an adapter) against central differences
// in double precision.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "lkd/distill.hpp"
#include "lkd/grad_check.hpp"
#include "lkd/lora.hpp"
#include "lkd/model.hpp"
#include "lkd/ops.hpp"
#include "lkd/rng.hpp"

namespace lkd {

struct GradCase {
  std::string name;
  std::function<GradCheckReport(const GradCheckOptions&)> run;
};

struct GradCaseResult {
  std::string name;
  GradCheckReport report;
  double seconds = 0;
};

namespace detail {

inline Tensor<double> gaussian(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng = Rng::substream(seed, "grad_check");
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor<double>(std::move(shape), std::move(v));
}

using Binary = std::function<Tensor<double>(Tape<double>&, const Tensor<double>&, const Tensor<double>&)>;

inline GradCase binary_case(std::string name, Binary f, Shape a, Shape b, std::uint64_t seed) {
  return {name, [=](const GradCheckOptions& o) {
            auto x = gaussian(a, seed);
            auto y = gaussian(b, seed + 1);
            return grad_check([&](Tape<double>& t) { return f(t, x, y); }, {{"a", &x}, {"b", &y}}, o);
          }};
}

// Re-draws every weight at a scale where the loss surface is not flat.
inline void roughen(const std::vector<std::pair<std::string, Tensor<double>>>& params, std::uint64_t seed, double scale) {
  Rng rng = Rng::substream(seed, "grad_check");
  for (const auto& [name, t] : params) {
    Tensor<double> h = t;
    for (std::size_t i = 0; i < h.numel(); ++i) h[i] = rng.normal() * scale + (name.find("gain") != std::string::npos ? 1.0 : 0.0);
  }
}

inline Batch tiny_batch(std::size_t seq, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "grad_check");
  Batch b{2, seq, {}, {}, {}};
  for (std::size_t i = 0; i < 2 * seq; ++i) {
    b.inputs.push_back(kByteOffset + static_cast<int>(rng.below(256)));
    b.targets.push_back(kByteOffset + static_cast<int>(rng.below(256)));
  }
  b.targets[seq - 1] = kPad;  // one masked transition
  return b;
}

inline std::vector<NamedParam> as_params(const std::vector<std::pair<std::string, Tensor<double>>>& named,
                                         std::vector<Tensor<double>>& storage) {
  storage.clear();
  storage.reserve(named.size());
  for (const auto& [n, t] : named) storage.push_back(t);
  std::vector<NamedParam> out;
  for (std::size_t i = 0; i < named.size(); ++i) out.push_back({named[i].first, &storage[i]});
  return out;
}

}  // namespace detail

inline ModelConfig grad_check_model_config() { return {2, 8, 2, 16, kVocabSize, 8, 3}; }

inline std::vector<GradCase> gradient_suite() {
  using detail::binary_case;
  using T = Tape<double>;
  using X = const Tensor<double>&;
  const std::vector<int> ids{2, 0, 3, 2};
  std::vector<GradCase> cases{
      binary_case("matmul", [](T& t, X a, X b) { return ops::sum(t, ops::gelu(t, ops::matmul(t, a, b))); }, {3, 4}, {4, 5}, 10),
      binary_case("linear", [](T& t, X a, X b) { return ops::sum(t, ops::gelu(t, ops::linear(t, a, b))); }, {3, 4}, {5, 4}, 20),
      binary_case("add", [](T& t, X a, X b) { return ops::sum(t, ops::gelu(t, ops::add(t, a, b))); }, {2, 3}, {2, 3}, 30),
      binary_case("add_row", [](T& t, X a, X b) { return ops::sum(t, ops::gelu(t, ops::add_row(t, a, b))); }, {3, 4}, {4}, 40),
      binary_case("sub", [](T& t, X a, X b) { return ops::sum(t, ops::gelu(t, ops::sub(t, a, b))); }, {2, 3}, {2, 3}, 50),
      binary_case("mul_mean", [](T& t, X a, X b) { return ops::mean(t, ops::mul(t, a, b)); }, {2, 3}, {2, 3}, 60),
      binary_case("scale", [](T& t, X a, X b) { return ops::sum(t, ops::mul(t, ops::scale(t, a, 2.5), b)); }, {2, 3}, {2, 3}, 70),
      binary_case("gelu", [](T& t, X a, X b) { return ops::sum(t, ops::mul(t, ops::gelu(t, a), b)); }, {4, 5}, {4, 5}, 80),
      binary_case(
          "layer_norm",
          [](T& t, X a, X b) {
            auto y = ops::layer_norm(t, a, b, ops::scale(t, b, 0.5));
            return ops::sum(t, ops::mul(t, y, ops::gelu(t, y)));
          },
          {3, 5}, {5}, 90),
      binary_case(
          "embedding",
          [ids](T& t, X a, X b) { return ops::sum(t, ops::gelu(t, ops::linear(t, ops::embedding(t, a, ids), b))); }, {4, 3},
          {2, 3}, 100),
      binary_case(
          "reshape_transpose",
          [](T& t, X a, X b) {
            return ops::sum(t, ops::gelu(t, ops::matmul(t, ops::transpose(t, ops::reshape(t, a, {3, 2})), b)));
          },
          {2, 3}, {3, 2}, 110),
      binary_case("softmax", [](T& t, X a, X b) { return ops::sum(t, ops::mul(t, ops::softmax(t, a, 0.7), b)); }, {2, 5}, {2, 5},
                  120),
      binary_case(
          "kl_divergence", [](T& t, X a, X b) { return ops::kl_divergence(t, ops::softmax(t, a), ops::softmax(t, b, 2.0)); },
          {3, 4}, {3, 4}, 130),
      binary_case(
          "causal_attention",
          [](T& t, X a, X b) {
            auto q = ops::linear(t, a, b);
            auto k = ops::gelu(t, q);
            auto v = ops::scale(t, a, -0.7);
            return ops::sum(t, ops::mul(t, ops::causal_attention(t, q, k, v, 2, 3, 2), v));
          },
          {6, 4}, {4, 4}, 140),
  };

  cases.push_back({"cross_entropy", [](const GradCheckOptions& o) {
                     auto x = detail::gaussian({4, 6}, 150);
                     const std::vector<int> targets{1, 5, 0, 3};
                     const std::vector<std::uint8_t> keep{1, 1, 0, 1};
                     return grad_check([&](Tape<double>& t) { return ops::cross_entropy(t, x, targets, keep); }, {{"logits", &x}}, o);
                   }});
  cases.push_back({"kl_with_logits", [](const GradCheckOptions& o) {
                     Tape<double> nt = Tape<double>::no_grad();
                     const auto target = ops::softmax(nt, detail::gaussian({3, 5}, 160));
                     auto x = detail::gaussian({3, 5}, 161);
                     const std::vector<std::uint8_t> keep{1, 0, 1};
                     return grad_check(
                         [&](Tape<double>& t) { return ops::kl_with_logits(t, x, std::span<const double>(target.data()), 2.0, keep); },
                         {{"logits", &x}}, o);
                   }});
  cases.push_back({"kl_logits", [](const GradCheckOptions& o) {
                     const auto teacher = detail::gaussian({3, 5}, 170);
                     auto x = detail::gaussian({3, 5}, 171);
                     return grad_check(
                         [&](Tape<double>& t) { return ops::kl_logits(t, x, std::span<const double>(teacher.data()), 2.0); },
                         {{"logits", &x}}, o);
                   }});
  cases.push_back({"kd_loss", [](const GradCheckOptions& o) {
                     const auto teacher = detail::gaussian({4, 7}, 180);
                     auto x = detail::gaussian({4, 7}, 181);
                     const std::vector<int> targets{0, 6, 2, 3};
                     return grad_check(
                         [&](Tape<double>& t) {
                           return kd_loss<double>(t, x, std::span<const double>(teacher.data()), targets, KdConfig{}).total;
                         },
                         {{"student_logits", &x}}, o);
                   }});
  cases.push_back({"transformer_loss", [](const GradCheckOptions& o) {
                     auto model = init_model<double>(grad_check_model_config());
                     const auto named = model.named_parameters();
                     detail::roughen(named, 190, 0.3);
                     const auto batch = detail::tiny_batch(model.config.max_seq_len, 191);
                     std::vector<Tensor<double>> storage;
                     return grad_check([&](Tape<double>& t) { return sequence_loss(t, model, batch); },
                                       detail::as_params(named, storage), o);
                   }});
  cases.push_back({"transformer_loss_lora", [](const GradCheckOptions& o) {
                     auto model = init_model<double>(grad_check_model_config());
                     detail::roughen(model.named_parameters(), 200, 0.3);
                     auto adapter = attach(model, default_lora_targets(model.config), 2, 4.0, 201);
                     detail::roughen(adapter.named_parameters(), 202, 0.3);
                     const auto batch = detail::tiny_batch(model.config.max_seq_len, 203);
                     const LoraAdapter<double>* a = &adapter;
                     std::vector<Tensor<double>> storage;
                     return grad_check([&](Tape<double>& t) { return sequence_loss(t, model, batch, a); },
                                       detail::as_params(adapter.named_parameters(), storage), o);
                   }});
  return cases;
}

inline GradCheckOptions grad_suite_options() {
  GradCheckOptions o;
  o.order = 4;
  o.step = 1e-3;
  o.tolerance = 1e-5;
  o.scale_floor = 1e-6;
  return o;
}

inline std::vector<GradCaseResult> run_gradient_suite(const GradCheckOptions& opt = grad_suite_options(),
                                                      const std::function<void(const GradCaseResult&)>& on_case = {}) {
  std::vector<GradCaseResult> out;
  for (const auto& c : gradient_suite()) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCaseResult r{c.name, c.run(opt), 0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_case) on_case(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace lkd
