#pragma once

// Decoder-only transformer over the 259-symbol byte vocabulary: learned token
// and position embeddings, pre-norm blocks (causal attention + GELU MLP), a
// final layer norm and an output projection tied to the token embedding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lkd/checkpoint.hpp"
#include "lkd/error.hpp"
#include "lkd/hash.hpp"
#include "lkd/lora_adapter.hpp"
#include "lkd/ops.hpp"
#include "lkd/rng.hpp"
#include "lkd/tensor.hpp"
#include "lkd/tokenizer.hpp"

namespace lkd {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t d_ff = 256;
  std::size_t vocab_size = kVocabSize;
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 0;

  static ModelConfig teacher(std::uint64_t seed = 0) { return {4, 128, 4, 512, kVocabSize, 128, seed}; }
  static ModelConfig student(std::uint64_t seed = 0) { return {2, 64, 2, 256, kVocabSize, 128, seed}; }

  void validate() const {
    if (n_layers < 1) throw ParameterError("n_layers must be >= 1");
    if (n_heads < 1) throw ParameterError("n_heads must be >= 1");
    if (d_model < 1 || d_model % n_heads != 0) {
      throw ParameterError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (d_ff < 1) throw ParameterError("d_ff must be >= 1");
    if (vocab_size != static_cast<std::size_t>(kVocabSize)) throw ParameterError("vocab_size must be 259");
    if (max_seq_len < 2) throw ParameterError("max_seq_len must be >= 2");
  }

  json to_json() const {
    return {{"n_layers", n_layers}, {"d_model", d_model}, {"n_heads", n_heads}, {"d_ff", d_ff},
            {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len}, {"seed", seed}};
  }

  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    try {
      c.n_layers = j.at("n_layers").get<std::size_t>();
      c.d_model = j.at("d_model").get<std::size_t>();
      c.n_heads = j.at("n_heads").get<std::size_t>();
      c.d_ff = j.at("d_ff").get<std::size_t>();
      c.vocab_size = j.at("vocab_size").get<std::size_t>();
      c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
      c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("model config: ") + e.what());
    }
    return c;
  }

  /// FNV-1a 64 of the canonical (sorted-key, compact) config JSON.
  std::uint64_t fingerprint() const { return fnv1a64(to_json().dump()); }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerWeights {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> wq, wk, wv, wo;  // [d_model x d_model], y = x W^T
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> w1, b1;  // [d_ff x d_model], [d_ff]
  Tensor<T> w2, b2;  // [d_model x d_ff], [d_model]
};

template <typename T>
struct Model {
  ModelConfig config;
  Tensor<T> tok_emb;  // [vocab x d_model], also the output projection
  Tensor<T> pos_emb;  // [max_seq_len x d_model]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> lnf_gain, lnf_bias;

  /// Stable, documented order; used for init, checkpoints and parameter audits.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      const auto& L = layers[i];
      out.emplace_back(p + "ln1.gain", L.ln1_gain);
      out.emplace_back(p + "ln1.bias", L.ln1_bias);
      out.emplace_back(p + "attn.wq", L.wq);
      out.emplace_back(p + "attn.wk", L.wk);
      out.emplace_back(p + "attn.wv", L.wv);
      out.emplace_back(p + "attn.wo", L.wo);
      out.emplace_back(p + "ln2.gain", L.ln2_gain);
      out.emplace_back(p + "ln2.bias", L.ln2_bias);
      out.emplace_back(p + "mlp.w1", L.w1);
      out.emplace_back(p + "mlp.b1", L.b1);
      out.emplace_back(p + "mlp.w2", L.w2);
      out.emplace_back(p + "mlp.b2", L.b2);
    }
    out.emplace_back("ln_f.gain", lnf_gain);
    out.emplace_back("ln_f.bias", lnf_bias);
    return out;
  }

  Tensor<T> parameter(const std::string& name) const {
    for (auto& [n, t] : named_parameters()) {
      if (n == name) return t;
    }
    throw LookupError("no parameter named '" + name + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  void set_trainable(bool on) const {
    for (auto& [name, t] : named_parameters()) t.set_requires_grad(on);
  }

  /// Deep copy; the result shares no storage with this model.
  Model clone() const { return cast<T>(); }

  template <typename U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    m.tok_emb = tok_emb.template cast<U>();
    m.pos_emb = pos_emb.template cast<U>();
    for (const auto& L : layers) {
      m.layers.push_back({L.ln1_gain.template cast<U>(), L.ln1_bias.template cast<U>(), L.wq.template cast<U>(),
                          L.wk.template cast<U>(), L.wv.template cast<U>(), L.wo.template cast<U>(),
                          L.ln2_gain.template cast<U>(), L.ln2_bias.template cast<U>(), L.w1.template cast<U>(),
                          L.b1.template cast<U>(), L.w2.template cast<U>(), L.b2.template cast<U>()});
    }
    m.lnf_gain = lnf_gain.template cast<U>();
    m.lnf_bias = lnf_bias.template cast<U>();
    return m;
  }
};

/// Deterministic from config.seed: matrices ~ Normal(0, 0.02), gains 1, biases 0.
template <typename T>
Model<T> init_model(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model, f = config.d_ff;
  Rng rng = Rng::substream(config.seed, "init");
  auto normal = [&](Shape shape) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, 0.02));
    return Tensor<T>(std::move(shape), std::move(v));
  };
  auto ones = [](std::size_t n) { return Tensor<T>::full({n}, T(1)); };
  auto zeros = [](std::size_t n) { return Tensor<T>::zeros({n}); };
  Model<T> m;
  m.config = config;
  m.tok_emb = normal({config.vocab_size, d});
  m.pos_emb = normal({config.max_seq_len, d});
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerWeights<T> L;
    L.ln1_gain = ones(d);
    L.ln1_bias = zeros(d);
    L.wq = normal({d, d});
    L.wk = normal({d, d});
    L.wv = normal({d, d});
    L.wo = normal({d, d});
    L.ln2_gain = ones(d);
    L.ln2_bias = zeros(d);
    L.w1 = normal({f, d});
    L.b1 = zeros(f);
    L.w2 = normal({d, f});
    L.b2 = zeros(d);
    m.layers.push_back(std::move(L));
  }
  m.lnf_gain = ones(d);
  m.lnf_bias = zeros(d);
  return m;
}

/// Teacher-forced batch: `inputs` and `targets` are [batch x seq] row-major.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<std::size_t> windows;  // corpus window index of each row, when known

  std::vector<std::uint8_t> target_mask() const {
    std::vector<std::uint8_t> keep(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) keep[i] = targets[i] != kPad;
    return keep;
  }
};

/// Throws ConformanceError when the adapter does not fit the model.
template <typename T>
void check_adapter_fits(const Model<T>& model, const LoraAdapter<T>& adapter) {
  if (adapter.backbone_fingerprint != 0 && adapter.backbone_fingerprint != model.config.fingerprint()) {
    throw ConformanceError("adapter was built for a different backbone config");
  }
  for (const auto& e : adapter.entries) {
    Tensor<T> w;
    try {
      w = model.parameter(e.target);
    } catch (const LookupError&) {
      throw ConformanceError("adapter target '" + e.target + "' does not exist in this model");
    }
    if (e.a.dim(1) != w.dim(1) || e.b.dim(0) != w.dim(0) || e.a.dim(0) != adapter.rank || e.b.dim(1) != adapter.rank) {
      throw ConformanceError("adapter '" + e.target + "' A" + shape_str(e.a.shape()) + " B" + shape_str(e.b.shape()) +
                             " does not fit " + shape_str(w.shape()));
    }
  }
}

/// Next-token logits [batch*seq x 259] for ids laid out [batch x seq].
template <typename T>
Tensor<T> forward_logits(Tape<T>& tape, const Model<T>& model, std::span<const int> ids, std::size_t batch,
                         std::size_t seq, const LoraAdapter<T>* adapter = nullptr) {
  const auto& cfg = model.config;
  if (seq == 0 || batch == 0 || ids.size() != batch * seq) throw ConformanceError("token ids do not form [batch x seq]");
  if (seq > cfg.max_seq_len) {
    throw ContractError("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  if (adapter) check_adapter_fits(model, *adapter);
  const double factor = adapter ? adapter->factor() : 0.0;
  auto proj = [&](const Tensor<T>& x, const Tensor<T>& w, const std::string& name) {
    if (adapter) {
      if (const auto* e = adapter->find(name)) return adapted_linear(tape, x, w, *e, factor);
    }
    return ops::linear(tape, x, w);
  };
  std::vector<int> positions(batch * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) positions[b * seq + t] = static_cast<int>(t);
  }
  Tensor<T> x = ops::add(tape, ops::embedding(tape, model.tok_emb, ids), ops::embedding<T>(tape, model.pos_emb, positions));
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& L = model.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".attn.";
    Tensor<T> h = ops::layer_norm(tape, x, L.ln1_gain, L.ln1_bias);
    Tensor<T> q = proj(h, L.wq, p + "wq");
    Tensor<T> k = proj(h, L.wk, p + "wk");
    Tensor<T> v = proj(h, L.wv, p + "wv");
    Tensor<T> a = ops::causal_attention(tape, q, k, v, batch, seq, cfg.n_heads);
    x = ops::add(tape, x, proj(a, L.wo, p + "wo"));
    Tensor<T> h2 = ops::layer_norm(tape, x, L.ln2_gain, L.ln2_bias);
    const std::string m = "layers." + std::to_string(i) + ".mlp.";
    Tensor<T> up = ops::gelu(tape, ops::add_row(tape, proj(h2, L.w1, m + "w1"), L.b1));
    x = ops::add(tape, x, ops::add_row(tape, proj(up, L.w2, m + "w2"), L.b2));
  }
  Tensor<T> hf = ops::layer_norm(tape, x, model.lnf_gain, model.lnf_bias);
  return ops::linear(tape, hf, model.tok_emb);
}

template <typename T>
Tensor<T> forward_logits(Tape<T>& tape, const Model<T>& model, const Batch& batch,
                         const LoraAdapter<T>* adapter = nullptr) {
  return forward_logits(tape, model, batch.inputs, batch.batch, batch.seq, adapter);
}

/// Inference convenience for a single sequence.
template <typename T>
Tensor<T> forward_logits(const Model<T>& model, const std::vector<int>& ids, const LoraAdapter<T>* adapter = nullptr) {
  Tape<T> tape = Tape<T>::no_grad();
  return forward_logits(tape, model, ids, 1, ids.size(), adapter);
}

/// Mean next-token cross-entropy over transitions whose target is not PAD.
template <typename T>
Tensor<T> sequence_loss(Tape<T>& tape, const Model<T>& model, const Batch& batch,
                        const LoraAdapter<T>* adapter = nullptr) {
  const auto keep = batch.target_mask();
  if (std::none_of(keep.begin(), keep.end(), [](std::uint8_t k) { return k != 0; })) {
    throw DegenerateInputError("batch has no non-PAD targets");
  }
  Tensor<T> logits = forward_logits(tape, model, batch, adapter);
  return ops::cross_entropy(tape, logits, batch.targets, keep);
}

/// Greedy (temperature 0, lowest id on ties) or seeded top-k sampling over a
/// probability row that already includes any temperature.
class TokenSampler {
 public:
  TokenSampler(double temperature, std::size_t top_k, std::uint64_t seed)
      : temperature_(temperature), top_k_(top_k), rng_(Rng::substream(seed, "sampling")) {
    if (temperature < 0.0) throw ParameterError("sample temperature must be >= 0");
  }

  double temperature() const { return temperature_; }
  bool greedy() const { return temperature_ == 0.0 || top_k_ == 1; }

  int pick(std::span<const double> probs) {
    if (greedy()) return argmax(probs);
    std::vector<std::size_t> order(probs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    const std::size_t k = (top_k_ == 0 || top_k_ > order.size()) ? order.size() : top_k_;
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += probs[order[i]];
    const double u = rng_.uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      acc += probs[order[i]];
      if (u < acc) return static_cast<int>(order[i]);
    }
    return static_cast<int>(order[k - 1]);
  }

  static int argmax(std::span<const double> probs) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i) {
      if (probs[i] > probs[best]) best = i;
    }
    return static_cast<int>(best);
  }

 private:
  double temperature_;
  std::size_t top_k_;
  Rng rng_;
};

/// Probability row for the last position of `logits`, softened by the sampler's
/// temperature (plain softmax when greedy).
template <typename T>
std::vector<double> last_row_distribution(const Tensor<T>& logits, double temperature) {
  const std::size_t V = logits.cols(), last = logits.rows() - 1;
  const double t = temperature > 0.0 ? temperature : 1.0;
  std::vector<double> p(V);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, static_cast<double>(logits.at(last, c)) / t);
  double s = 0.0;
  for (std::size_t c = 0; c < V; ++c) s += (p[c] = std::exp(static_cast<double>(logits.at(last, c)) / t - mx));
  for (auto& v : p) v /= s;
  return p;
}

/// Context window fed to the model: the trailing max_seq_len ids.
inline std::vector<int> context_window(const std::vector<int>& ids, std::size_t max_len) {
  if (ids.size() <= max_len) return ids;
  return std::vector<int>(ids.end() - static_cast<std::ptrdiff_t>(max_len), ids.end());
}

/// Continues `prompt` by up to max_new tokens; returns only the new ids (EOS excluded).
template <typename T>
std::vector<int> generate(const Model<T>& model, const std::vector<int>& prompt, std::size_t max_new,
                          double temperature, std::size_t top_k, std::uint64_t seed,
                          const LoraAdapter<T>* adapter = nullptr) {
  if (prompt.empty()) throw ContractError("generate needs a non-empty prompt");
  TokenSampler sampler(temperature, top_k, seed);
  std::vector<int> ids = prompt;
  std::vector<int> out;
  for (std::size_t step = 0; step < max_new; ++step) {
    const auto window = context_window(ids, model.config.max_seq_len);
    Tensor<T> logits = forward_logits(model, window, adapter);
    const int next = sampler.pick(last_row_distribution(logits, temperature));
    if (next == kEos) break;
    ids.push_back(next);
    out.push_back(next);
  }
  return out;
}

// Checkpoint I/O ------------------------------------------------------------

template <typename T>
std::vector<TensorRecord> model_records(const Model<T>& model, const std::string& prefix = {}) {
  std::vector<TensorRecord> out;
  for (auto& [name, t] : model.named_parameters()) out.push_back(to_record(prefix + name, t));
  return out;
}

/// Overwrites the model's parameters from records named prefix + parameter name.
template <typename T>
void assign_model_records(Model<T>& model, const LkdFile& file, const std::string& prefix = {}) {
  for (auto& [name, t] : model.named_parameters()) {
    const auto& rec = file.tensor(prefix + name);
    if (rec.shape != t.shape()) throw ConformanceError("tensor '" + name + "' has shape " + shape_str(rec.shape));
    std::copy(rec.values.begin(), rec.values.end(), t.data().begin());
  }
}

template <typename T>
std::string encode_model(const Model<T>& model, json extra = json::object()) {
  extra["config"] = model.config.to_json();
  extra["config_fingerprint"] = model.config.fingerprint();
  return encode_lkd("model", std::move(extra), model_records(model));
}

template <typename T>
void save_model(const Model<T>& model, const std::string& path, json extra = json::object()) {
  write_file_bytes(path, encode_model(model, std::move(extra)));
}

template <typename T>
Model<T> model_from_file(const LkdFile& file) {
  const auto cfg = ModelConfig::from_json(file.header.at("config"));
  Model<T> m = init_model<T>(cfg);
  assign_model_records(m, file);
  return m;
}

template <typename T>
Model<T> load_model(const std::string& path) {
  return model_from_file<T>(read_lkd(path, "model"));
}

}  // namespace lkd
