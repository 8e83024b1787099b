#pragma once

// Corpus windows, Adam, and the epoch loop with validation, per-epoch
// checkpoints, resume and early-stopping selection.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "lkd/checkpoint.hpp"
#include "lkd/error.hpp"
#include "lkd/model.hpp"
#include "lkd/rng.hpp"
#include "lkd/tensor.hpp"
#include "lkd/tokenizer.hpp"

namespace lkd {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  std::size_t seq_len = 128;
  std::size_t epochs = 20;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double val_fraction = 0.1;
  std::uint64_t seed = 42;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const {
    if (!(learning_rate > 0)) throw ParameterError("learning_rate must be > 0");
    if (!(val_fraction > 0 && val_fraction < 1)) throw ParameterError("val_fraction must be in (0, 1)");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (seq_len < 1) throw ParameterError("seq_len must be >= 1");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
      throw ParameterError("Adam betas must be in [0, 1)");
    }
    if (!(adam_eps > 0)) throw ParameterError("adam_eps must be > 0");
  }

  json to_json() const {
    return {{"learning_rate", learning_rate}, {"batch_size", batch_size}, {"seq_len", seq_len},
            {"epochs", epochs},               {"adam_beta1", adam_beta1}, {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},           {"val_fraction", val_fraction}, {"seed", seed},
            {"grad_clip_norm", grad_clip_norm}};
  }

  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    try {
      c.learning_rate = j.at("learning_rate").get<double>();
      c.batch_size = j.at("batch_size").get<std::size_t>();
      c.seq_len = j.at("seq_len").get<std::size_t>();
      c.epochs = j.at("epochs").get<std::size_t>();
      c.adam_beta1 = j.at("adam_beta1").get<double>();
      c.adam_beta2 = j.at("adam_beta2").get<double>();
      c.adam_eps = j.at("adam_eps").get<double>();
      c.val_fraction = j.at("val_fraction").get<double>();
      c.seed = j.at("seed").get<std::uint64_t>();
      c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("train config: ") + e.what());
    }
    return c;
  }
};

// Corpus ------------------------------------------------------------------

struct CorpusStats {
  std::size_t total_tokens = 0;
  std::size_t unique_tokens = 0;
};

/// Counts over the byte ids of `text` (no BOS).
inline CorpusStats corpus_stats(std::string_view text) {
  std::array<bool, kVocabSize> seen{};
  CorpusStats s;
  for (int id : encode_bytes(text)) {
    ++s.total_tokens;
    if (!seen[static_cast<std::size_t>(id)]) {
      seen[static_cast<std::size_t>(id)] = true;
      ++s.unique_tokens;
    }
  }
  return s;
}

/// Number of disjoint seq_len+1 windows; the remainder is dropped.
inline std::size_t window_count(std::size_t n_tokens, std::size_t seq_len) { return n_tokens / (seq_len + 1); }

struct WindowSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// The last val_fraction of windows (at least one) validate; the rest train.
inline WindowSplit split_windows(std::size_t n_windows, double val_fraction) {
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n_windows))));
  if (n_windows < 2 || n_val >= n_windows) {
    throw DegenerateInputError("corpus yields " + std::to_string(n_windows) +
                               " windows; need at least one train and one validation window");
  }
  WindowSplit s;
  for (std::size_t w = 0; w < n_windows; ++w) (w < n_windows - n_val ? s.train : s.val).push_back(w);
  return s;
}

/// Rows are windows of the token stream; targets are inputs shifted by one.
inline Batch window_batch(std::span<const int> stream, std::span<const std::size_t> windows, std::size_t seq_len) {
  Batch b;
  b.batch = windows.size();
  b.seq = seq_len;
  b.inputs.reserve(windows.size() * seq_len);
  b.targets.reserve(windows.size() * seq_len);
  for (std::size_t w : windows) {
    const std::size_t start = w * (seq_len + 1);
    if (start + seq_len + 1 > stream.size()) throw IndexError("window " + std::to_string(w) + " runs past the stream");
    b.inputs.insert(b.inputs.end(), stream.begin() + static_cast<std::ptrdiff_t>(start),
                    stream.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
    b.targets.insert(b.targets.end(), stream.begin() + static_cast<std::ptrdiff_t>(start + 1),
                     stream.begin() + static_cast<std::ptrdiff_t>(start + seq_len + 1));
  }
  b.windows.assign(windows.begin(), windows.end());
  return b;
}

/// Shuffled batches over a fixed set of windows. Epoch e (1-based) draws its
/// order from the ("shuffle", e) sub-stream, so any epoch can be rebuilt alone.
class BatchPlan {
 public:
  BatchPlan(std::vector<int> stream, std::vector<std::size_t> windows, std::size_t seq_len, std::size_t batch_size,
            std::uint64_t seed)
      : stream_(std::move(stream)), windows_(std::move(windows)), seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
    if (batch_size_ < 1) throw ParameterError("batch_size must be >= 1");
    if (windows_.empty()) throw DegenerateInputError("no windows to batch");
  }

  std::size_t batches_per_epoch() const { return (windows_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<std::size_t>& windows() const { return windows_; }
  std::span<const int> stream() const { return stream_; }

  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    Rng rng = Rng::substream(seed_, "shuffle", epoch);
    std::vector<std::size_t> order = windows_;
    rng.shuffle(order.begin(), order.end());
    return order;
  }

  /// Batches of epoch `epoch` in order; the final batch may be partial.
  std::vector<Batch> epoch(std::size_t epoch) const { return chunk(epoch_order(epoch)); }

  /// Windows in their natural order (validation).
  std::vector<Batch> sequential() const { return chunk(windows_); }

 private:
  std::vector<Batch> chunk(const std::vector<std::size_t>& order) const {
    std::vector<Batch> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size_) {
      const std::size_t n = std::min(batch_size_, order.size() - i);
      out.push_back(window_batch(stream_, std::span(order).subspan(i, n), seq_len_));
    }
    return out;
  }

  std::vector<int> stream_;
  std::vector<std::size_t> windows_;
  std::size_t seq_len_, batch_size_;
  std::uint64_t seed_;
};

/// Every disjoint window of the stream, shuffled per epoch.
inline BatchPlan make_batches(std::vector<int> token_stream, std::size_t seq_len, std::size_t batch_size,
                              std::uint64_t seed) {
  const std::size_t n = window_count(token_stream.size(), seq_len);
  if (n == 0) {
    throw DegenerateInputError("token stream of " + std::to_string(token_stream.size()) +
                               " is shorter than one window of " + std::to_string(seq_len + 1));
  }
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  return BatchPlan(std::move(token_stream), std::move(all), seq_len, batch_size, seed);
}

// Optimizer ---------------------------------------------------------------

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m, v;
};

/// One bias-corrected Adam update from each parameter's accumulated gradient
/// (a parameter without a gradient counts as g = 0).
template <typename T>
void adam_step(const NamedTensors<T>& params, AdamState<T>& state, const TrainConfig& cfg) {
  if (state.m.empty() && state.v.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ConformanceError("optimizer state holds " + std::to_string(state.m.size()) + " tensors, parameters " +
                           std::to_string(params.size()));
  }
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& p = params[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.numel() || v.size() != p.numel()) {
      throw ConformanceError("optimizer state for '" + params[i].first + "' does not match its shape");
    }
    auto g = p.grad_view();
    auto x = const_cast<Tensor<T>&>(p).data();
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1, vhat = vj / c2;
      x[j] = static_cast<T>(x[j] - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

template <typename T>
double global_grad_norm(const NamedTensors<T>& params) {
  double s = 0;
  for (const auto& [name, p] : params) {
    for (T g : p.grad_view()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

/// Rescales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before clipping.
template <typename T>
double clip_grad_norm(const NamedTensors<T>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& [name, p] : params) {
      for (T& g : p.grad()) g = static_cast<T>(g * s);
    }
  }
  return norm;
}

/// Adapter factors when an adapter is present, otherwise every model weight.
template <typename T>
NamedTensors<T> trainable_parameters(const Model<T>& model, const LoraAdapter<T>* adapter) {
  return adapter ? adapter->named_parameters() : model.named_parameters();
}

// Loop --------------------------------------------------------------------

struct StepLoss {
  Tensor<float> total;
  std::vector<std::pair<std::string, double>> parts;  // named components, e.g. ce / distill
};

/// Builds the loss of one batch on the tape (which may be a no-grad tape).
using LossFn = std::function<StepLoss(Tape<float>&, const Batch&)>;

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double total = 0;
  std::vector<std::pair<std::string, double>> parts;
  double grad_norm = 0;  // before clipping
};

struct EvalResult {
  double loss = 0;
  std::vector<std::pair<std::string, double>> parts;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  EvalResult val;
  double wall_ms = 0;  // not part of any byte-compared artifact
};

struct TrainHistory {
  EvalResult initial_val;  // before the first update
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

inline json parts_json(const std::vector<std::pair<std::string, double>>& parts) {
  json j = json::object();
  for (const auto& [k, v] : parts) j[k] = v;
  return j;
}

inline std::vector<std::pair<std::string, double>> parts_from_json(const json& j) {
  std::vector<std::pair<std::string, double>> out;
  for (auto it = j.begin(); it != j.end(); ++it) out.emplace_back(it.key(), it.value().get<double>());
  return out;
}

inline json to_json(const TrainHistory& h) {
  json steps = json::array(), epochs = json::array();
  for (const auto& s : h.steps) {
    json r = {{"step", s.step}, {"epoch", s.epoch}, {"total", s.total}, {"grad_norm", s.grad_norm}};
    for (const auto& [k, v] : s.parts) r[k] = v;
    steps.push_back(std::move(r));
  }
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val.loss},
                      {"val_parts", parts_json(e.val.parts)}});
  }
  return {{"initial_val_loss", h.initial_val.loss},
          {"initial_val_parts", parts_json(h.initial_val.parts)},
          {"steps", std::move(steps)},
          {"epochs", std::move(epochs)}};
}

inline TrainHistory history_from_json(const json& j) {
  TrainHistory h;
  try {
    h.initial_val = {j.at("initial_val_loss").get<double>(), parts_from_json(j.at("initial_val_parts"))};
    for (const auto& s : j.at("steps")) {
      StepRecord r{s.at("step").get<std::size_t>(), s.at("epoch").get<std::size_t>(), s.at("total").get<double>(), {},
                   s.at("grad_norm").get<double>()};
      for (auto it = s.begin(); it != s.end(); ++it) {
        if (it.key() != "step" && it.key() != "epoch" && it.key() != "total" && it.key() != "grad_norm") {
          r.parts.emplace_back(it.key(), it.value().get<double>());
        }
      }
      h.steps.push_back(std::move(r));
    }
    for (const auto& e : j.at("epochs")) {
      h.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                          {e.at("val_loss").get<double>(), parts_from_json(e.at("val_parts"))}, 0.0});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("training history: ") + e.what());
  }
  return h;
}

/// Token-weighted mean loss (and components) over the batches, no gradients.
inline EvalResult evaluate(const LossFn& loss_fn, const std::vector<Batch>& batches) {
  EvalResult out;
  double weight = 0;
  std::vector<double> sums;
  for (const auto& b : batches) {
    Tape<float> tape = Tape<float>::no_grad();
    StepLoss l = loss_fn(tape, b);
    const auto keep = b.target_mask();
    const double w = static_cast<double>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
    out.loss += w * l.total.item();
    if (sums.empty()) {
      sums.assign(l.parts.size(), 0.0);
      for (const auto& [k, v] : l.parts) out.parts.emplace_back(k, 0.0);
    }
    for (std::size_t i = 0; i < l.parts.size() && i < sums.size(); ++i) sums[i] += w * l.parts[i].second;
    weight += w;
  }
  if (weight == 0) throw DegenerateInputError("validation set has no targets");
  out.loss /= weight;
  for (std::size_t i = 0; i < sums.size(); ++i) out.parts[i].second = sums[i] / weight;
  return out;
}

struct CheckpointInfo {
  std::size_t epoch = 0;
  double val_loss = 0;
  double train_loss = 0;
  std::string path;  // empty when kept in memory only
};

/// Argmin validation loss; ties go to the earliest epoch.
inline std::size_t early_stop_select(std::span<const CheckpointInfo> checkpoints) {
  if (checkpoints.empty()) throw ContractError("early stopping needs at least one checkpoint");
  std::size_t best = 0;
  for (std::size_t i = 1; i < checkpoints.size(); ++i) {
    if (checkpoints[i].val_loss < checkpoints[best].val_loss) best = i;
  }
  return best;
}

/// Training checkpoint: parameters, Adam moments and the history so far.
template <typename T>
std::string encode_checkpoint(const NamedTensors<T>& params, const AdamState<T>& state, std::size_t epoch,
                              const TrainHistory& history, const TrainConfig& cfg, json extra = json::object()) {
  std::vector<TensorRecord> records;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    records.push_back(to_record("param/" + name, p));
    const bool has_state = i < state.m.size();
    records.push_back({"adam.m/" + name, p.shape(),
                       has_state ? std::vector<float>(state.m[i].begin(), state.m[i].end()) : std::vector<float>(p.numel())});
    records.push_back({"adam.v/" + name, p.shape(),
                       has_state ? std::vector<float>(state.v[i].begin(), state.v[i].end()) : std::vector<float>(p.numel())});
  }
  const auto& er = history.epochs.back();
  Rng next = Rng::substream(cfg.seed, "shuffle", epoch + 1);
  json rng_state = json::array();
  for (auto w : next.state()) rng_state.push_back(w);
  extra["epoch"] = epoch;
  extra["adam_step"] = state.step;
  extra["val_loss"] = er.val.loss;
  extra["train_loss"] = er.train_loss;
  extra["train_config"] = cfg.to_json();
  extra["history"] = to_json(history);
  extra["rng"] = {{"stream", "shuffle"}, {"next_epoch", epoch + 1}, {"state", std::move(rng_state)}};
  return encode_lkd("checkpoint", std::move(extra), records);
}

/// Loads parameters (and optimizer moments, when `state` is given) by name.
template <typename T>
void restore_checkpoint(const LkdFile& file, const NamedTensors<T>& params, AdamState<T>* state = nullptr) {
  if (state) {
    state->m.clear();
    state->v.clear();
    state->step = file.header.at("adam_step").template get<std::size_t>();
  }
  for (const auto& [name, p] : params) {
    const auto& rec = file.tensor("param/" + name);
    if (rec.shape != p.shape()) {
      throw ConformanceError("checkpoint tensor '" + name + "' is " + shape_str(rec.shape) + ", expected " +
                             shape_str(p.shape()));
    }
    auto x = const_cast<Tensor<T>&>(p).data();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<T>(rec.values[i]);
    if (state) {
      const auto& m = file.tensor("adam.m/" + name).values;
      const auto& v = file.tensor("adam.v/" + name).values;
      state->m.emplace_back(m.begin(), m.end());
      state->v.emplace_back(v.begin(), v.end());
    }
  }
}

struct TrainOptions {
  std::string out_dir;             // per-epoch checkpoint files and history.jsonl; empty keeps them in memory
  std::string checkpoint_prefix = "epoch";
  json header = json::object();    // echoed into every checkpoint header
  std::optional<LkdFile> resume;   // continue after this checkpoint's epoch
  std::size_t stop_after_epoch = 0;  // non-zero: return early (simulated interruption)
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  TrainHistory history;
  std::vector<CheckpointInfo> checkpoints;
  std::vector<std::string> checkpoint_bytes;  // per checkpoint; filled when out_dir is empty
  std::size_t selected = 0;                   // index into checkpoints
  std::vector<std::string> trained;           // names handed to the optimizer

  const CheckpointInfo& selected_checkpoint() const { return checkpoints.at(selected); }

  /// Bytes of checkpoint i, from memory or disk.
  std::string bytes(std::size_t i) const {
    if (i < checkpoint_bytes.size() && !checkpoint_bytes[i].empty()) return checkpoint_bytes[i];
    return read_file_bytes(checkpoints.at(i).path);
  }
};

inline std::string checkpoint_path(const std::string& dir, const std::string& prefix, std::size_t epoch) {
  char name[64];
  std::snprintf(name, sizeof name, "%s_%03zu.lkd", prefix.c_str(), epoch);
  return (std::filesystem::path(dir) / name).string();
}

/// Runs cfg.epochs epochs over `train` with validation on `val` after each.
/// Only `params` are updated; everything else the loss touches must have its
/// gradient flag cleared by the caller.
inline TrainResult train_loop(const NamedTensors<float>& params, const BatchPlan& train, const BatchPlan& val,
                              const TrainConfig& cfg, const LossFn& loss_fn, const TrainOptions& opt = {}) {
  cfg.validate();
  TrainResult result;
  for (const auto& [name, p] : params) {
    result.trained.push_back(name);
    p.set_requires_grad(true);
    p.clear_grad();
  }
  AdamState<float> state;
  std::size_t first_epoch = 1;
  const auto val_batches = val.sequential();
  if (opt.resume) {
    restore_checkpoint(*opt.resume, params, &state);
    result.history = history_from_json(opt.resume->header.at("history"));
    first_epoch = opt.resume->header.at("epoch").get<std::size_t>() + 1;
  } else {
    result.history.initial_val = evaluate(loss_fn, val_batches);
  }
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    if (!opt.resume) std::filesystem::remove(std::filesystem::path(opt.out_dir) / (opt.checkpoint_prefix + "_history.jsonl"));
  }
  for (const auto& e : result.history.epochs) {
    result.checkpoints.push_back({e.epoch, e.val.loss, e.train_loss,
                                  opt.out_dir.empty() ? "" : checkpoint_path(opt.out_dir, opt.checkpoint_prefix, e.epoch)});
    result.checkpoint_bytes.emplace_back();
  }
  if (opt.resume && opt.out_dir.empty() && !result.checkpoint_bytes.empty()) {
    // Only the resumed checkpoint is available in memory.
    result.checkpoint_bytes.back() = encode_lkd("checkpoint", opt.resume->header, opt.resume->tensors);
  }

  std::size_t step = result.history.steps.empty() ? 0 : result.history.steps.back().step;
  for (std::size_t epoch = first_epoch; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double sum = 0;
    std::size_t n = 0;
    for (const Batch& batch : train.epoch(epoch)) {
      ++step;
      Tape<float> tape;
      StepLoss l = loss_fn(tape, batch);
      const double total = l.total.item();
      if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
      }
      tape.backward(l.total);
      tape.reset();
      const double norm = clip_grad_norm(params, cfg.grad_clip_norm);
      if (!std::isfinite(norm)) {
        throw NumericError("non-finite gradient at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
      }
      adam_step(params, state, cfg);
      for (const auto& [name, p] : params) p.zero_grad();
      StepRecord rec{step, epoch, total, std::move(l.parts), norm};
      if (opt.on_step) opt.on_step(rec);
      result.history.steps.push_back(std::move(rec));
      sum += total;
      ++n;
    }
    EpochRecord er{epoch, sum / static_cast<double>(n), evaluate(loss_fn, val_batches), 0.0};
    er.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(er);

    const std::string bytes = encode_checkpoint(params, state, epoch, result.history, cfg, opt.header);
    CheckpointInfo info{epoch, er.val.loss, er.train_loss, ""};
    if (opt.out_dir.empty()) {
      result.checkpoint_bytes.push_back(bytes);
    } else {
      info.path = checkpoint_path(opt.out_dir, opt.checkpoint_prefix, epoch);
      write_file_bytes(info.path, bytes);
      result.checkpoint_bytes.emplace_back();
      std::ofstream hist(std::filesystem::path(opt.out_dir) / (opt.checkpoint_prefix + "_history.jsonl"), std::ios::app);
      hist << json{{"epoch", epoch}, {"train_loss", er.train_loss}, {"val_loss", er.val.loss}, {"wall_ms", er.wall_ms}}.dump()
           << '\n';
      if (!hist) throw IoError("cannot append to history in " + opt.out_dir);
    }
    result.checkpoints.push_back(std::move(info));
    if (opt.on_epoch) opt.on_epoch(er);
    if (opt.stop_after_epoch != 0 && epoch >= opt.stop_after_epoch) break;
  }
  for (const auto& [name, p] : params) p.clear_grad();
  if (!result.checkpoints.empty()) result.selected = early_stop_select(result.checkpoints);
  return result;
}

}  // namespace lkd
