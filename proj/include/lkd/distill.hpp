#pragma once

// Knowledge distillation: the blended loss (1 - alpha) CE + alpha * T^2 KL on
// temperature-softened distributions, and the two-stage LoRA-KD pipeline
// (LoRA-tune the teacher, freeze it, LoRA-tune the student against it).

#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lkd/error.hpp"
#include "lkd/hash.hpp"
#include "lkd/lora.hpp"
#include "lkd/model.hpp"
#include "lkd/ops.hpp"
#include "lkd/train.hpp"

namespace lkd {

struct KdConfig {
  double alpha = 0.8;
  double temperature = 2.0;
  bool t_squared_correction = true;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("KD alpha must be in [0, 1], got " + std::to_string(alpha));
    if (!(temperature > 0.0)) throw ParameterError("KD temperature must be > 0, got " + std::to_string(temperature));
  }

  json to_json() const {
    return {{"alpha", alpha}, {"temperature", temperature}, {"t_squared_correction", t_squared_correction}};
  }

  static KdConfig from_json(const json& j) {
    KdConfig c;
    try {
      c.alpha = j.at("alpha").get<double>();
      c.temperature = j.at("temperature").get<double>();
      c.t_squared_correction = j.at("t_squared_correction").get<bool>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("kd config: ") + e.what());
    }
    return c;
  }
};

template <typename T>
struct KdLoss {
  Tensor<T> total;
  double ce = 0;       // token-mean cross-entropy against the targets
  double distill = 0;  // token-mean KL(teacher_T || student_T), times T^2 when corrected
};

/// Row-wise softmax(logits / T) as plain values; nothing here is on a tape.
template <typename T>
std::vector<T> softened(std::span<const T> logits, std::size_t vocab, double temperature) {
  std::vector<T> out(logits.size());
  std::vector<double> row(vocab);
  for (std::size_t r = 0; r < logits.size() / vocab; ++r) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, static_cast<double>(logits[r * vocab + j]) / temperature);
    double s = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      row[j] = std::exp(static_cast<double>(logits[r * vocab + j]) / temperature - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) out[r * vocab + j] = static_cast<T>(row[j] / s);
  }
  return out;
}

/// The teacher enters only as constants, so gradients reach student_logits alone.
template <typename T>
KdLoss<T> kd_loss(Tape<T>& tape, const Tensor<T>& student_logits, std::span<const T> teacher_logits,
                  std::span<const int> targets, const KdConfig& cfg, std::span<const std::uint8_t> keep = {}) {
  cfg.validate();
  if (teacher_logits.size() != student_logits.numel()) {
    throw ConformanceError("teacher logits hold " + std::to_string(teacher_logits.size()) + " values, student " +
                           shape_str(student_logits.shape()));
  }
  Tensor<T> ce = ops::cross_entropy(tape, student_logits, targets, keep);
  Tensor<T> kl = ops::kl_logits(tape, student_logits, teacher_logits, cfg.temperature, keep);
  if (cfg.t_squared_correction) kl = ops::scale(tape, kl, static_cast<T>(cfg.temperature * cfg.temperature));
  Tensor<T> total = ops::add(tape, ops::scale(tape, ce, static_cast<T>(1.0 - cfg.alpha)), ops::scale(tape, kl, static_cast<T>(cfg.alpha)));
  return {total, static_cast<double>(ce.item()), static_cast<double>(kl.item())};
}

template <typename T>
KdLoss<T> kd_loss(Tape<T>& tape, const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                  std::span<const int> targets, const KdConfig& cfg, std::span<const std::uint8_t> keep = {}) {
  if (teacher_logits.cols() != student_logits.cols()) {
    throw ConformanceError("vocabulary mismatch: student " + std::to_string(student_logits.cols()) + ", teacher " +
                           std::to_string(teacher_logits.cols()));
  }
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ConformanceError("teacher logits " + shape_str(teacher_logits.shape()) + " vs student " +
                           shape_str(student_logits.shape()));
  }
  return kd_loss(tape, student_logits, teacher_logits.data(), targets, cfg, keep);
}

/// No-grad teacher logits for a batch. With caching on, each window's rows are
/// computed once and reused; a row never depends on the other rows of its
/// batch, so cached and fresh logits are bit-identical.
class TeacherLogits {
 public:
  TeacherLogits(const Model<float>& teacher, const LoraAdapter<float>* adapter, bool cache)
      : teacher_(teacher), adapter_(adapter), cache_(cache) {}

  std::vector<float> operator()(const Batch& batch) {
    const std::size_t vocab = teacher_.config.vocab_size, seq = batch.seq, row = seq * vocab;
    if (!cache_) return compute(batch.inputs, batch.batch, seq);
    std::vector<std::uint64_t> keys(batch.batch);
    std::vector<int> missing_ids;
    std::vector<std::size_t> missing;
    for (std::size_t b = 0; b < batch.batch; ++b) {
      std::span<const int> ids(batch.inputs.data() + b * seq, seq);
      keys[b] = fnv1a64_values(ids) ^ (seq * 0x9e3779b97f4a7c15ULL);
      auto it = table_.find(keys[b]);
      if (it == table_.end() || !std::equal(ids.begin(), ids.end(), it->second.ids.begin(), it->second.ids.end())) {
        missing.push_back(b);
        missing_ids.insert(missing_ids.end(), ids.begin(), ids.end());
      } else {
        ++hits_;
      }
    }
    if (!missing.empty()) {
      const auto fresh = compute(missing_ids, missing.size(), seq);
      for (std::size_t m = 0; m < missing.size(); ++m) {
        const std::size_t b = missing[m];
        Entry e;
        e.ids.assign(batch.inputs.begin() + static_cast<std::ptrdiff_t>(b * seq),
                     batch.inputs.begin() + static_cast<std::ptrdiff_t>((b + 1) * seq));
        e.logits.assign(fresh.begin() + static_cast<std::ptrdiff_t>(m * row),
                        fresh.begin() + static_cast<std::ptrdiff_t>((m + 1) * row));
        table_[keys[b]] = std::move(e);
      }
    }
    std::vector<float> out;
    out.reserve(batch.batch * row);
    for (std::size_t b = 0; b < batch.batch; ++b) {
      const auto& l = table_.at(keys[b]).logits;
      out.insert(out.end(), l.begin(), l.end());
    }
    return out;
  }

  std::size_t hits() const { return hits_; }
  std::size_t cached_windows() const { return table_.size(); }

 private:
  struct Entry {
    std::vector<int> ids;
    std::vector<float> logits;
  };

  std::vector<float> compute(const std::vector<int>& ids, std::size_t batch, std::size_t seq) const {
    Tape<float> tape = Tape<float>::no_grad();
    return forward_logits(tape, teacher_, std::span<const int>(ids), batch, seq, adapter_).values();
  }

  const Model<float>& teacher_;
  const LoraAdapter<float>* adapter_;
  bool cache_;
  std::unordered_map<std::uint64_t, Entry> table_;
  std::size_t hits_ = 0;
};

struct Agreement {
  double mean_kl = 0;         // KL(teacher || student) at T = 1, per position
  double top1_agreement = 0;  // fraction of positions whose argmaxes match
  std::size_t positions = 0;

  json to_json() const { return {{"mean_kl", mean_kl}, {"top1_agreement", top1_agreement}, {"positions", positions}}; }
};

/// Lowest index among maxima.
template <typename T>
std::size_t argmax_row(std::span<const T> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

template <typename T>
Agreement agreement_metrics(const Model<T>& student, const LoraAdapter<T>* student_adapter, const Model<T>& teacher,
                            const LoraAdapter<T>* teacher_adapter, const std::vector<Batch>& batches) {
  if (student.config.vocab_size != teacher.config.vocab_size) throw ConformanceError("student and teacher vocabularies differ");
  const std::size_t vocab = student.config.vocab_size;
  Agreement a;
  double kl_sum = 0;
  std::size_t agree = 0;
  for (const auto& b : batches) {
    Tape<T> tape = Tape<T>::no_grad();
    const auto s = forward_logits(tape, student, b, student_adapter);
    const auto t = forward_logits(tape, teacher, b, teacher_adapter);
    const auto p = softened<T>(t.data(), vocab, 1.0);
    const auto q = softened<T>(s.data(), vocab, 1.0);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      std::span<const T> pr(p.data() + r * vocab, vocab), qr(q.data() + r * vocab, vocab);
      double kl = 0;
      for (std::size_t j = 0; j < vocab; ++j) {
        if (pr[j] > 0) kl += pr[j] * (std::log(static_cast<double>(pr[j])) - std::log(std::max<double>(qr[j], ops::kLogFloor)));
      }
      kl_sum += kl;
      agree += argmax_row(std::span<const T>(s.data().data() + r * vocab, vocab)) ==
               argmax_row(std::span<const T>(t.data().data() + r * vocab, vocab));
      ++a.positions;
    }
  }
  if (a.positions > 0) {
    a.mean_kl = kl_sum / static_cast<double>(a.positions);
    a.top1_agreement = static_cast<double>(agree) / static_cast<double>(a.positions);
  }
  return a;
}

// Pipeline ----------------------------------------------------------------

struct LoraSettings {
  std::size_t rank = kDefaultLoraRank;
  double scale = kDefaultLoraScale;
  std::uint64_t seed = 42;

  json to_json() const { return {{"rank", rank}, {"lora_scale", scale}, {"seed", seed}}; }
};

struct Corpus {
  std::vector<int> stream;
  WindowSplit split;
};

inline Corpus prepare_corpus(std::string_view text, const TrainConfig& cfg) {
  Corpus c{encode_bytes(text), {}};
  if (c.stream.empty()) throw DegenerateInputError("corpus is empty");
  c.split = split_windows(window_count(c.stream.size(), cfg.seq_len), cfg.val_fraction);
  return c;
}

inline json adapter_meta(const LoraAdapter<float>& a, const ModelConfig& backbone) {
  std::vector<std::string> targets;
  for (const auto& e : a.entries) targets.push_back(e.target);
  return {{"rank", a.rank}, {"lora_scale", a.scale}, {"targets", targets}, {"config", backbone.to_json()},
          {"config_fingerprint", a.backbone_fingerprint}};
}

inline json run_json(const TrainResult& r) {
  json cps = json::array();
  for (const auto& c : r.checkpoints) cps.push_back({{"epoch", c.epoch}, {"val_loss", c.val_loss}, {"train_loss", c.train_loss}});
  return {{"history", to_json(r.history)}, {"checkpoints", cps}, {"selected_epoch", r.selected_checkpoint().epoch},
          {"trained_tensors", r.trained}};
}

struct StageOptions {
  std::string out_dir;
  std::string prefix;
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const StepRecord&)> on_step;
  json header = json::object();
};

/// LoRA fine-tuning of `base` on plain next-token loss; the adapter returned
/// holds the early-stopped checkpoint's factors.
struct LoraRun {
  LoraAdapter<float> adapter;
  TrainResult run;
};

inline TrainOptions stage_options(const StageOptions& so, json header) {
  TrainOptions o;
  o.out_dir = so.out_dir;
  o.checkpoint_prefix = so.prefix.empty() ? "epoch" : so.prefix;
  o.header = std::move(header);
  o.on_epoch = so.on_epoch;
  o.on_step = so.on_step;
  return o;
}

inline void restore_selected(const TrainResult& r, const LoraAdapter<float>& adapter) {
  restore_checkpoint<float>(decode_lkd(r.bytes(r.selected), "checkpoint"), adapter.named_parameters());
}

inline LoraRun lora_finetune(const Model<float>& base, const Corpus& corpus, const TrainConfig& cfg,
                             const LoraSettings& lora, const StageOptions& so = {}) {
  LoraRun out{attach(base, default_lora_targets(base.config), lora.rank, lora.scale, lora.seed), {}};
  const BatchPlan train(corpus.stream, corpus.split.train, cfg.seq_len, cfg.batch_size, cfg.seed);
  const BatchPlan val(corpus.stream, corpus.split.val, cfg.seq_len, cfg.batch_size, cfg.seed);
  const LoraAdapter<float>* a = &out.adapter;
  LossFn loss = [&base, a](Tape<float>& tape, const Batch& b) { return StepLoss{sequence_loss(tape, base, b, a), {}}; };
  json header = so.header;
  header["adapter"] = adapter_meta(out.adapter, base.config);
  out.run = train_loop(out.adapter.named_parameters(), train, val, cfg, loss, stage_options(so, std::move(header)));
  restore_selected(out.run, out.adapter);
  return out;
}

/// Full-parameter training of `model` in place on next-token loss; the
/// model ends holding the early-stopped checkpoint's weights.
inline TrainResult full_finetune(const Model<float>& model, const Corpus& corpus, const TrainConfig& cfg,
                                 const StageOptions& so = {}) {
  const BatchPlan train(corpus.stream, corpus.split.train, cfg.seq_len, cfg.batch_size, cfg.seed);
  const BatchPlan val(corpus.stream, corpus.split.val, cfg.seq_len, cfg.batch_size, cfg.seed);
  LossFn loss = [&model](Tape<float>& tape, const Batch& b) { return StepLoss{sequence_loss(tape, model, b), {}}; };
  json header = so.header;
  header["config"] = model.config.to_json();
  auto run = train_loop(model.named_parameters(), train, val, cfg, loss, stage_options(so, std::move(header)));
  restore_checkpoint<float>(decode_lkd(run.bytes(run.selected), "checkpoint"), model.named_parameters());
  model.set_trainable(false);
  return run;
}

struct PipelineConfig {
  KdConfig kd;
  TrainConfig teacher_train;
  TrainConfig student_train;
  LoraSettings lora;
  bool cache_teacher_logits = true;

  json to_json() const {
    return {{"kd", kd.to_json()}, {"teacher_train", teacher_train.to_json()}, {"student_train", student_train.to_json()},
            {"lora", lora.to_json()}, {"cache_teacher_logits", cache_teacher_logits}};
  }
};

struct PipelineResult {
  LoraAdapter<float> teacher_adapter;
  LoraAdapter<float> student_adapter;
  TrainResult teacher_run;
  TrainResult student_run;
  Agreement before;  // student base vs frozen teacher, validation windows
  Agreement after;   // early-stopped student vs frozen teacher
  double distill_step0 = 0;     // validation distill term before any student update
  double distill_selected = 0;  // validation distill term at the early-stopped epoch
  bool teacher_unchanged = false;
  json report;
};

inline std::uint64_t weights_digest(const Model<float>& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : m.named_parameters()) {
    h = fnv1a64(name, h);
    h = fnv1a64_values(t.data(), h);
  }
  return h;
}

struct PipelineOptions {
  std::string out_dir;
  std::function<void(const std::string& stage, const EpochRecord&)> on_epoch;
  json header = json::object();
};

/// Stage 1 LoRA-tunes the teacher on next-token loss; its early-stopped
/// adapter is folded into a frozen copy. Stage 2 LoRA-tunes the student on
/// kd_loss against that teacher's no-grad logits for the same batch.
inline PipelineResult lora_kd_pipeline(const Model<float>& teacher_base, const Model<float>& student_base,
                                       std::string_view corpus_text, const PipelineConfig& cfg,
                                       const PipelineOptions& opt = {}) {
  cfg.kd.validate();
  if (teacher_base.config.vocab_size != student_base.config.vocab_size) {
    throw ConformanceError("teacher and student vocabularies differ");
  }
  if (cfg.teacher_train.seq_len != cfg.student_train.seq_len || cfg.teacher_train.val_fraction != cfg.student_train.val_fraction) {
    throw ParameterError("teacher and student stages must share seq_len and val_fraction");
  }
  const Corpus corpus = prepare_corpus(corpus_text, cfg.student_train);
  PipelineResult out;

  auto stage = [&](const std::string& name) {
    StageOptions so;
    so.out_dir = opt.out_dir;
    so.prefix = name;
    so.header = opt.header;
    so.header["stage"] = name;
    if (opt.on_epoch) so.on_epoch = [&opt, name](const EpochRecord& e) { opt.on_epoch(name, e); };
    return so;
  };

  LoraRun teacher = lora_finetune(teacher_base, corpus, cfg.teacher_train, cfg.lora, stage("teacher"));
  out.teacher_adapter = teacher.adapter;
  out.teacher_run = std::move(teacher.run);
  const Model<float> frozen = merge(teacher_base, out.teacher_adapter);
  frozen.set_trainable(false);
  const std::uint64_t frozen_digest = weights_digest(frozen);

  const TrainConfig& sc = cfg.student_train;
  const BatchPlan train(corpus.stream, corpus.split.train, sc.seq_len, sc.batch_size, sc.seed);
  const BatchPlan val(corpus.stream, corpus.split.val, sc.seq_len, sc.batch_size, sc.seed);
  const auto val_batches = val.sequential();
  out.before = agreement_metrics<float>(student_base, nullptr, frozen, nullptr, val_batches);

  out.student_adapter = attach(student_base, default_lora_targets(student_base.config), cfg.lora.rank, cfg.lora.scale,
                               cfg.lora.seed);
  TeacherLogits teacher_logits(frozen, nullptr, cfg.cache_teacher_logits);
  const LoraAdapter<float>* sa = &out.student_adapter;
  LossFn loss = [&](Tape<float>& tape, const Batch& b) {
    const auto t = teacher_logits(b);
    Tensor<float> s = forward_logits(tape, student_base, b, sa);
    const auto keep = b.target_mask();
    auto l = kd_loss<float>(tape, s, std::span<const float>(t), b.targets, cfg.kd, keep);
    return StepLoss{l.total, {{"ce", l.ce}, {"distill", l.distill}}};
  };
  StageOptions so = stage("student");
  json header = so.header;
  header["adapter"] = adapter_meta(out.student_adapter, student_base.config);
  header["kd"] = cfg.kd.to_json();
  out.student_run = train_loop(out.student_adapter.named_parameters(), train, val, sc, loss, stage_options(so, std::move(header)));
  restore_selected(out.student_run, out.student_adapter);

  out.after = agreement_metrics<float>(student_base, &out.student_adapter, frozen, nullptr, val_batches);
  out.teacher_unchanged = weights_digest(frozen) == frozen_digest;
  if (!out.teacher_unchanged) throw StateError("teacher weights changed during distillation");
  auto part = [](const EvalResult& e, const std::string& k) {
    for (const auto& [name, v] : e.parts) {
      if (name == k) return v;
    }
    return 0.0;
  };
  out.distill_step0 = part(out.student_run.history.initial_val, "distill");
  out.distill_selected = part(out.student_run.history.epochs.at(out.student_run.selected_checkpoint().epoch - 1).val, "distill");

  json steps = json::array();
  for (const auto& s : out.student_run.history.steps) {
    json r = {{"step", s.step}, {"total", s.total}};
    for (const auto& [k, v] : s.parts) r[k] = v;
    steps.push_back(std::move(r));
  }
  out.report = {
      {"config", cfg.to_json()},
      {"teacher_config", teacher_base.config.to_json()},
      {"student_config", student_base.config.to_json()},
      {"seeds", {{"lora", cfg.lora.seed}, {"teacher_shuffle", cfg.teacher_train.seed}, {"student_shuffle", sc.seed},
                 {"teacher_init", teacher_base.config.seed}, {"student_init", student_base.config.seed}}},
      {"corpus", {{"tokens", corpus.stream.size()}, {"train_windows", corpus.split.train.size()},
                  {"val_windows", corpus.split.val.size()}}},
      {"teacher_stage", run_json(out.teacher_run)},
      {"student_stage", run_json(out.student_run)},
      {"steps", std::move(steps)},
      {"distill_step0", out.distill_step0},
      {"distill_selected", out.distill_selected},
      {"agreement_before", out.before.to_json()},
      {"agreement_after", out.after.to_json()},
      {"teacher_weights_digest", frozen_digest},
      {"teacher_unchanged", out.teacher_unchanged},
  };
  return out;
}

}  // namespace lkd
