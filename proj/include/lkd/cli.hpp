#pragma once

// The `lkd` command line. Lives in a header so tests can drive it in-process.
//
// Option values resolve flag > --config file > LKD_SEED (seed only) > default.
// Every artifact carries a manifest; `lkd --replay <manifest or artifact>`
// re-runs the recorded subcommand with the recorded values.

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lkd/checkpoint.hpp"
#include "lkd/distill.hpp"
#include "lkd/error.hpp"
#include "lkd/eval/judge.hpp"
#include "lkd/eval/report.hpp"
#include "lkd/grad_suite.hpp"
#include "lkd/hash.hpp"
#include "lkd/lora.hpp"
#include "lkd/model.hpp"
#include "lkd/rag.hpp"
#include "lkd/toy_corpus.hpp"
#include "lkd/train.hpp"

namespace lkd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kUsage: return kExitUsage;
    case ErrorKind::kNumeric: return kExitNumeric;
    case ErrorKind::kData:
    case ErrorKind::kContract: return kExitData;
  }
  return kExitData;
}

inline std::uint64_t default_seed() {
  const char* env = std::getenv("LKD_SEED");
  if (!env || !*env) return 42;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(env, &used);
    if (used == std::strlen(env)) return v;
  } catch (const std::exception&) {
  }
  throw UsageError(std::string("LKD_SEED must be an unsigned integer, got '") + env + "'");
}

/// "teacher", "student", or "layers,d_model,heads,d_ff[,max_seq_len]".
inline ModelConfig parse_preset(const std::string& s, std::uint64_t seed) {
  if (s == "teacher") return ModelConfig::teacher(seed);
  if (s == "student") return ModelConfig::student(seed);
  std::vector<std::size_t> v;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoull(part, &used));
      if (used != part.size()) v.clear();
    } catch (const std::exception&) {
      v.clear();
      break;
    }
  }
  if (v.size() != 4 && v.size() != 5) {
    throw UsageError("model preset must be teacher, student or L,D,H,F[,max_seq_len]; got '" + s + "'");
  }
  ModelConfig c{v[0], v[1], v[2], v[3], kVocabSize, v.size() == 5 ? v[4] : 128, seed};
  c.validate();
  return c;
}

inline json fingerprint_file(const std::string& path) {
  return {{"path", path}, {"fnv1a64", fnv1a64(read_file_bytes(path))}};
}

/// The manifest embedded in an artifact, or the file itself when it is one.
inline json read_manifest(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  json doc;
  if (bytes.rfind("LKD1", 0) == 0) {
    doc = decode_lkd(bytes).header;
  } else {
    try {
      doc = json::parse(bytes);
    } catch (const json::exception& e) {
      throw FormatError(path + ": " + e.what());
    }
  }
  if (doc.contains("manifest")) doc = doc["manifest"];
  if (!doc.is_object() || !doc.contains("subcommand") || !doc.contains("config")) {
    throw FormatError(path + " holds no manifest");
  }
  return doc;
}

// One option bound to a variable, with JSON in and out for manifests and
// config files.
struct Field {
  std::string name;
  CLI::Option* option = nullptr;
  std::function<json()> get;
  std::function<void(const json&)> set;
  bool required = false;
};

struct Command {
  std::string path;  // "rag index"
  CLI::App* app = nullptr;
  std::vector<Field> fields;
  std::function<int()> run;

  template <typename T>
  CLI::Option* opt(const std::string& name, T& var, const std::string& desc, bool required = false) {
    auto* o = app->add_option("--" + name, var, desc);
    if constexpr (!std::is_same_v<T, std::vector<std::string>>) o->capture_default_str();
    fields.push_back({name, o, [&var] { return json(var); },
                      [&var, name](const json& j) {
                        try {
                          var = j.get<T>();
                        } catch (const json::exception&) {
                          throw UsageError("config value for '" + name + "' has the wrong type");
                        }
                      },
                      required});
    return o;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    auto* o = app->add_flag("--" + name, var, desc);
    fields.push_back({name, o, [&var] { return json(var); },
                      [&var, name](const json& j) {
                        if (!j.is_boolean()) throw UsageError("config value for '" + name + "' must be true or false");
                        var = j.get<bool>();
                      },
                      false});
    return o;
  }

  const Field* field(const std::string& name) const {
    for (const auto& f : fields) {
      if (f.name == name) return &f;
    }
    return nullptr;
  }

  void apply(const json& config, bool only_unset) {
    if (!config.is_object()) throw UsageError("config must be a JSON object");
    for (const auto& [k, v] : config.items()) {
      const Field* f = field(k);
      if (!f) throw UsageError("'" + path + "' has no option '" + k + "'");
      if (only_unset && f->option->count() > 0) continue;
      f->set(v);
    }
  }

  void check_required(const json& given) const {
    for (const auto& f : fields) {
      if (f.required && f.option->count() == 0 && !given.contains(f.name)) {
        throw UsageError(path + ": --" + f.name + " is required");
      }
    }
  }

  json config() const {
    json c = json::object();
    for (const auto& f : fields) c[f.name] = f.get();
    return c;
  }
};

struct TrainFlags {
  double lr = 1e-4;
  std::size_t batch_size = 16;
  std::size_t seq_len = 128;
  std::size_t epochs = 20;
  double val_fraction = 0.1;
  double grad_clip = 1.0;

  void bind(Command& c) {
    c.opt("lr", lr, "Adam learning rate");
    c.opt("batch-size", batch_size, "windows per batch");
    c.opt("seq-len", seq_len, "tokens per window");
    c.opt("epochs", epochs, "training epochs");
    c.opt("val-fraction", val_fraction, "trailing fraction of windows held out");
    c.opt("grad-clip", grad_clip, "global gradient-norm clip (<= 0 disables)");
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig t;
    t.learning_rate = lr;
    t.batch_size = batch_size;
    t.seq_len = seq_len;
    t.epochs = epochs;
    t.val_fraction = val_fraction;
    t.grad_clip_norm = grad_clip;
    t.seed = seed;
    t.validate();
    return t;
  }
};

class Cli {
 public:
  Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err), app_("Low-rank adaptation and distillation lab", "lkd") {
    app_.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app_.failure_message(CLI::FailureMessage::help);
    app_.add_option("--replay", replay_, "re-run the subcommand recorded in a manifest or artifact");
    seed_default_ = default_seed();
    build();
  }

  int run(std::vector<std::string> args) {
    if (args.empty()) {
      err_ << app_.help();
      return kExitUsage;
    }
    std::reverse(args.begin(), args.end());
    try {
      app_.parse(args);
    } catch (const CLI::ParseError& e) {
      return app_.exit(e, out_, err_) == 0 ? kExitOk : kExitUsage;
    }
    try {
      Command* cmd = nullptr;
      if (!replay_.empty()) {
        const json m = read_manifest(replay_);
        cmd = find(m.at("subcommand").get<std::string>());
        cmd->apply(m.at("config"), false);
      } else {
        cmd = chosen();
        if (!cmd) {
          err_ << app_.help();
          return kExitUsage;
        }
        json given = json::object();
        if (!config_path_.empty()) {
          try {
            given = json::parse(read_file_bytes(config_path_));
          } catch (const json::exception& e) {
            throw UsageError(config_path_ + ": " + e.what());
          }
          cmd->apply(given, true);
        }
        cmd->check_required(given);
      }
      current_ = cmd;
      return cmd->run();
    } catch (const Error& e) {
      err_ << "lkd: " << e.what() << "\n";
      return exit_code(e.kind());
    } catch (const json::exception& e) {
      err_ << "lkd: format error: " << e.what() << "\n";
      return kExitData;
    } catch (const std::filesystem::filesystem_error& e) {
      err_ << "lkd: i/o error: " << e.what() << "\n";
      return kExitData;
    }
  }

 private:
  std::ostream& out_;
  std::ostream& err_;
  CLI::App app_;
  std::string replay_;
  std::string config_path_;
  std::uint64_t seed_default_ = 42;
  std::vector<std::unique_ptr<Command>> commands_;
  Command* current_ = nullptr;
  json inputs_ = json::object();

  Command& add(CLI::App* parent, const std::string& name, const std::string& desc, const std::string& path) {
    commands_.push_back(std::make_unique<Command>());
    auto& c = *commands_.back();
    c.path = path;
    c.app = parent->add_subcommand(name, desc);
    c.app->add_option("--config", config_path_, "JSON file of option values (flags win)");
    return c;
  }

  Command* chosen() {
    for (auto& c : commands_) {
      if (c->app->parsed()) {
        // A parent group is parsed along with its child; the deepest wins.
        bool child = false;
        for (auto& d : commands_) {
          if (d.get() != c.get() && d->app->parsed() && d->path.rfind(c->path + " ", 0) == 0) child = true;
        }
        if (!child) return c.get();
      }
    }
    return nullptr;
  }

  Command* find(const std::string& path) {
    for (auto& c : commands_) {
      if (c->path == path) return c.get();
    }
    throw FormatError("manifest names unknown subcommand '" + path + "'");
  }

  json manifest() const {
    return {{"tool", "lkd"},
            {"manifest_version", 1},
            {"subcommand", current_->path},
            {"config", current_->config()},
            {"inputs", inputs_}};
  }

  std::string input(const std::string& role, const std::string& path) {
    inputs_[role] = fingerprint_file(path);
    return read_file_bytes(path);
  }

  void note(const std::string& s) { err_ << s << "\n"; }

  void build();
  void build_train();
  void build_distill();
  void build_merge();
  void build_generate();
  void build_rag();
  void build_eval();
  void build_misc();

  Model<float> resolve_model(const std::string& model_path, const std::string& preset, std::uint64_t seed,
                             const std::optional<ModelConfig>& adapter_backbone, const std::string& role = "model") {
    if (!model_path.empty()) {
      inputs_[role] = fingerprint_file(model_path);
      return load_model<float>(model_path);
    }
    if (adapter_backbone) return init_model<float>(*adapter_backbone);
    return init_model<float>(parse_preset(preset, seed));
  }

  // Loads an adapter and the backbone config recorded with it.
  std::pair<LoraAdapter<float>, ModelConfig> read_adapter(const std::string& path) {
    inputs_["adapter"] = fingerprint_file(path);
    const auto file = read_lkd(path, "adapter");
    return {adapter_from_file<float>(file), ModelConfig::from_json(file.header.at("config"))};
  }

  std::function<void(const EpochRecord&)> epoch_logger(const std::string& stage) {
    return [this, stage](const EpochRecord& e) {
      std::ostringstream s;
      s << stage << " epoch " << e.epoch << " train " << e.train_loss << " val " << e.val.loss;
      for (const auto& [k, v] : e.val.parts) s << " " << k << " " << v;
      note(s.str());
    };
  }
};

inline void Cli::build() {
  build_train();
  build_distill();
  build_merge();
  build_generate();
  build_rag();
  build_eval();
  build_misc();
}

inline void Cli::build_train() {
  struct O {
    std::string corpus, out, model, preset = "student";
    bool lora = false;
    std::uint64_t seed;
    std::size_t rank = kDefaultLoraRank;
    double lora_scale = kDefaultLoraScale;
    TrainFlags t;
  };
  auto o = std::make_shared<O>();
  o->seed = seed_default_;
  auto& c = add(&app_, "train", "baseline (full-parameter) or --lora training on a corpus", "train");
  c.opt("corpus", o->corpus, "UTF-8 text file", true);
  c.opt("out", o->out, "output directory", true);
  c.opt("model", o->model, "initial weights (.lkd); default is a fresh --preset");
  c.opt("preset", o->preset, "teacher | student | L,D,H,F[,max_seq_len]");
  c.flag("lora", o->lora, "freeze the backbone and train a LoRA adapter on attention W_q, W_v");
  c.opt("seed", o->seed, "init, shuffle and adapter seed");
  c.opt("rank", o->rank, "LoRA rank");
  c.opt("lora-scale", o->lora_scale, "LoRA alpha (applied as alpha/rank)");
  o->t.bind(c);
  c.run = [this, o] {
    const auto text = input("corpus", o->corpus);
    const TrainConfig cfg = o->t.config(o->seed);
    const Corpus corpus = prepare_corpus(text, cfg);
    Model<float> model = resolve_model(o->model, o->preset, o->seed, std::nullopt);
    StageOptions so;
    so.out_dir = o->out;
    so.prefix = "epoch";
    so.header = {{"manifest", manifest()}};
    so.on_epoch = epoch_logger("train");
    json summary;
    if (o->lora) {
      auto r = lora_finetune(model, corpus, cfg, LoraSettings{o->rank, o->lora_scale, o->seed}, so);
      const auto path = (std::filesystem::path(o->out) / "adapter.lkd").string();
      save_adapter(r.adapter, model.config, path, {{"manifest", manifest()}, {"run", run_json(r.run)}});
      summary = run_json(r.run);
      summary["adapter"] = path;
    } else {
      auto run = full_finetune(model, corpus, cfg, so);
      const auto path = (std::filesystem::path(o->out) / "model.lkd").string();
      save_model(model, path, {{"manifest", manifest()}, {"run", run_json(run)}});
      summary = run_json(run);
      summary["model"] = path;
    }
    summary["manifest"] = manifest();
    write_file_bytes((std::filesystem::path(o->out) / "run.json").string(), summary.dump(2) + "\n");
    out_ << "selected epoch " << summary["selected_epoch"] << "\n";
    return kExitOk;
  };
}

inline void Cli::build_distill() {
  struct O {
    std::string corpus, out, teacher_model, student_model, teacher_preset = "teacher", student_preset = "student";
    std::uint64_t seed;
    double alpha = 0.8, kd_temp = 2.0;
    bool no_t2 = false, no_cache = false;
    std::size_t teacher_epochs = 0, student_epochs = 0;
    double teacher_lr = 0, student_lr = 0;
    std::size_t rank = kDefaultLoraRank;
    double lora_scale = kDefaultLoraScale;
    TrainFlags t;
  };
  auto o = std::make_shared<O>();
  o->seed = seed_default_;
  auto& c = add(&app_, "distill", "LoRA-tune the teacher, freeze it, then LoRA-distill the student", "distill");
  c.opt("corpus", o->corpus, "UTF-8 text file", true);
  c.opt("out", o->out, "output directory", true);
  c.opt("seed", o->seed, "init, shuffle and adapter seed");
  c.opt("alpha", o->alpha, "KD weight on the distillation term");
  c.opt("kd-temp", o->kd_temp, "KD temperature");
  c.flag("no-t2", o->no_t2, "drop the T^2 factor on the distillation term");
  c.flag("no-cache", o->no_cache, "recompute teacher logits every step");
  c.opt("teacher-model", o->teacher_model, "teacher base weights (.lkd); default is a fresh --teacher-preset");
  c.opt("student-model", o->student_model, "student base weights (.lkd); default is a fresh --student-preset");
  c.opt("teacher-preset", o->teacher_preset, "teacher | student | L,D,H,F[,max_seq_len]");
  c.opt("student-preset", o->student_preset, "teacher | student | L,D,H,F[,max_seq_len]");
  c.opt("teacher-epochs", o->teacher_epochs, "stage 1 epochs (0: --epochs)");
  c.opt("student-epochs", o->student_epochs, "stage 2 epochs (0: --epochs)");
  c.opt("teacher-lr", o->teacher_lr, "stage 1 learning rate (0: --lr)");
  c.opt("student-lr", o->student_lr, "stage 2 learning rate (0: --lr)");
  c.opt("rank", o->rank, "LoRA rank");
  c.opt("lora-scale", o->lora_scale, "LoRA alpha (applied as alpha/rank)");
  o->t.bind(c);
  c.run = [this, o] {
    const auto text = input("corpus", o->corpus);
    PipelineConfig cfg;
    cfg.kd = {o->alpha, o->kd_temp, !o->no_t2};
    cfg.teacher_train = o->t.config(o->seed);
    cfg.student_train = cfg.teacher_train;
    if (o->teacher_epochs) cfg.teacher_train.epochs = o->teacher_epochs;
    if (o->student_epochs) cfg.student_train.epochs = o->student_epochs;
    if (o->teacher_lr > 0) cfg.teacher_train.learning_rate = o->teacher_lr;
    if (o->student_lr > 0) cfg.student_train.learning_rate = o->student_lr;
    cfg.lora = {o->rank, o->lora_scale, o->seed};
    cfg.cache_teacher_logits = !o->no_cache;
    const Model<float> teacher = resolve_model(o->teacher_model, o->teacher_preset, o->seed, std::nullopt, "teacher_model");
    const Model<float> student = resolve_model(o->student_model, o->student_preset, o->seed, std::nullopt, "student_model");

    std::filesystem::create_directories(o->out);
    PipelineOptions po;
    po.out_dir = o->out;
    po.header = {{"manifest", manifest()}};
    po.on_epoch = [this](const std::string& stage, const EpochRecord& e) { epoch_logger(stage)(e); };
    auto r = lora_kd_pipeline(teacher, student, text, cfg, po);
    const auto dir = std::filesystem::path(o->out);
    save_adapter(r.teacher_adapter, teacher.config, (dir / "teacher_adapter.lkd").string(),
                 {{"manifest", manifest()}, {"stage", "teacher"}});
    save_adapter(r.student_adapter, student.config, (dir / "student_adapter.lkd").string(),
                 {{"manifest", manifest()}, {"stage", "student"}});
    json report = r.report;
    report["manifest"] = manifest();
    write_file_bytes((dir / "report.json").string(), report.dump(2) + "\n");
    char line[160];
    std::snprintf(line, sizeof line, "distill %.6g -> %.6g (ratio %.4f); top-1 agreement %.4f -> %.4f\n", r.distill_step0,
                  r.distill_selected, r.distill_selected / r.distill_step0, r.before.top1_agreement, r.after.top1_agreement);
    out_ << line;
    return kExitOk;
  };
}

inline void Cli::build_merge() {
  struct O {
    std::string adapter, model, out;
    bool unmerge = false;
  };
  auto o = std::make_shared<O>();
  auto& c = add(&app_, "merge-adapter", "fold an adapter into its backbone (or back out with --unmerge)", "merge-adapter");
  c.opt("adapter", o->adapter, "adapter (.lkd)", true);
  c.opt("model", o->model, "backbone weights; default rebuilds the adapter's recorded backbone");
  c.opt("out", o->out, "merged model path", true);
  c.flag("unmerge", o->unmerge, "subtract the delta instead of adding it");
  c.run = [this, o] {
    auto [adapter, backbone] = read_adapter(o->adapter);
    const Model<float> base = resolve_model(o->model, "", 0, backbone);
    const Model<float> merged = o->unmerge ? unmerge(base, adapter) : merge(base, adapter);
    save_model(merged, o->out, {{"manifest", manifest()}});
    out_ << o->out << "\n";
    return kExitOk;
  };
}

inline void Cli::build_generate() {
  struct O {
    std::string prompt, model, preset = "student", adapter;
    std::size_t max_new = 64, top_k = 0;
    double temperature = 0;
    std::uint64_t seed;
  };
  auto o = std::make_shared<O>();
  o->seed = seed_default_;
  auto& c = add(&app_, "generate", "continue a prompt", "generate");
  c.opt("prompt", o->prompt, "prompt text", true);
  c.opt("model", o->model, "weights (.lkd)");
  c.opt("preset", o->preset, "fresh model when neither --model nor --adapter is given");
  c.opt("adapter", o->adapter, "LoRA adapter applied at inference");
  c.opt("max-new", o->max_new, "tokens to generate");
  c.opt("temperature", o->temperature, "0 is greedy");
  c.opt("top-k", o->top_k, "0 keeps the whole vocabulary");
  c.opt("seed", o->seed, "init and sampling seed");
  c.run = [this, o] {
    std::optional<LoraAdapter<float>> adapter;
    std::optional<ModelConfig> backbone;
    if (!o->adapter.empty()) {
      auto [a, cfg] = read_adapter(o->adapter);
      adapter = std::move(a);
      backbone = cfg;
    }
    const Model<float> model = resolve_model(o->model, o->preset, o->seed, backbone);
    const auto prompt = encode(o->prompt).ids;
    const auto ids = generate(model, prompt, o->max_new, o->temperature, o->top_k, o->seed, adapter ? &*adapter : nullptr);
    out_ << decode(ids) << "\n";
    return kExitOk;
  };
}

inline void Cli::build_rag() {
  auto* group = app_.add_subcommand("rag", "retrieval-augmented generation");
  struct I {
    std::vector<std::string> corpus;
    std::string out;
    std::size_t chunk_size = 128, overlap = 32;
    double tau = 0.1;
  };
  auto i = std::make_shared<I>();
  auto& ci = add(group, "index", "chunk documents and build a TF-IDF index", "rag index");
  ci.opt("corpus", i->corpus, "document files (one document each)", true)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  ci.opt("out", i->out, "index path (.lkd)", true);
  ci.opt("chunk-size", i->chunk_size, "tokens per chunk");
  ci.opt("overlap", i->overlap, "tokens shared by neighbouring chunks");
  ci.opt("tau", i->tau, "retriever softmax temperature");
  ci.run = [this, i] {
    std::vector<Document> docs;
    for (std::size_t k = 0; k < i->corpus.size(); ++k) {
      docs.push_back({std::filesystem::path(i->corpus[k]).filename().string(), input("corpus." + std::to_string(k), i->corpus[k])});
    }
    const auto index = build_index(chunk_corpus(docs, i->chunk_size, i->overlap), i->tau);
    save_index(index, i->out, {{"manifest", manifest()}});
    out_ << index.chunks.size() << " chunks\n";
    return kExitOk;
  };

  struct A {
    std::string index, query, candidate, model, preset = "student", adapter;
    std::size_t k = 3, max_new = 64, top_k = 0;
    double temperature = 0;
    bool no_renormalize = false;
    std::uint64_t seed;
  };
  auto a = std::make_shared<A>();
  a->seed = seed_default_;
  auto& ca = add(group, "ask", "retrieve, then score a candidate or generate", "rag ask");
  ca.opt("index", a->index, "index path (.lkd)", true);
  ca.opt("query", a->query, "question text", true);
  ca.opt("candidate", a->candidate, "score this answer instead of generating");
  ca.opt("k", a->k, "chunks to marginalize over");
  ca.flag("no-renormalize", a->no_renormalize, "keep raw retriever mass over the top k");
  ca.opt("model", a->model, "weights (.lkd)");
  ca.opt("preset", a->preset, "fresh model when neither --model nor --adapter is given");
  ca.opt("adapter", a->adapter, "LoRA adapter applied at inference");
  ca.opt("max-new", a->max_new, "tokens to generate");
  ca.opt("temperature", a->temperature, "0 is greedy");
  ca.opt("top-k", a->top_k, "0 keeps the whole vocabulary");
  ca.opt("seed", a->seed, "init and sampling seed");
  ca.run = [this, a] {
    inputs_["index"] = fingerprint_file(a->index);
    const auto index = load_index(a->index);
    std::optional<LoraAdapter<float>> adapter;
    std::optional<ModelConfig> backbone;
    if (!a->adapter.empty()) {
      auto [ad, cfg] = read_adapter(a->adapter);
      adapter = std::move(ad);
      backbone = cfg;
    }
    const Model<float> model = resolve_model(a->model, a->preset, a->seed, backbone);
    const LoraAdapter<float>* ap = adapter ? &*adapter : nullptr;
    const bool renorm = !a->no_renormalize;
    json j = {{"query", a->query}, {"k", a->k}, {"manifest", manifest()}};
    json hits = json::array();
    for (const auto& h : retrieve(index, a->query, a->k, renorm).hits) {
      hits.push_back({{"chunk", h.chunk_id}, {"doc", index.chunks[h.chunk_id].doc_id}, {"score", h.score}, {"probability", h.probability}});
    }
    j["retrieved"] = hits;
    if (!a->candidate.empty()) {
      const auto s = rag_score(index, model, a->query, a->candidate, a->k, renorm, ap);
      j["candidate"] = a->candidate;
      j["probability"] = s.probability;
      j["log_probability"] = s.log_probability;
    } else {
      const auto g = rag_generate(index, model, a->query, a->k, a->max_new, a->temperature, a->top_k, a->seed, renorm, ap);
      j["text"] = g.text;
    }
    out_ << j.dump(2) << "\n";
    return kExitOk;
  };
}

inline void Cli::build_eval() {
  auto* group = app_.add_subcommand("eval", "score benchmark responses and ratings");
  struct O {
    std::string questions, responses, likert, ballots, configs, out, plot_data, backend = "heuristic", log;
    bool sample_std = false;
  };
  auto o = std::make_shared<O>();

  auto qa = [this, o] {
    return std::pair{eval::parse_question_set(input("questions", o->questions)), eval::parse_responses(input("responses", o->responses))};
  };
  auto split_configs = [](const std::string& s) {
    std::vector<std::string> v;
    std::stringstream in(s);
    std::string part;
    while (std::getline(in, part, ',')) v.push_back(part);
    return v;
  };

  auto& tf = add(group, "tf", "true/false accuracy per configuration", "eval tf");
  tf.opt("questions", o->questions, "question set (.json)", true);
  tf.opt("responses", o->responses, "responses (.jsonl)", true);
  tf.run = [this, qa] {
    auto [qs, rs] = qa();
    for (const auto& a : eval::score_tf(rs, qs)) out_ << a.config << "\t" << a.correct << "/" << a.total << "\t" << a.text << "\n";
    return kExitOk;
  };

  auto& rea = add(group, "reasoning", "units-aware reasoning outcomes", "eval reasoning");
  rea.opt("questions", o->questions, "question set (.json)", true);
  rea.opt("responses", o->responses, "responses (.jsonl)", true);
  rea.run = [this, qa] {
    auto [qs, rs] = qa();
    const auto configs = eval::config_order(rs);
    out_ << "question\tground truth";
    for (const auto& c : configs) out_ << "\t" << c;
    out_ << "\n";
    for (const auto& row : eval::reasoning_grid(rs, qs)) {
      out_ << row.question_id << "\t" << row.ground_truth;
      for (const auto& cell : row.cells) {
        out_ << "\t" << (cell.answered ? cell.shown + " (" + eval::to_string(cell.outcome) + ")" : "-");
      }
      out_ << "\n";
    }
    return kExitOk;
  };

  auto& lik = add(group, "likert", "Likert mean±std cells and inter-rater Pearson", "eval likert");
  lik.opt("likert", o->likert, "ratings (.csv)", true);
  lik.flag("sample-std", o->sample_std, "divide by n-1 instead of n");
  lik.run = [this, o] {
    eval::ReportInputs in;
    in.likert = eval::parse_likert_csv(input("likert", o->likert));
    in.population_std = !o->sample_std;
    const auto rep = eval::build_report(in);
    out_ << rep.tables.at(0).to_csv();
    return kExitOk;
  };

  auto& rank = add(group, "rank", "top-half and worst histograms over ranking ballots", "eval rank");
  rank.opt("ballots", o->ballots, "ballots (.jsonl)", true);
  rank.opt("configs", o->configs, "comma-separated configuration order (default: first ballot)");
  rank.run = [this, o, split_configs] {
    const auto h = eval::ranking_histograms(eval::parse_ballots(input("ballots", o->ballots)), split_configs(o->configs));
    out_ << "config\ttop_half\tworst\n";
    for (std::size_t i = 0; i < h.configs.size(); ++i) out_ << h.configs[i] << "\t" << h.top_half[i] << "\t" << h.worst[i] << "\n";
    out_ << "ballots\t" << h.ballots << "\tworst entropy (bits)\t" << eval::fixed(h.worst_entropy_bits, 6) << "\n";
    return kExitOk;
  };

  auto& rep = add(group, "report", "every section that has inputs, as JSON plus CSV tables", "eval report");
  rep.opt("questions", o->questions, "question set (.json)");
  rep.opt("responses", o->responses, "responses (.jsonl)");
  rep.opt("likert", o->likert, "ratings (.csv)");
  rep.opt("ballots", o->ballots, "ballots (.jsonl)");
  rep.opt("configs", o->configs, "comma-separated ballot configuration order");
  rep.opt("out", o->out, "report directory", true);
  rep.opt("plot-data", o->plot_data, "also write chart CSVs here");
  rep.flag("sample-std", o->sample_std, "divide by n-1 instead of n");
  rep.run = [this, o, split_configs] {
    eval::ReportInputs in;
    if (!o->questions.empty()) in.questions = eval::parse_question_set(input("questions", o->questions));
    if (!o->responses.empty()) in.responses = eval::parse_responses(input("responses", o->responses));
    if (!o->likert.empty()) in.likert = eval::parse_likert_csv(input("likert", o->likert));
    if (!o->ballots.empty()) in.ballots = eval::parse_ballots(input("ballots", o->ballots));
    in.ballot_configs = split_configs(o->configs);
    in.population_std = !o->sample_std;
    const auto r = eval::build_report(in);
    for (const auto& p : eval::write_report(r, o->out, manifest())) out_ << p << "\n";
    if (!o->plot_data.empty()) {
      for (const auto& p : eval::emit_plot_data(r.document, o->plot_data, [this](const std::string& s) { note(s); })) {
        out_ << p << "\n";
      }
    }
    return kExitOk;
  };

  auto& jd = add(group, "judge", "rate qualitative responses on the Likert scale", "eval judge");
  jd.opt("questions", o->questions, "question set (.json)", true);
  jd.opt("responses", o->responses, "responses (.jsonl)", true);
  jd.opt("backend", o->backend, "heuristic, or an http(s) URL of a judge service");
  jd.opt("log", o->log, "append every judge exchange here (.jsonl)");
  jd.opt("out", o->out, "ratings (.csv)", true);
  jd.run = [this, o, qa] {
    auto [qs, rs] = qa();
    std::unique_ptr<eval::JudgeBackend> backend;
    std::ofstream log;
    if (!o->log.empty()) log.open(o->log, std::ios::app);
    if (o->backend == "heuristic") {
      backend = std::make_unique<eval::HeuristicJudge>();
    } else {
      backend = std::make_unique<eval::RemoteJudge>(o->backend, [&log](const eval::JudgeExchange& x) {
        if (log) {
          log << json{{"request", x.request}, {"response", x.response}, {"status", x.status}, {"error", x.error}}.dump() << "\n";
        }
      });
    }
    std::string csv = "evaluator,config,question,accuracy,quality\n";
    for (const auto& r : eval::judge_all(rs, qs, *backend)) {
      csv += eval::csv_field(r.evaluator) + "," + eval::csv_field(r.config) + "," + eval::csv_field(r.question) + "," +
             std::to_string(r.accuracy) + "," + std::to_string(r.quality) + "\n";
    }
    write_file_bytes(o->out, csv);
    out_ << o->out << "\n";
    return kExitOk;
  };
}

inline void Cli::build_misc() {
  struct O {
    std::string corpus, adapter, out;
    std::uint64_t seed;
    std::size_t bytes = 200000;
    double step = 0, tolerance = 0;
  };
  auto o = std::make_shared<O>();
  o->seed = seed_default_;
  const auto suite = grad_suite_options();
  o->step = suite.step;
  o->tolerance = suite.tolerance;

  auto& st = add(&app_, "stats", "token counts under the byte tokenizer", "stats");
  st.opt("corpus", o->corpus, "text file", true);
  st.run = [this, o] {
    const auto s = corpus_stats(input("corpus", o->corpus));
    out_ << json{{"total_tokens", s.total_tokens}, {"unique_tokens", s.unique_tokens}}.dump() << "\n";
    return kExitOk;
  };

  auto& gc = add(&app_, "grad-check", "autodiff audit against five-point finite differences (float64)", "grad-check");
  gc.opt("step", o->step, "finite-difference step");
  gc.opt("tolerance", o->tolerance, "maximum relative error");
  gc.run = [this, o] {
    auto opt = grad_suite_options();
    opt.step = o->step;
    opt.tolerance = o->tolerance;
    std::size_t failed = 0;
    run_gradient_suite(opt, [&](const GradCaseResult& r) {
      char line[200];
      std::snprintf(line, sizeof line, "%-24s %s  rel %.3e  (%zu coords, %.2fs)\n", r.name.c_str(), r.report.passed ? "ok  " : "FAIL",
                    r.report.max_rel_error, r.report.coords_checked, r.seconds);
      out_ << line;
      failed += !r.report.passed;
    });
    if (failed) throw NumericError(std::to_string(failed) + " gradient case(s) exceed the tolerance");
    return kExitOk;
  };

  auto& sp = add(&app_, "spectrum", "top r+2 singular values of every adapter delta", "spectrum");
  sp.opt("adapter", o->adapter, "adapter (.lkd)", true);
  sp.opt("seed", o->seed, "subspace-iteration seed");
  sp.run = [this, o] {
    auto [adapter, backbone] = read_adapter(o->adapter);
    json j = json::object();
    for (const auto& e : adapter.entries) j[e.target] = adapter_spectrum(e, adapter.factor(), o->seed);
    out_ << j.dump(2) << "\n";
    return kExitOk;
  };

  auto& co = add(&app_, "corpus", "regenerate the bundled toy corpus", "corpus");
  co.opt("out", o->out, "output path", true);
  co.opt("seed", o->seed, "grammar seed");
  co.opt("bytes", o->bytes, "approximate size");
  co.run = [this, o] {
    write_file_bytes(o->out, generate_toy_corpus(o->seed, o->bytes));
    out_ << o->out << "\n";
    return kExitOk;
  };
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    Cli cli(out, err);
    return cli.run(std::move(args));
  } catch (const Error& e) {
    err << "lkd: " << e.what() << "\n";
    return exit_code(e.kind());
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    Cli cli(out, err);
    return cli.run(args);
  } catch (const Error& e) {
    err << "lkd: " << e.what() << "\n";
    return exit_code(e.kind());
  }
}

}  // namespace lkd::cli
