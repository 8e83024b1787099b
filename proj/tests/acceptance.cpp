// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned here.
//
//   acceptance [--full] [--clock FILE] [--stamp FILE] [--work DIR]
//
// The default is the reduced desk run (2 epochs per stage); --full (or
// LKD_ACCEPTANCE_FULL=1) runs 10. --stamp writes the suite start time and
// exits; --clock reads it so criterion 8 times the whole ctest invocation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lkd/cli.hpp"
#include "lkd/distill.hpp"
#include "lkd/eval/likert.hpp"
#include "lkd/eval/questions.hpp"
#include "lkd/eval/ranking.hpp"
#include "lkd/eval/scoring.hpp"
#include "lkd/grad_suite.hpp"
#include "lkd/lora.hpp"
#include "lkd/rag.hpp"
#include "lkd/toy_corpus.hpp"

using namespace lkd;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double wall_now() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Sub-checks of one criterion; the criterion passes when all of them do.
struct Verdict {
  bool pass = true;
  std::vector<std::string> parts;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    parts.push_back(std::string(ok ? "" : "FAILED ") + what);
  }
};

struct Options {
  bool full = false;
  std::string clock;
  fs::path work = fs::temp_directory_path() / "lkd_acceptance";
};

// 1 -------------------------------------------------------------------------

Verdict gradient_suite_criterion() {
  Verdict v;
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_case, failed;
  const auto results = run_gradient_suite();
  for (const auto& r : results) {
    if (r.report.max_rel_error > worst) {
      worst = r.report.max_rel_error;
      worst_case = r.name;
    }
    if (!r.report.passed || !(r.report.max_rel_error <= 1e-5)) failed += " " + r.name;
  }
  const double secs = since(t0);
  v.check(failed.empty(), fmt("%zu cases, max rel err %.2e (%s) <= 1e-5%s", results.size(), worst, worst_case.c_str(),
                              failed.empty() ? "" : (", failing:" + failed).c_str()));
  v.check(secs < 60.0, fmt("%.1f s < 60 s", secs));
  return v;
}

// 2 -------------------------------------------------------------------------

// Smallest window count whose trailing split leaves exactly `train` windows.
std::size_t windows_for_train(std::size_t train, double val_fraction) {
  for (std::size_t n = train + 1;; ++n) {
    if (split_windows(n, val_fraction).train.size() == train) return n;
  }
}

Verdict lora_criterion() {
  Verdict v;
  const Model<float> model = init_model<float>(ModelConfig::student(42));
  const auto probe = encode("The capacitor stores charge between two plates.").ids;

  auto adapter = attach(model, default_lora_targets(model.config), kDefaultLoraRank, kDefaultLoraScale, 42);
  const auto base = forward_logits(model, probe);
  const auto adapted = forward_logits(model, probe, &adapter);
  v.check(std::ranges::equal(base.data(), adapted.data()), "zero-init adapter output bit-identical");

  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 1;
  cfg.seq_len = 16;
  cfg.epochs = 1;
  cfg.seed = 42;
  const std::size_t n = windows_for_train(100, cfg.val_fraction);
  const auto text = generate_toy_corpus(42, n * (cfg.seq_len + 1) + 64);
  auto stream = encode_bytes(text);
  stream.resize(n * (cfg.seq_len + 1));
  const auto split = split_windows(n, cfg.val_fraction);
  const BatchPlan train(stream, split.train, cfg.seq_len, cfg.batch_size, cfg.seed);
  const BatchPlan val(stream, split.val, cfg.seq_len, cfg.batch_size, cfg.seed);
  const std::string before = encode_model(model);
  const LoraAdapter<float>* a = &adapter;
  LossFn loss = [&model, a](Tape<float>& tape, const Batch& b) { return StepLoss{sequence_loss(tape, model, b, a), {}}; };
  const auto run = train_loop(adapter.named_parameters(), train, val, cfg, loss);
  const std::size_t steps = run.history.steps.size();
  v.check(steps == 100 && encode_model(model) == before, fmt("backbone bytes unchanged after %zu steps", steps));

  // Last-epoch weights are what the loop leaves in place; B is non-zero now.
  double worst = 0;
  const Model<float> merged = merge(model, adapter);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto ids = encode(generate_toy_corpus(100 + seed, 200).substr(0, 100)).ids;
    const auto x = forward_logits(model, ids, &adapter), y = forward_logits(merged, ids);
    for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(double(x[i]) - double(y[i])));
  }
  v.check(worst <= 1e-4, fmt("merge vs adapted |diff|inf %.2e <= 1e-4", worst));

  double tail = 0;
  for (const auto& e : adapter.entries) {
    const auto sv = adapter_spectrum(e, adapter.factor(), 42);
    const std::size_t r = adapter.rank;
    if (!(sv[0] > 0)) tail = INFINITY;
    for (std::size_t i = r; i < sv.size(); ++i) tail = std::max(tail, sv[i] / sv[0]);
  }
  v.check(tail <= 1e-6, fmt("sigma_{r+1..r+2}/sigma_1 <= %.1e over %zu deltas (<= 1e-6)", tail, adapter.entries.size()));
  return v;
}

// 3 -------------------------------------------------------------------------

Tensor<double> gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed, double sd) {
  Rng rng(seed);
  std::vector<double> x(rows * cols);
  for (auto& e : x) e = rng.normal(0.0, sd);
  return Tensor<double>({rows, cols}, x);
}

std::vector<int> targets(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (auto& e : t) e = static_cast<int>(rng.below(vocab));
  return t;
}

Verdict kd_criterion() {
  Verdict v;
  double ce_gap = 0, line_gap = 0, distill_equal = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = gaussian(8, kVocabSize, seed, 2.0), t = gaussian(8, kVocabSize, seed + 1000, 2.0);
    const auto y = targets(8, kVocabSize, seed);
    Tape<double> tape = Tape<double>::no_grad();
    auto total = [&](double alpha) { return kd_loss<double>(tape, s, t, y, KdConfig{alpha, 2.0, true}).total.item(); };
    const double ce = ops::cross_entropy(tape, s, y).item();
    ce_gap = std::max(ce_gap, std::abs(total(0.0) - ce));
    const double l0 = total(0.0), l1 = total(1.0);
    for (double alpha : {0.1, 0.25, 0.5, 0.8, 0.9}) {
      line_gap = std::max(line_gap, std::abs(total(alpha) - ((1 - alpha) * l0 + alpha * l1)));
    }
    distill_equal = std::max(distill_equal, std::abs(kd_loss<double>(tape, s, s.clone(), y, KdConfig{}).distill));
  }
  v.check(ce_gap <= 1e-9, fmt("alpha=0 vs CE %.1e <= 1e-9", ce_gap));
  v.check(distill_equal == 0.0, "equal-logits distill term == 0");
  v.check(line_gap <= 1e-9, fmt("affine in alpha, max gap %.1e <= 1e-9", line_gap));

  // Worst case for the audit: teacher flags on, both forwards on one tape.
  auto teacher = init_model<double>(ModelConfig{2, 32, 2, 64, kVocabSize, 32, 1});
  auto student = init_model<double>(ModelConfig{1, 16, 2, 32, kVocabSize, 32, 2});
  auto adapter = attach(student, default_lora_targets(student.config), 2, 4.0, 1);
  teacher.set_trainable(true);
  Batch b{2, 16, {}, {}, {}};
  const auto ids = encode_bytes(generate_toy_corpus(3, 64));
  b.inputs.assign(ids.begin(), ids.begin() + 32);
  b.targets.assign(ids.begin() + 1, ids.begin() + 33);
  Tape<double> tape;
  const auto tl = forward_logits(tape, teacher, b);
  const auto sl = forward_logits(tape, student, b, &adapter);
  tape.backward(kd_loss<double>(tape, sl, tl, b.targets, KdConfig{}).total);
  std::size_t audited = 0;
  std::string touched;
  for (const auto& [name, p] : teacher.named_parameters()) {
    ++audited;
    for (double g : p.grad_view()) {
      if (g != 0.0) {
        touched += " " + name;
        break;
      }
    }
  }
  double student_grad = 0;
  for (const auto& [name, p] : adapter.named_parameters()) {
    for (double g : p.grad_view()) student_grad += std::abs(g);
  }
  v.check(touched.empty() && student_grad > 0,
          fmt("teacher gradient zero on all %zu named tensors%s", audited, touched.empty() ? "" : (":" + touched).c_str()));
  return v;
}

// 4 -------------------------------------------------------------------------

Verdict desk_run_criterion(const Options& opt) {
  Verdict v;
  const std::size_t epochs = opt.full ? 10 : 2;
  const auto text = read_file_bytes(std::string(LKD_SOURCE_DIR) + "/data/toy_corpus.txt");
  const Model<float> teacher = init_model<float>(ModelConfig::teacher(42));
  const Model<float> student = init_model<float>(ModelConfig::student(42));
  PipelineConfig cfg;
  cfg.teacher_train.epochs = epochs;
  cfg.student_train.epochs = epochs;
  cfg.lora.seed = 42;

  PipelineOptions po;
  po.on_epoch = [](const std::string& stage, const EpochRecord& e) {
    std::fprintf(stderr, "  %s epoch %zu val %.4f\n", stage.c_str(), e.epoch, e.val.loss);
  };
  const auto t0 = Clock::now();
  const auto r = lora_kd_pipeline(teacher, student, text, cfg, po);
  const double secs = since(t0);
  const double ratio = r.distill_selected / r.distill_step0;
  v.check(secs < 15 * 60, fmt("%zu+%zu epochs in %.0f s < 900 s", epochs, epochs, secs));
  v.check(ratio <= 0.5, fmt("distill %.5f -> %.5f at epoch %zu, ratio %.3f <= 0.5", r.distill_step0, r.distill_selected,
                            r.student_run.selected_checkpoint().epoch, ratio));
  v.check(r.after.top1_agreement > r.before.top1_agreement,
          fmt("top-1 agreement %.4f -> %.4f", r.before.top1_agreement, r.after.top1_agreement));

  PipelineConfig zero = cfg;
  zero.kd.alpha = 0.0;
  const auto kd = lora_kd_pipeline(teacher, student, text, zero);
  const auto plain = lora_finetune(student, prepare_corpus(text, zero.student_train), zero.student_train, zero.lora);
  bool same = kd.student_run.history.steps.size() == plain.run.history.steps.size();
  for (std::size_t i = 0; same && i < plain.run.history.steps.size(); ++i) {
    same = kd.student_run.history.steps[i].total == plain.run.history.steps[i].total;
  }
  same = same && encode_adapter(kd.student_adapter, student.config) == encode_adapter(plain.adapter, student.config);
  v.check(same, fmt("alpha=0 pipeline bit-matches plain student LoRA (%zu steps)", plain.run.history.steps.size()));
  return v;
}

// 5 -------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string bytes = read_file_bytes(e.path().string());
    if (e.path().extension() == ".jsonl") {
      // Histories carry wall-clock time by format; compare everything else.
      std::istringstream in(bytes);
      std::string line, kept;
      while (std::getline(in, line)) {
        auto j = json::parse(line);
        j.erase("wall_ms");
        kept += j.dump() + "\n";
      }
      bytes = kept;
    }
    out[e.path().filename().string()] = std::move(bytes);
  }
  return out;
}

Verdict determinism_criterion(const Options& opt) {
  Verdict v;
  const fs::path dir = opt.work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto corpus = (dir / "corpus.txt").string();
  write_file_bytes(corpus, generate_toy_corpus(42, 40000));
  const auto out = (dir / "run").string();
  const std::vector<std::string> args{"distill",           "--corpus",         corpus,          "--out",      out,
                                      "--teacher-preset", "2,32,2,64,64",     "--student-preset", "1,16,2,32,64",
                                      "--seq-len",         "64",               "--epochs",      "2",          "--lr",
                                      "1e-3"};
  std::ostringstream sink;
  std::map<std::string, std::string> first;
  bool ran = true;
  for (int i = 0; i < 2 && ran; ++i) {
    fs::remove_all(out);
    ran = cli::run(args, sink, sink) == cli::kExitOk;
    if (ran && i == 0) first = snapshot(out);
  }
  std::size_t identical = 0;
  std::string differing;
  if (ran) {
    const auto second = snapshot(out);
    for (const auto& [name, bytes] : first) {
      auto it = second.find(name);
      if (it != second.end() && it->second == bytes) {
        ++identical;
      } else {
        differing += " " + name;
      }
    }
    if (second.size() != first.size()) differing += " (file sets differ)";
  }
  const bool has_all = first.count("teacher_adapter.lkd") && first.count("student_adapter.lkd") && first.count("report.json") &&
                       first.count("student_001.lkd");
  v.check(ran && has_all && differing.empty(),
          ran ? fmt("two distill invocations: %zu/%zu files byte-identical%s", identical, first.size(),
                    differing.empty() ? "" : (", differing:" + differing).c_str())
              : "distill invocation failed: " + sink.str());

  // Interrupted after epoch 1 and resumed vs uninterrupted.
  const Model<float> model = init_model<float>(ModelConfig{1, 16, 2, 32, kVocabSize, 32, 3});
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 4;
  cfg.seq_len = 32;
  cfg.epochs = 3;
  cfg.seed = 11;
  const Corpus c = prepare_corpus(generate_toy_corpus(9, 12000), cfg);
  auto run = [&](TrainOptions o) {
    auto adapter = attach(model, default_lora_targets(model.config), 2, 4.0, 1);
    const LoraAdapter<float>* a = &adapter;
    const BatchPlan train(c.stream, c.split.train, cfg.seq_len, cfg.batch_size, cfg.seed);
    const BatchPlan val(c.stream, c.split.val, cfg.seq_len, cfg.batch_size, cfg.seed);
    LossFn loss = [&model, a](Tape<float>& tape, const Batch& b) { return StepLoss{sequence_loss(tape, model, b, a), {}}; };
    return train_loop(adapter.named_parameters(), train, val, cfg, loss, o);
  };
  const auto whole = run({});
  TrainOptions stop;
  stop.stop_after_epoch = 1;
  const auto part = run(stop);
  TrainOptions resume;
  resume.resume = decode_lkd(part.bytes(0), "checkpoint");
  const auto rest = run(resume);
  bool same = rest.checkpoints.size() == whole.checkpoints.size();
  for (std::size_t i = 1; same && i < whole.checkpoints.size(); ++i) same = rest.bytes(i) == whole.bytes(i);
  same = same && to_json(rest.history).dump() == to_json(whole.history).dump();
  v.check(same, "resume after epoch 1 reproduces epochs 2-3 byte-for-byte");
  return v;
}

// 6 -------------------------------------------------------------------------

RetrievalIndex toy_index(std::size_t n_chunks, std::size_t chunk_size) {
  auto chunks = chunk_corpus({{"toy", generate_toy_corpus(11, chunk_size * (n_chunks + 2))}}, chunk_size, 8);
  chunks.resize(n_chunks);
  return build_index(chunks);
}

Verdict rag_criterion() {
  Verdict v;
  const auto index = toy_index(50, 64);
  const Model<float> model = init_model<float>(ModelConfig{1, 16, 2, 32, kVocabSize, 64, 3});

  double sum_gap = 0;
  for (const char* q : {"resistor current", "the capacitor stores charge", "diode bias", "unrelated words"}) {
    for (std::size_t k : {1u, 3u, 10u, 50u}) {
      double s = 0;
      for (const auto& h : retrieve(index, q, k).hits) s += h.probability;
      sum_gap = std::max(sum_gap, std::abs(s - 1.0));
    }
  }
  v.check(sum_gap <= 1e-9, fmt("retrieve probabilities sum to 1 within %.1e (<= 1e-9)", sum_gap));

  const std::string q = "what does a resistor do?", y = " limits";
  const auto top = retrieve(index, q, 1).hits.at(0);
  const auto ctx = assemble(index.chunks[top.chunk_id].text, q, model.config.max_seq_len + 1 - encode_bytes(y).size());
  const double single = std::exp(sequence_log_prob(model, ctx.ids, encode_bytes(y)));
  v.check(rag_score(index, model, q, y, 1).probability == single, "k=1 score equals single-context probability exactly");

  const auto two = retrieve(index, q, 2);
  double mixture = 0;
  for (const auto& h : two.hits) {
    // one forward pass per chunk, softmax of the last row by hand in double
    const auto ctx2 = assemble(index.chunks[h.chunk_id].text, q, model.config.max_seq_len);
    const auto logits = forward_logits(model, ctx2.ids);
    const std::size_t V = logits.dim(1), row = logits.dim(0) - 1;
    const auto z = logits.data().subspan(row * V, V);
    double mx = z[0], norm = 0;
    for (float x : z) mx = std::max(mx, static_cast<double>(x));
    for (float x : z) norm += std::exp(static_cast<double>(x) - mx);
    mixture += h.probability * std::exp(static_cast<double>(z['!' + kByteOffset]) - mx) / norm;
  }
  const double mix_gap = std::abs(rag_score(index, model, q, "!", 2).probability - mixture);
  v.check(mix_gap <= 1e-9, fmt("2-chunk score vs two-forward-pass mixture %.1e <= 1e-9", mix_gap));

  double step_gap = 0;
  std::size_t steps = 0;
  for (double temp : {0.0, 0.9}) {
    const auto g = rag_generate(index, model, "a capacitor stores", 4, 12, temp, 0, 2, true,
                                static_cast<const LoraAdapter<float>*>(nullptr), true);
    for (const auto& row : g.step_distributions) {
      step_gap = std::max(step_gap, std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0));
      ++steps;
    }
  }
  v.check(steps > 0 && step_gap <= 1e-6, fmt("%zu generation steps sum to 1 within %.1e (<= 1e-6)", steps, step_gap));

  std::size_t self = 0;
  for (const auto& c : index.chunks) self += retrieve(index, c.text, 1).hits.at(0).chunk_id == c.id;
  v.check(self == index.chunks.size(), fmt("self-retrieval rank 1 on %zu/%zu chunks", self, index.chunks.size()));
  return v;
}

// 7 -------------------------------------------------------------------------

Verdict harness_criterion() {
  Verdict v;
  const std::string fx = LKD_FIXTURE_DIR;
  const auto questions = eval::load_question_set(fx + "/raq_fixture.json");
  const auto responses = eval::load_responses(fx + "/responses_fixture.jsonl");
  const auto tf = eval::score_tf(responses, questions).at(0);
  v.check(tf.correct == 21 && tf.total == 25 && tf.text == "84.0", fmt("%zu of %zu -> \"%s\"", tf.correct, tf.total, tf.text.c_str()));

  const auto ballots = eval::load_ballots(fx + "/ballots_51.jsonl");
  const auto h = eval::ranking_histograms(ballots);
  const auto worst = std::accumulate(h.worst.begin(), h.worst.end(), std::size_t{0});
  const auto top = std::accumulate(h.top_half.begin(), h.top_half.end(), std::size_t{0});
  v.check(h.configs.size() == 6 && h.ballots == 51 && worst == 51 && top == 3 * 51,
          fmt("%zu ballots, %zu configs: sum worst %zu, sum top-half %zu", h.ballots, h.configs.size(), worst, top));

  // Integer scores make the sums exact; the oracle only divides at the end.
  const auto likert = eval::load_likert_csv(fx + "/likert_fixture.csv");
  double cell_gap = 0, r_gap = 0;
  std::size_t cells = 0, pairs = 0;
  for (const auto& c : eval::likert_aggregate(likert)) {
    long long n = 0, s = 0, ss = 0;
    for (const auto& rec : likert) {
      if (rec.config != c.config || rec.evaluator != c.evaluator) continue;
      const long long x = eval::score_of(rec, c.dimension);
      ++n, s += x, ss += x * x;
    }
    const long double mean = static_cast<long double>(s) / n;
    const long double sd = std::sqrt(static_cast<long double>(n * ss - s * s)) / n;
    cell_gap = std::max({cell_gap, double(std::abs(c.stats.mean - mean)), double(std::abs(c.stats.sd - sd))});
    ++cells;
  }
  for (const auto& corr : eval::likert_correlations(likert)) {
    std::map<std::string, int> a, b;
    for (const auto& rec : likert) {
      if (rec.config != corr.config) continue;
      if (rec.evaluator == corr.evaluator_a) a[rec.question] = eval::score_of(rec, corr.dimension);
      if (rec.evaluator == corr.evaluator_b) b[rec.question] = eval::score_of(rec, corr.dimension);
    }
    long long n = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (const auto& [qid, x] : a) {
      auto it = b.find(qid);
      if (it == b.end()) continue;
      const long long y = it->second;
      ++n, sx += x, sy += y, sxx += x * x, syy += y * y, sxy += x * y;
    }
    const long double r = static_cast<long double>(n * sxy - sx * sy) /
                          std::sqrt(static_cast<long double>(n * sxx - sx * sx) * static_cast<long double>(n * syy - sy * sy));
    r_gap = std::max(r_gap, corr.r ? double(std::abs(*corr.r - r)) : INFINITY);
    ++pairs;
  }
  v.check(cells > 0 && cell_gap <= 1e-12, fmt("%zu likert cells vs oracle %.1e <= 1e-12", cells, cell_gap));
  v.check(pairs > 0 && r_gap <= 1e-12, fmt("%zu pearson values vs oracle %.1e <= 1e-12", pairs, r_gap));

  const auto& q1b = questions.at("1b");
  const auto patterns = eval::default_refusal_patterns();
  const auto right = eval::score_reasoning("The answer is 3 μm.", q1b, patterns).outcome;
  const auto wrong = eval::score_reasoning("The answer is 330 nm.", q1b, patterns).outcome;
  const auto refused = eval::score_reasoning("I cannot answer that question.", q1b, patterns).outcome;
  v.check(right == eval::Outcome::kCorrect && wrong == eval::Outcome::kIncorrect && refused == eval::Outcome::kRefused,
          "row 1b: \"3 μm\" " + eval::to_string(right) + ", \"330 nm\" " + eval::to_string(wrong) + ", refusal " +
              eval::to_string(refused));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  const char* env = std::getenv("LKD_ACCEPTANCE_FULL");
  opt.full = env && std::string(env) == "1";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--full") {
      opt.full = true;
    } else if (a == "--stamp" && i + 1 < argc) {
      write_file_bytes(argv[++i], fmt("%.3f\n", wall_now()));
      return 0;
    } else if (a == "--clock" && i + 1 < argc) {
      opt.clock = argv[++i];
    } else if (a == "--work" && i + 1 < argc) {
      opt.work = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--full] [--clock FILE] [--stamp FILE] [--work DIR]\n");
      return 1;
    }
  }
  const double started = wall_now();
  std::printf("acceptance (%s desk run)\n", opt.full ? "full 10-epoch" : "reduced 2-epoch");
  std::fflush(stdout);

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradient suite", gradient_suite_criterion},
      {"LoRA invariants", lora_criterion},
      {"KD loss contract", kd_criterion},
      {"LoRA-KD desk run", [&] { return desk_run_criterion(opt); }},
      {"determinism", [&] { return determinism_criterion(opt); }},
      {"RAG", rag_criterion},
      {"harness arithmetic", harness_criterion},
  };
  bool all = true;
  int id = 0;
  for (const auto& [name, fn] : criteria) {
    ++id;
    Verdict v;
    const auto t0 = Clock::now();
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.check(false, std::string("threw: ") + e.what());
    }
    std::string detail;
    for (const auto& p : v.parts) detail += (detail.empty() ? "" : "; ") + p;
    std::printf("criterion %d %s: %s  [%s] (%.1f s)\n", id, name, v.pass ? "PASS" : "FAIL", detail.c_str(), since(t0));
    std::fflush(stdout);
    all = all && v.pass;
  }

  double start = started;
  std::string basis = "this binary";
  if (!opt.clock.empty() && fs::exists(opt.clock)) {
    start = std::stod(read_file_bytes(opt.clock));
    basis = "whole ctest run";
  }
  const double total = wall_now() - start;
  const bool fast = total < 20 * 60;
  std::printf("criterion 8 full verification suite: %s  [%.0f s < 1200 s, %s, %s desk run]\n", fast ? "PASS" : "FAIL", total,
              basis.c_str(), opt.full ? "10-epoch" : "2-epoch");
  all = all && fast;
  std::printf("acceptance %s\n", all ? "PASS" : "FAIL");
  return all ? 0 : 1;
}
