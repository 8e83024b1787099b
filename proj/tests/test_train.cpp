#include <cmath>
#include <filesystem>
#include <map>

#include <gtest/gtest.h>

#include "lkd/lora.hpp"
#include "lkd/train.hpp"

using namespace lkd;

namespace {

std::vector<int> random_stream(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> ids(n);
  for (auto& id : ids) id = static_cast<int>(kByteOffset + rng.below(256));
  return ids;
}

std::string toy_text(std::size_t n_sentences) {
  const char* subjects[] = {"the resistor", "a capacitor", "the diode", "an inductor"};
  const char* verbs[] = {"limits", "stores", "blocks", "filters"};
  const char* objects[] = {"current", "charge", "reverse bias", "noise"};
  Rng rng(5);
  std::string s;
  for (std::size_t i = 0; i < n_sentences; ++i) {
    s += subjects[rng.below(4)];
    s += ' ';
    s += verbs[rng.below(4)];
    s += ' ';
    s += objects[rng.below(4)];
    s += ". ";
  }
  return s;
}

TrainConfig tiny_cfg() {
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.batch_size = 4;
  c.seq_len = 16;
  c.epochs = 3;
  c.val_fraction = 0.2;
  c.seed = 11;
  return c;
}

ModelConfig tiny_model() { return {1, 16, 2, 32, kVocabSize, 16, 3}; }

struct Fixture {
  Model<float> model = init_model<float>(tiny_model());
  std::optional<LoraAdapter<float>> adapter;
  std::vector<int> stream = encode_bytes(toy_text(60));
  TrainConfig cfg = tiny_cfg();

  explicit Fixture(bool lora) {
    if (lora) adapter = attach(model, default_lora_targets(model.config), 2, 4.0, 1);
  }

  std::pair<BatchPlan, BatchPlan> plans() const {
    auto split = split_windows(window_count(stream.size(), cfg.seq_len), cfg.val_fraction);
    return {BatchPlan(stream, split.train, cfg.seq_len, cfg.batch_size, cfg.seed),
            BatchPlan(stream, split.val, cfg.seq_len, cfg.batch_size, cfg.seed)};
  }

  LossFn loss() const {
    const LoraAdapter<float>* a = adapter ? &*adapter : nullptr;
    return [this, a](Tape<float>& tape, const Batch& b) { return StepLoss{sequence_loss(tape, model, b, a), {}}; };
  }

  TrainResult run(TrainOptions opt = {}) {
    auto [train, val] = plans();
    return train_loop(trainable_parameters(model, adapter ? &*adapter : nullptr), train, val, cfg, loss(), opt);
  }
};

}  // namespace

TEST(Batches, TwoWindowsFromTwiceWindowLength) {
  auto plan = make_batches(random_stream(2 * 17, 1), 16, 4, 0);
  EXPECT_EQ(plan.windows().size(), 2u);
  EXPECT_EQ(plan.epoch(1).size(), 1u);
  EXPECT_EQ(plan.epoch(1)[0].batch, 2u);
}

TEST(Batches, WindowCountMatchesCountingOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t L = 1 + rng.below(40);
    const std::size_t n = L + 1 + rng.below(2000);
    std::size_t oracle = 0;
    for (std::size_t start = 0; start + L + 1 <= n; start += L + 1) ++oracle;
    EXPECT_EQ(make_batches(random_stream(n, trial), L, 3, 0).windows().size(), oracle);
  }
}

TEST(Batches, TooShortIsDegenerate) {
  EXPECT_THROW(make_batches(random_stream(16, 1), 16, 4, 0), DegenerateInputError);
}

TEST(Batches, ShuffleIsSeededAndCoversEveryWindowOnce) {
  auto stream = random_stream(17 * 37 + 5, 2);
  auto a = make_batches(stream, 16, 5, 9), b = make_batches(stream, 16, 5, 9), c = make_batches(stream, 16, 5, 10);
  EXPECT_EQ(a.epoch_order(1), b.epoch_order(1));
  EXPECT_NE(a.epoch_order(1), a.epoch_order(2));
  EXPECT_NE(a.epoch_order(1), c.epoch_order(1));
  auto batches = a.epoch(1);
  ASSERT_EQ(batches.size(), 8u);  // 37 windows: seven of 5, one of 2
  EXPECT_EQ(batches.back().batch, 2u);
  std::vector<std::size_t> seen;
  for (const auto& bt : batches) seen.insert(seen.end(), bt.windows.begin(), bt.windows.end());
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], i);
}

TEST(Batches, TargetsAreInputsShiftedByOne) {
  auto stream = random_stream(17 * 3, 4);
  auto b = window_batch(stream, std::vector<std::size_t>{2, 0}, 16);
  for (std::size_t t = 0; t < 16; ++t) {
    EXPECT_EQ(b.inputs[t], stream[34 + t]);
    EXPECT_EQ(b.targets[t], stream[35 + t]);
    EXPECT_EQ(b.inputs[16 + t], stream[t]);
    EXPECT_EQ(b.targets[16 + t], stream[t + 1]);
  }
}

TEST(Split, TrailingWindowsValidateAndNeverTrain) {
  for (std::size_t n : {2u, 10u, 37u, 1550u}) {
    auto s = split_windows(n, 0.1);
    EXPECT_GE(s.val.size(), 1u);
    EXPECT_EQ(s.train.size() + s.val.size(), n);
    EXPECT_EQ(s.val.back(), n - 1);
    std::set<std::size_t> train(s.train.begin(), s.train.end());
    for (std::size_t w : s.val) EXPECT_EQ(train.count(w), 0u);
    EXPECT_LT(s.train.back(), s.val.front());
  }
  EXPECT_THROW(split_windows(1, 0.1), DegenerateInputError);
}

TEST(CorpusStats, Examples) {
  auto s = corpus_stats("aab");
  EXPECT_EQ(s.total_tokens, 3u);
  EXPECT_EQ(s.unique_tokens, 2u);
  s = corpus_stats("");
  EXPECT_EQ(s.total_tokens, 0u);
  EXPECT_EQ(s.unique_tokens, 0u);
}

TEST(CorpusStats, MatchesHistogramOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::string text(rng.below(500), '\0');
    const std::size_t alphabet = 1 + rng.below(256);
    for (auto& c : text) c = static_cast<char>(rng.below(alphabet));
    std::map<char, int> hist;
    for (char c : text) ++hist[c];
    auto s = corpus_stats(text);
    EXPECT_EQ(s.total_tokens, text.size());
    EXPECT_EQ(s.unique_tokens, hist.size());
  }
}

TEST(Adam, ZeroGradientFromFreshStateLeavesParams) {
  Tensor<double> p({3}, {1.0, -2.0, 0.5}, true);
  p.grad();
  AdamState<double> st;
  adam_step<double>({{"p", p}}, st, TrainConfig{});
  EXPECT_EQ(p.values(), (std::vector<double>{1.0, -2.0, 0.5}));
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepClosedForm) {
  // m = 0.1, v = 0.001; bias correction gives m_hat = v_hat = 1, so the step is -lr / (1 + eps).
  Tensor<double> p({1}, {1.0}, true);
  p.grad()[0] = 1.0;
  AdamState<double> st;
  TrainConfig cfg;
  adam_step<double>({{"p", p}}, st, cfg);
  EXPECT_NEAR(p[0], 0.999900000001, 1e-15);
  EXPECT_NEAR(st.m[0][0], 0.1, 1e-15);
  EXPECT_NEAR(st.v[0][0], 0.001, 1e-15);
}

TEST(Adam, QuadraticConvergesMonotonically) {
  Tensor<double> p({1}, {1.0}, true);
  AdamState<double> st;
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  double prev = 1.0;
  for (int step = 1; step <= 1000; ++step) {
    p.zero_grad();
    p.grad()[0] = 2.0 * p[0];
    adam_step<double>({{"p", p}}, st, cfg);
    if (step > 10) EXPECT_LT(std::abs(p[0]), prev) << step;
    prev = std::abs(p[0]);
  }
  EXPECT_LT(std::abs(p[0]), 0.01);
}

TEST(Adam, StateMismatchIsConformanceError) {
  Tensor<double> p({2}, {1.0, 2.0}, true);
  AdamState<double> st;
  st.m = {{0.0}};
  st.v = {{0.0}};
  EXPECT_THROW(adam_step<double>({{"p", p}}, st, TrainConfig{}), ConformanceError);
}

TEST(Clip, PostClipNormBounded) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    NamedTensors<float> ps;
    for (int k = 0; k < 3; ++k) {
      Tensor<float> t = Tensor<float>::zeros({5, 7}, true);
      for (auto& g : t.grad()) g = static_cast<float>(rng.normal(0.0, trial));
      ps.emplace_back("t" + std::to_string(k), t);
    }
    const double before = clip_grad_norm(ps, 1.0);
    const double after = global_grad_norm(ps);
    EXPECT_LE(after, 1.0 + 1e-6);
    if (before <= 1.0) EXPECT_EQ(after, before);
  }
}

TEST(EarlyStop, Examples) {
  std::vector<CheckpointInfo> c{{1, 3.0}, {2, 2.0}, {3, 2.5}};
  EXPECT_EQ(c[early_stop_select(c)].epoch, 2u);
  std::vector<CheckpointInfo> tie{{1, 2.0}, {2, 2.0}};
  EXPECT_EQ(tie[early_stop_select(tie)].epoch, 1u);
  EXPECT_THROW(early_stop_select(std::vector<CheckpointInfo>{}), ContractError);
}

TEST(EarlyStop, MatchesBruteForceArgmin) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<CheckpointInfo> c;
    const std::size_t n = 1 + rng.below(25);
    for (std::size_t e = 1; e <= n; ++e) c.push_back({e, static_cast<double>(rng.below(6))});
    std::size_t best_epoch = 0;
    double best = INFINITY;
    for (const auto& x : c) {
      if (x.val_loss < best) best = x.val_loss, best_epoch = x.epoch;
    }
    EXPECT_EQ(c[early_stop_select(c)].epoch, best_epoch);
  }
}

TEST(TrainLoop, LossDecreasesAndEveryEpochIsCheckpointed) {
  Fixture f(false);
  auto r = f.run();
  ASSERT_EQ(r.checkpoints.size(), 3u);
  ASSERT_EQ(r.history.epochs.size(), 3u);
  EXPECT_LT(r.history.epochs.back().train_loss, r.history.epochs.front().train_loss);
  EXPECT_LT(r.history.epochs.back().val.loss, r.history.initial_val.loss);
  auto file = decode_lkd(r.bytes(r.selected), "checkpoint");
  EXPECT_TRUE(file.has_tensor("param/tok_emb"));
  EXPECT_TRUE(file.has_tensor("adam.m/tok_emb"));
  EXPECT_TRUE(file.has_tensor("adam.v/ln_f.gain"));
  EXPECT_EQ(file.header.at("epoch").get<std::size_t>(), r.selected_checkpoint().epoch);
}

TEST(TrainLoop, SeededRunsAreBitIdentical) {
  Fixture a(true), b(true);
  auto ra = a.run(), rb = b.run();
  EXPECT_EQ(to_json(ra.history).dump(), to_json(rb.history).dump());
  for (std::size_t i = 0; i < ra.checkpoints.size(); ++i) EXPECT_EQ(ra.bytes(i), rb.bytes(i));
}

TEST(TrainLoop, ResumeMatchesUninterruptedRun) {
  Fixture whole(true), part(true), rest(true);
  auto full = whole.run();
  TrainOptions stop;
  stop.stop_after_epoch = 1;
  auto first = part.run(stop);
  ASSERT_EQ(first.checkpoints.size(), 1u);
  TrainOptions resume;
  resume.resume = decode_lkd(first.bytes(0), "checkpoint");
  auto second = rest.run(resume);
  ASSERT_EQ(second.checkpoints.size(), 3u);
  EXPECT_EQ(second.bytes(2), full.bytes(2));
  EXPECT_EQ(to_json(second.history).dump(), to_json(full.history).dump());
}

TEST(TrainLoop, CheckpointFilesAndHistoryOnDisk) {
  const auto dir = std::filesystem::temp_directory_path() / "lkd_test_train_dir";
  std::filesystem::remove_all(dir);
  Fixture f(true);
  TrainOptions opt;
  opt.out_dir = dir.string();
  auto r = f.run(opt);
  for (const auto& c : r.checkpoints) EXPECT_TRUE(std::filesystem::exists(c.path)) << c.path;
  std::ifstream hist(dir / "epoch_history.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(hist, line)) {
    auto j = json::parse(line);
    EXPECT_TRUE(j.contains("wall_ms"));
    EXPECT_EQ(j.at("epoch").get<std::size_t>(), ++lines);
  }
  EXPECT_EQ(lines, 3u);
  std::filesystem::remove_all(dir);
}

TEST(TrainLoop, AdapterRunUpdatesOnlyAdapterTensors) {
  Fixture f(true);
  auto before = f.model.clone();
  auto r = f.run();
  std::vector<std::string> expected;
  for (const auto& [name, t] : f.adapter->named_parameters()) expected.push_back(name);
  EXPECT_EQ(r.trained, expected);
  auto pa = f.model.named_parameters(), pb = before.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].second.values(), pb[i].second.values()) << pa[i].first;
    EXPECT_FALSE(pa[i].second.requires_grad());
  }
  bool moved = false;
  for (const auto& e : f.adapter->entries) {
    for (float v : e.b.data()) moved |= v != 0.0f;
  }
  EXPECT_TRUE(moved);
}

TEST(TrainLoop, NonFiniteLossNamesStep) {
  Fixture f(false);
  auto [train, val] = f.plans();
  int calls = 0;
  LossFn bad = [&](Tape<float>& tape, const Batch& b) {
    StepLoss l{sequence_loss(tape, f.model, b), {}};
    if (tape.recording() && ++calls == 3) l.total = ops::scale(tape, l.total, std::numeric_limits<float>::quiet_NaN());
    return l;
  };
  try {
    train_loop(f.model.named_parameters(), train, val, f.cfg, bad);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 3"), std::string::npos) << e.what();
  }
}

TEST(TrainLoop, OverfitsSingleSequence) {
  auto model = init_model<float>(ModelConfig{2, 32, 2, 64, kVocabSize, 32, 1});
  auto stream = encode_bytes("the resistor limits current in a series circuit.");
  Batch b = window_batch(stream, std::vector<std::size_t>{0}, 32);
  auto params = model.named_parameters();
  model.set_trainable(true);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  AdamState<float> st;
  double loss = 0;
  for (int step = 0; step < 500; ++step) {
    Tape<float> tape;
    auto l = sequence_loss(tape, model, b);
    loss = l.item();
    tape.backward(l);
    clip_grad_norm(params, cfg.grad_clip_norm);
    adam_step(params, st, cfg);
    for (auto& [n, p] : params) p.zero_grad();
  }
  EXPECT_LT(loss, 0.05);
}
