#include <cmath>
#include <cstdio>
#include <filesystem>

#include <gtest/gtest.h>

#include "lkd/lora.hpp"
#include "lkd/grad_suite.hpp"
#include "lkd/model.hpp"

using namespace lkd;

namespace {

ModelConfig tiny(std::uint64_t seed = 1) { return {1, 16, 2, 32, kVocabSize, 16, seed}; }

std::vector<int> random_ids(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> ids(n);
  for (auto& id : ids) id = static_cast<int>(kByteOffset + rng.below(256));
  return ids;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("lkd_test_" + name)).string();
}

}  // namespace

TEST(Tokenizer, EncodeExamples) {
  EXPECT_EQ(encode("").ids, std::vector<int>{kBos});
  EXPECT_EQ(encode("AB").ids, (std::vector<int>{1, 68, 69}));
}

TEST(Tokenizer, DecodeDropsSpecials) {
  EXPECT_EQ(decode({1, 68, 69}), "AB");
  EXPECT_EQ(decode({1, 2}), "");
  EXPECT_THROW(decode({259}), IndexError);
  EXPECT_THROW(decode({-1}), IndexError);
}

TEST(Tokenizer, RoundTripOnRandomBytes) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::string s(rng.below(64), '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    EXPECT_EQ(decode(encode(s).ids), s);
  }
}

TEST(Tokenizer, TruncationIsFlagged) {
  auto e = encode("abcdef", 4);
  EXPECT_TRUE(e.truncated);
  EXPECT_EQ(e.ids.size(), 4u);
  EXPECT_FALSE(encode("ab", 4).truncated);
}

TEST(ModelConfig, ValidationRejectsBadShapes) {
  auto c = tiny();
  c.n_heads = 3;
  EXPECT_THROW(init_model<float>(c), ParameterError);
  c = tiny();
  c.vocab_size = 300;
  EXPECT_THROW(init_model<float>(c), ParameterError);
  c = tiny();
  c.max_seq_len = 1;
  EXPECT_THROW(init_model<float>(c), ParameterError);
  c = tiny();
  c.n_layers = 0;
  EXPECT_THROW(init_model<float>(c), ParameterError);
}

TEST(Init, SameSeedIsBitIdentical) {
  auto a = init_model<float>(tiny(7)), b = init_model<float>(tiny(7));
  auto pa = a.named_parameters(), pb = b.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second.values(), pb[i].second.values()) << pa[i].first;
}

TEST(Init, DifferentSeedsDiffer) {
  auto a = init_model<float>(tiny(7)), b = init_model<float>(tiny(8));
  EXPECT_NE(a.tok_emb.values(), b.tok_emb.values());
}

TEST(Init, GainsOneBiasesZeroAndMatrixMeanNearZero) {
  auto m = init_model<double>(ModelConfig::teacher(3));
  std::vector<double> draws;
  for (auto& [name, t] : m.named_parameters()) {
    if (name.find("gain") != std::string::npos) {
      for (double v : t.data()) EXPECT_EQ(v, 1.0);
    } else if (name.find("bias") != std::string::npos || name.find(".b1") != std::string::npos ||
               name.find(".b2") != std::string::npos) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0);
    } else {
      draws.insert(draws.end(), t.data().begin(), t.data().end());
    }
  }
  ASSERT_GE(draws.size(), 100000u);
  draws.resize(100000);
  double mean = 0;
  for (double v : draws) mean += v;
  mean /= 1e5;
  double var = 0;
  for (double v : draws) var += (v - mean) * (v - mean);
  var /= 1e5;
  // Statistical oracle: the mean of 1e5 N(0, 0.02^2) draws has sd 0.02/sqrt(1e5).
  EXPECT_LT(std::abs(mean), 3.0 * 0.02 / std::sqrt(1e5));
  EXPECT_NEAR(std::sqrt(var), 0.02, 0.02 * 0.01);
}

TEST(Forward, CausalMaskingIsExact) {
  auto m = init_model<float>(tiny());
  auto ids = random_ids(12, 3);
  auto base = forward_logits(m, ids);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    auto changed = ids;
    changed[t] = ids[t] == 100 ? 101 : 100;
    auto out = forward_logits(m, changed);
    for (std::size_t i = 0; i < t * kVocabSize; ++i) ASSERT_EQ(base[i], out[i]) << "t=" << t;
  }
}

TEST(Forward, FullSequenceEqualsIncrementalPrefixes) {
  auto m = init_model<float>(tiny(4));
  auto ids = random_ids(16, 9);
  auto full = forward_logits(m, ids);
  for (std::size_t t = 1; t <= ids.size(); ++t) {
    std::vector<int> prefix(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(t));
    auto part = forward_logits(m, prefix);
    for (std::size_t c = 0; c < kVocabSize; ++c) {
      EXPECT_NEAR(part.at(t - 1, c), full.at(t - 1, c), 1e-5);
    }
  }
}

TEST(Forward, ZeroBAdapterLeavesLogitsUnchanged) {
  auto m = init_model<float>(tiny());
  auto ids = random_ids(10, 2);
  auto before = forward_logits(m, ids);
  auto adapter = attach(m, default_lora_targets(m.config), 2, 8.0, 11);
  auto after = forward_logits(m, ids, &adapter);
  EXPECT_EQ(before.values(), after.values());
}

TEST(Forward, LogitsFiniteAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto m = init_model<float>(tiny(seed));
    auto logits = forward_logits(m, random_ids(16, seed + 1000));
    ASSERT_TRUE(logits.all_finite()) << seed;
  }
}

TEST(Forward, TooLongSequenceIsContractError) {
  auto m = init_model<float>(tiny());
  EXPECT_THROW(forward_logits(m, random_ids(17, 1)), ContractError);
}

TEST(Forward, AdapterForAnotherShapeIsConformanceError) {
  auto m = init_model<float>(tiny());
  auto other = init_model<float>(ModelConfig{1, 32, 2, 32, kVocabSize, 16, 1});
  auto adapter = attach(other, default_lora_targets(other.config), 2, 8.0, 1);
  EXPECT_THROW(forward_logits(m, random_ids(4, 1), &adapter), ConformanceError);
}

TEST(SequenceLoss, UntrainedModelNearUniformOnRandomBytes) {
  for (auto cfg : {ModelConfig::student(5), ModelConfig::teacher(5)}) {
    auto m = init_model<float>(cfg);
    Batch b{4, 64, {}, {}};
    auto ids = random_ids(4 * 65, 77);
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t t = 0; t < 64; ++t) {
        b.inputs.push_back(ids[r * 65 + t]);
        b.targets.push_back(ids[r * 65 + t + 1]);
      }
    }
    Tape<float> tape = Tape<float>::no_grad();
    const float loss = sequence_loss(tape, m, b).item();
    EXPECT_NEAR(loss, std::log(256.0), 0.2);
  }
}

TEST(SequenceLoss, PadTargetsContributeNothing) {
  auto m = init_model<float>(tiny());
  auto ids = random_ids(11, 4);
  Batch padded{1, 10, std::vector<int>(ids.begin(), ids.end() - 1), std::vector<int>(ids.begin() + 1, ids.end())};
  for (std::size_t t = 6; t < 10; ++t) padded.targets[t] = kPad;
  Batch prefix{1, 6, std::vector<int>(ids.begin(), ids.begin() + 6), std::vector<int>(ids.begin() + 1, ids.begin() + 7)};
  Tape<float> tape = Tape<float>::no_grad();
  EXPECT_EQ(sequence_loss(tape, m, padded).item(), sequence_loss(tape, m, prefix).item());
}

TEST(SequenceLoss, AllPadBatchIsDegenerate) {
  auto m = init_model<float>(tiny());
  Batch b{1, 4, {1, 5, 6, 7}, {0, 0, 0, 0}};
  Tape<float> tape;
  EXPECT_THROW(sequence_loss(tape, m, b), DegenerateInputError);
}

TEST(Generate, GreedyIsDeterministic) {
  auto m = init_model<float>(tiny(2));
  auto prompt = encode("hello").ids;
  auto a = generate(m, prompt, 20, 0.0, 0, 1);
  auto b = generate(m, prompt, 20, 0.0, 0, 99);
  EXPECT_EQ(a, b);
}

TEST(Generate, SeededSamplingIsDeterministic) {
  auto m = init_model<float>(tiny(2));
  auto prompt = encode("hello").ids;
  EXPECT_EQ(generate(m, prompt, 20, 0.8, 0, 42), generate(m, prompt, 20, 0.8, 0, 42));
  EXPECT_EQ(generate(m, prompt, 20, 0.8, 40, 7), generate(m, prompt, 20, 0.8, 40, 7));
}

TEST(Generate, TopKOneEqualsGreedy) {
  auto m = init_model<float>(tiny(3));
  auto prompt = encode("resistor").ids;
  EXPECT_EQ(generate(m, prompt, 25, 0.9, 1, 5), generate(m, prompt, 25, 0.0, 0, 5));
}

TEST(Generate, SlidesPastContextLimit) {
  auto m = init_model<float>(tiny(3));
  auto out = generate(m, random_ids(14, 1), 10, 0.0, 0, 0);
  EXPECT_LE(out.size(), 10u);
  EXPECT_THROW(generate(m, std::vector<int>{}, 3, 0.0, 0, 0), ContractError);
}

TEST(Sampler, GreedyTieBreaksToLowestId) {
  std::vector<double> p{0.1, 0.4, 0.4, 0.1};
  EXPECT_EQ(TokenSampler::argmax(p), 1);
}

TEST(ModelCheckpoint, RoundTripIsBitIdentical) {
  auto m = init_model<float>(tiny(12));
  const auto path = temp_path("model.lkd");
  save_model(m, path);
  auto loaded = load_model<float>(path);
  EXPECT_EQ(loaded.config, m.config);
  auto pa = m.named_parameters(), pb = loaded.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second.values(), pb[i].second.values());
  EXPECT_EQ(read_file_bytes(path), encode_model(loaded));
  std::filesystem::remove(path);
}

TEST(ModelCheckpoint, LayoutFollowsContainerFormat) {
  auto m = init_model<float>(tiny(12));
  const std::string bytes = encode_model(m);
  ASSERT_EQ(bytes.substr(0, 4), "LKD1");
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  auto header = json::parse(bytes.substr(12, header_len));
  EXPECT_EQ(header["kind"], "model");
  EXPECT_EQ(header["format_version"], 1);
  std::size_t floats = 0;
  for (const auto& t : header["tensors"]) {
    EXPECT_EQ(t["offset"].get<std::size_t>(), 4 * floats);
    floats += t["count"].get<std::size_t>();
  }
  EXPECT_EQ(bytes.size(), 12 + header_len + 4 * floats);
  EXPECT_EQ(floats, m.parameter_count());
  // First payload float is tok_emb[0] in little-endian order.
  float first;
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[12 + header_len + i])) << (8 * i);
  std::memcpy(&first, &bits, 4);
  EXPECT_EQ(first, m.tok_emb[0]);
}

TEST(ModelCheckpoint, MalformedFilesAreRejected) {
  auto bytes = encode_model(init_model<float>(tiny()));
  EXPECT_THROW(decode_lkd(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(decode_lkd(bytes.substr(0, 8)), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_lkd(bad_magic), FormatError);
  auto file = decode_lkd(bytes);
  json h = file.header;
  h.erase("tensors");
  h.erase("format_version");
  h.erase("kind");
  std::string v2 = encode_lkd("model", h, file.tensors);
  const std::string needle = "\"format_version\":1";
  v2.replace(v2.find(needle), needle.size(), "\"format_version\":2");
  EXPECT_THROW(decode_lkd(v2), VersionError);
  EXPECT_THROW(decode_lkd(bytes, "adapter"), FormatError);
}

TEST(GradSuite, EveryCasePassesInDouble) {
  const auto results = run_gradient_suite();
  EXPECT_GE(results.size(), 20u);
  for (const auto& r : results) {
    EXPECT_TRUE(r.report.passed) << r.name << " err=" << r.report.max_rel_error << " in " << r.report.worst_tensor;
    EXPECT_LE(r.report.max_rel_error, 1e-5) << r.name;
    EXPECT_GT(r.report.coords_checked, 0u) << r.name;
  }
}
