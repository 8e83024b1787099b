#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "lkd/rag.hpp"
#include "lkd/toy_corpus.hpp"

using namespace lkd;

namespace {

std::string letters(std::size_t n) {
  std::string s(n, 'a');
  for (std::size_t i = 0; i < n; ++i) s[i] = static_cast<char>('a' + i % 26);
  return s;
}

RetrievalIndex three_chunk_index() {
  std::vector<DocumentChunk> chunks{{0, "d0", "resistor limits current", 0, 23},
                                    {1, "d1", "capacitor stores charge", 0, 23},
                                    {2, "d2", "Resistor stores energy", 0, 22}};
  return build_index(chunks);
}

RetrievalIndex toy_index(std::size_t n_chunks, std::size_t chunk_size = 32) {
  const auto text = generate_toy_corpus(11, chunk_size * (n_chunks + 2));
  auto chunks = chunk_corpus({{"toy", text}}, chunk_size, 8);
  chunks.resize(n_chunks);  // text is long enough that this only truncates
  return build_index(chunks);
}

Model<float> small_model() { return init_model<float>(ModelConfig{1, 16, 2, 32, kVocabSize, 64, 3}); }

std::vector<double> softmax_last(const Tensor<float>& logits) { return last_row_distribution(logits, 0.0); }

}  // namespace

TEST(Chunking, ShortDocumentIsOneChunk) {
  auto c = chunk_corpus({{"d", letters(100)}}, 128, 32);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].length, 100u);
  EXPECT_EQ(c[0].text, letters(100));
}

TEST(Chunking, StrideArithmetic) {
  auto c = chunk_corpus({{"d", letters(256)}}, 128, 32);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c[0].start, 0u);
  EXPECT_EQ(c[1].start, 96u);
  EXPECT_EQ(c[2].start, 192u);
  EXPECT_EQ(c[2].length, 64u);
  EXPECT_EQ(c[2].text, letters(256).substr(192));
}

TEST(Chunking, ShortTailDroppedLongTailKept) {
  EXPECT_EQ(chunk_corpus({{"d", letters(130)}}, 128, 0).size(), 1u);
  EXPECT_EQ(chunk_corpus({{"d", letters(144)}}, 128, 0).size(), 2u);
}

TEST(Chunking, IdsRunAcrossDocumentsAndOverlapRejected) {
  auto c = chunk_corpus({{"a", letters(40)}, {"b", letters(300)}}, 128, 32);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(c[i].id, i);
    EXPECT_LE(c[i].length, 128u);
    EXPECT_FALSE(c[i].text.empty());
  }
  EXPECT_EQ(c[0].doc_id, "a");
  EXPECT_EQ(c[1].doc_id, "b");
  EXPECT_THROW(chunk_corpus({{"d", "x"}}, 32, 32), ParameterError);
  EXPECT_THROW(chunk_corpus({{"d", "x"}}, 32, 40), ParameterError);
}

TEST(Retrieve, HandTfIdfOracle) {
  auto index = three_chunk_index();
  auto r = retrieve(index, "resistor current", 3);
  ASSERT_EQ(r.hits.size(), 3u);
  EXPECT_EQ(r.hits[0].chunk_id, 0u);
  EXPECT_EQ(r.hits[1].chunk_id, 2u);
  EXPECT_EQ(r.hits[2].chunk_id, 1u);
  EXPECT_NEAR(r.hits[0].score, 0.7824081412456461, 1e-6);
  EXPECT_NEAR(r.hits[1].score, 0.3134834273358341, 1e-6);
  EXPECT_EQ(r.hits[2].score, 0.0);
  EXPECT_NEAR(r.hits[0].probability, 0.9904975715145773, 1e-6);
  EXPECT_NEAR(r.hits[1].probability, 0.009106243482648237, 1e-6);
  EXPECT_NEAR(r.hits[2].probability, 0.000396185002774503, 1e-6);
}

TEST(Retrieve, ProbabilitiesAreSortedAndSumToOne) {
  auto index = toy_index(40);
  for (const char* q : {"resistor current", "the capacitor stores charge", "photolithography of silicon", "zzz"}) {
    for (std::size_t k : {1u, 3u, 40u, 100u}) {
      auto r = retrieve(index, q, k);
      double s = 0;
      for (std::size_t i = 0; i < r.hits.size(); ++i) {
        s += r.hits[i].probability;
        EXPECT_GE(r.hits[i].probability, 0.0);
        if (i) EXPECT_LE(r.hits[i].probability, r.hits[i - 1].probability);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
      EXPECT_EQ(r.hits.size(), std::min<std::size_t>(k, 40));
    }
  }
}

TEST(Retrieve, RawMassGrowsWithK) {
  auto index = toy_index(30);
  double prev = 0;
  for (std::size_t k = 1; k <= 30; ++k) {
    auto r = retrieve(index, "the diode conducts current", k, false);
    EXPECT_GE(r.raw_mass, prev);
    prev = r.raw_mass;
    for (const auto& h : r.hits) EXPECT_EQ(h.probability, h.raw);
  }
  EXPECT_NEAR(prev, 1.0, 1e-9);
}

TEST(Retrieve, SelfRetrievalAtRankOne) {
  auto index = toy_index(50, 64);
  for (const auto& c : index.chunks) EXPECT_EQ(retrieve(index, c.text, 1).hits[0].chunk_id, c.id) << c.text;
}

TEST(Retrieve, VectorsAreUnitLength) {
  auto index = toy_index(50, 64);
  for (const auto& v : index.vectors) {
    double s = 0;
    for (float x : v) s += static_cast<double>(x) * x;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
}

TEST(Retrieve, Errors) {
  RetrievalIndex empty;
  EXPECT_THROW(retrieve(empty, "q", 1), StateError);
  auto index = three_chunk_index();
  EXPECT_THROW(retrieve(index, "q", 0), ParameterError);
}

TEST(Retrieve, PluggableEmbedding) {
  // Letter-frequency embedding: any function of text works behind the interface.
  EmbedFn embed = [](std::string_view s) {
    std::vector<double> v(26, 0.0);
    for (char c : s) {
      if (c >= 'a' && c <= 'z') v[static_cast<std::size_t>(c - 'a')] += 1;
    }
    return v;
  };
  auto index = build_index({{0, "a", "aaaa", 0, 4}, {1, "b", "bbbb", 0, 4}}, 0.1, embed, "letters");
  EXPECT_EQ(retrieve(index, "bb", 1).hits[0].chunk_id, 1u);
  auto loaded = index_from_file(decode_lkd(encode_index(index), "index"), embed);
  EXPECT_EQ(retrieve(loaded, "ab b", 2).hits[0].chunk_id, 1u);
  auto no_fn = index_from_file(decode_lkd(encode_index(index), "index"));
  EXPECT_THROW(retrieve(no_fn, "a", 1), StateError);
}

TEST(IndexFile, RoundTrip) {
  auto index = toy_index(20);
  const auto bytes = encode_index(index);
  auto loaded = index_from_file(decode_lkd(bytes, "index"));
  EXPECT_EQ(encode_index(loaded), bytes);
  for (const char* q : {"resistor", "current gain of a transistor"}) {
    auto a = retrieve(index, q, 5), b = retrieve(loaded, q, 5);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_EQ(a.hits[i].chunk_id, b.hits[i].chunk_id);
      EXPECT_EQ(a.hits[i].probability, b.hits[i].probability);
    }
  }
  EXPECT_THROW(index_from_file(decode_lkd(bytes.substr(0, bytes.size() - 3), "index")), FormatError);
}

TEST(Assemble, LeftTruncatesTheChunk) {
  auto a = assemble("0123456789", "q?", 64);
  EXPECT_FALSE(a.truncated);
  EXPECT_EQ(decode(a.ids), "[CTX] 0123456789 [SEP] q?");
  EXPECT_EQ(a.ids.front(), kBos);
  auto t = assemble("0123456789", "q?", 1 + 6 + 4 + 9);
  EXPECT_TRUE(t.truncated);
  EXPECT_EQ(decode(t.ids), "[CTX] 6789 [SEP] q?");
  EXPECT_THROW(assemble("x", letters(100), 64), ContractError);
}

TEST(RagScore, KOneEqualsSingleContextProbability) {
  auto index = toy_index(10);
  auto model = small_model();
  const std::string q = "what does a resistor do?", y = " limits";
  auto s = rag_score(index, model, q, y, 1);
  const auto& top = index.chunks[retrieve(index, q, 1).hits[0].chunk_id];
  const auto a = assemble(top.text, q, model.config.max_seq_len + 1 - 7);
  EXPECT_EQ(s.probability, std::exp(sequence_log_prob(model, a.ids, encode_bytes(y))));
  EXPECT_NEAR(s.log_probability, std::log(s.probability), 1e-12);
}

TEST(RagScore, TwoForwardPassOracle) {
  auto index = three_chunk_index();
  auto model = small_model();
  const std::string q = "resistor current";
  auto r = retrieve(index, q, 2);
  double expected = 0;
  for (const auto& h : r.hits) {
    const std::string prompt = "[CTX] " + index.chunks[h.chunk_id].text + " [SEP] " + q;
    const auto p = softmax_last(forward_logits(model, encode(prompt).ids));
    expected += h.probability * p[static_cast<std::size_t>('!' + kByteOffset)];
  }
  EXPECT_NEAR(rag_score(index, model, q, "!", 2).probability, expected, 1e-9);
}

TEST(RagScore, IdenticalChunksMixToTheSingleScore) {
  auto index = build_index({{0, "a", "resistor limits current", 0, 23}, {1, "b", "resistor limits current", 0, 23}});
  auto single = build_index({{0, "a", "resistor limits current", 0, 23}});
  auto model = small_model();
  const double two = rag_score(index, model, "resistor", " ok", 2).probability;
  const double one = rag_score(single, model, "resistor", " ok", 1).probability;
  EXPECT_NEAR(two, one, 1e-12 * one);
}

TEST(RagScore, LongCandidateIsContractError) {
  auto index = three_chunk_index();
  auto model = small_model();
  EXPECT_THROW(rag_score(index, model, "q", letters(80), 1), ContractError);
}

TEST(RagGenerate, KOneMatchesPlainGenerate) {
  auto index = toy_index(10);
  auto model = small_model();
  const std::string q = "the diode";
  const auto& top = index.chunks[retrieve(index, q, 1).hits[0].chunk_id];
  const auto prompt = assemble(top.text, q, model.config.max_seq_len).ids;
  for (auto [temp, top_k] : {std::pair{0.0, std::size_t{0}}, std::pair{0.8, std::size_t{40}}}) {
    auto g = rag_generate(index, model, q, 1, 12, temp, top_k, 5);
    EXPECT_EQ(g.ids, generate(model, prompt, 12, temp, top_k, 5));
    ASSERT_EQ(g.provenance.size(), 1u);
    EXPECT_EQ(g.provenance[0].weight, 1.0);
  }
}

TEST(RagGenerate, StepDistributionsAreProbabilityVectors) {
  auto index = toy_index(10);
  auto model = small_model();
  auto g = rag_generate(index, model, "a capacitor stores", 4, 10, 0.9, 0, 2, true, static_cast<const LoraAdapter<float>*>(nullptr), true);
  ASSERT_FALSE(g.step_distributions.empty());
  for (const auto& row : g.step_distributions) {
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
    for (double p : row) EXPECT_GE(p, 0.0);
  }
  auto again = rag_generate(index, model, "a capacitor stores", 4, 10, 0.9, 0, 2);
  EXPECT_EQ(again.ids, g.ids);
}

TEST(RagGenerate, GreedyHandMixtureOracle) {
  auto index = three_chunk_index();
  auto model = small_model();
  const std::string q = "resistor current";
  auto r = retrieve(index, q, 2);
  std::vector<std::vector<int>> prompts;
  for (const auto& h : r.hits) prompts.push_back(encode("[CTX] " + index.chunks[h.chunk_id].text + " [SEP] " + q).ids);
  std::vector<int> expected;
  for (int step = 0; step < 8; ++step) {
    std::vector<double> mix(kVocabSize, 0.0);
    for (std::size_t z = 0; z < 2; ++z) {
      auto ids = prompts[z];
      ids.insert(ids.end(), expected.begin(), expected.end());
      const auto p = softmax_last(forward_logits(model, ids));
      for (std::size_t c = 0; c < mix.size(); ++c) mix[c] += r.hits[z].probability * p[c];
    }
    const int next = static_cast<int>(std::max_element(mix.begin(), mix.end()) - mix.begin());
    if (next == kEos) break;
    expected.push_back(next);
  }
  auto g = rag_generate(index, model, q, 2, 8, 0.0, 0, 0);
  EXPECT_EQ(g.ids, expected);
  EXPECT_EQ(g.provenance[0].chunk_id, r.hits[0].chunk_id);
  EXPECT_EQ(g.provenance[1].chunk_id, r.hits[1].chunk_id);
}
