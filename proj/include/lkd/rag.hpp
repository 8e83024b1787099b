#pragma once

// Retrieval-augmented generation. A retriever turns cosine similarity into a
// distribution over chunks (softmax at temperature tau_r); scoring mixes whole
// sequence probabilities over the top-k chunks, decoding mixes next-token
// distributions step by step.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "lkd/checkpoint.hpp"
#include "lkd/error.hpp"
#include "lkd/model.hpp"
#include "lkd/tokenizer.hpp"

namespace lkd {

struct Document {
  std::string id;
  std::string text;
};

struct DocumentChunk {
  std::size_t id = 0;
  std::string doc_id;
  std::string text;
  std::size_t start = 0;   // token offset inside the document
  std::size_t length = 0;  // tokens
};

inline constexpr std::size_t kMinTailTokens = 16;

/// Sliding token windows with stride chunk_size - overlap. A trailing partial
/// window survives when it has at least 16 tokens; a document's first window
/// is always kept.
inline std::vector<DocumentChunk> chunk_corpus(const std::vector<Document>& docs, std::size_t chunk_size = 128,
                                               std::size_t overlap = 32) {
  if (chunk_size == 0 || overlap >= chunk_size) {
    throw ParameterError("chunking needs chunk_size > overlap >= 0 (got " + std::to_string(chunk_size) + ", " +
                         std::to_string(overlap) + ")");
  }
  const std::size_t stride = chunk_size - overlap;
  std::vector<DocumentChunk> out;
  for (const auto& doc : docs) {
    const auto ids = encode_bytes(doc.text);
    const std::size_t n = ids.size();
    for (std::size_t start = 0; start < n; start += stride) {
      const std::size_t len = std::min(chunk_size, n - start);
      if (len < chunk_size && start > 0 && len < kMinTailTokens) break;
      out.push_back({out.size(), doc.id, doc.text.substr(start, len), start, len});
      if (start + len == n) break;
    }
  }
  return out;
}

/// Lower-cased whitespace-separated terms.
inline std::vector<std::string> terms_of(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Unit-normalizes v in place; a zero vector stays zero.
inline void l2_normalize(std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  if (s > 0) {
    const double n = std::sqrt(s);
    for (double& x : v) x /= n;
  }
}

/// Embedding of text into the index's vector space.
using EmbedFn = std::function<std::vector<double>(std::string_view)>;

/// TF-IDF over a fitted vocabulary: tf = raw count, idf = ln((1 + N) / (1 + df)) + 1.
struct TfIdf {
  std::vector<std::string> terms;  // sorted
  std::vector<double> idf;
  std::vector<std::size_t> df;

  static TfIdf fit(const std::vector<std::string>& texts) {
    std::map<std::string, std::size_t> counts;
    for (const auto& t : texts) {
      auto ts = terms_of(t);
      std::sort(ts.begin(), ts.end());
      ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
      for (auto& term : ts) ++counts[term];
    }
    TfIdf m;
    const double n = static_cast<double>(texts.size());
    for (const auto& [term, d] : counts) {
      m.terms.push_back(term);
      m.df.push_back(d);
      m.idf.push_back(std::log((1.0 + n) / (1.0 + static_cast<double>(d))) + 1.0);
    }
    return m;
  }

  std::vector<double> embed(std::string_view text) const {
    std::vector<double> v(terms.size(), 0.0);
    for (const auto& t : terms_of(text)) {
      auto it = std::lower_bound(terms.begin(), terms.end(), t);
      if (it != terms.end() && *it == t) v[static_cast<std::size_t>(it - terms.begin())] += 1.0;
    }
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= idf[i];
    l2_normalize(v);
    return v;
  }
};

struct RetrievalIndex {
  std::vector<DocumentChunk> chunks;
  std::vector<std::vector<float>> vectors;  // unit L2 norm (or zero for term-less chunks)
  double tau = 0.1;
  std::string retriever = "tfidf";
  TfIdf tfidf;     // fitted model when retriever == "tfidf"
  EmbedFn custom;  // used when retriever != "tfidf"

  std::size_t dim() const { return vectors.empty() ? 0 : vectors.front().size(); }

  std::vector<double> embed(std::string_view text) const {
    if (retriever == "tfidf") return tfidf.embed(text);
    if (!custom) throw StateError("index uses retriever '" + retriever + "' but no embedding function is attached");
    auto v = custom(text);
    l2_normalize(v);
    return v;
  }
};

inline RetrievalIndex build_index(std::vector<DocumentChunk> chunks, double tau = 0.1, EmbedFn embed = {},
                                  std::string retriever_name = "custom") {
  if (!(tau > 0)) throw ParameterError("retriever temperature must be > 0");
  RetrievalIndex index;
  index.tau = tau;
  index.chunks = std::move(chunks);
  if (embed) {
    index.retriever = std::move(retriever_name);
    index.custom = std::move(embed);
  } else {
    std::vector<std::string> texts;
    for (const auto& c : index.chunks) texts.push_back(c.text);
    index.tfidf = TfIdf::fit(texts);
  }
  for (const auto& c : index.chunks) {
    auto v = index.embed(c.text);
    index.vectors.emplace_back(v.begin(), v.end());
  }
  return index;
}

struct Retrieved {
  std::size_t chunk_id = 0;
  double score = 0;        // cosine
  double raw = 0;          // softmax(score / tau) over the whole index
  double probability = 0;  // after optional renormalization over the survivors
};

struct Retrieval {
  std::vector<Retrieved> hits;
  double raw_mass = 0;  // sum of raw over the survivors
};

/// Top-k chunks by retriever probability (ties to the lower chunk id).
inline Retrieval retrieve(const RetrievalIndex& index, std::string_view query, std::size_t k, bool renormalize = true) {
  if (index.chunks.empty()) throw StateError("retrieval index is empty");
  if (k < 1) throw ParameterError("k must be >= 1");
  const auto q = index.embed(query);
  if (q.size() != index.dim()) throw ConformanceError("query embedding has dimension " + std::to_string(q.size()));
  const std::size_t n = index.chunks.size();
  std::vector<double> score(n), logit(n);
  double mx = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < q.size(); ++j) s += q[j] * static_cast<double>(index.vectors[i][j]);
    score[i] = s;
    logit[i] = s / index.tau;
    mx = std::max(mx, logit[i]);
  }
  double z = 0;
  for (double l : logit) z += std::exp(l - mx);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::exp(logit[i] - mx) / z;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  Retrieval r;
  for (std::size_t i = 0; i < std::min(k, n); ++i) {
    r.hits.push_back({order[i], score[order[i]], p[order[i]], p[order[i]]});
    r.raw_mass += p[order[i]];
  }
  if (renormalize) {
    for (auto& h : r.hits) h.probability = h.raw / r.raw_mass;
  }
  return r;
}

// Prompt assembly ---------------------------------------------------------

struct Assembled {
  std::vector<int> ids;
  bool truncated = false;  // chunk lost tokens from its left end
};

/// BOS + "[CTX] " + chunk + " [SEP] " + query, dropping chunk bytes from the
/// left until `budget` tokens suffice.
inline Assembled assemble(std::string_view chunk, std::string_view query, std::size_t budget) {
  const auto head = encode("[CTX] ");
  const auto tail = encode_bytes(std::string(" [SEP] ") + std::string(query));
  const std::size_t fixed = head.ids.size() + tail.size();
  if (fixed > budget) {
    throw ContractError("query needs " + std::to_string(fixed) + " tokens with an empty context; budget is " +
                        std::to_string(budget));
  }
  auto body = encode_bytes(chunk);
  Assembled a;
  if (fixed + body.size() > budget) {
    body.erase(body.begin(), body.begin() + static_cast<std::ptrdiff_t>(fixed + body.size() - budget));
    a.truncated = true;
  }
  a.ids = head.ids;
  a.ids.insert(a.ids.end(), body.begin(), body.end());
  a.ids.insert(a.ids.end(), tail.begin(), tail.end());
  return a;
}

// Scoring -----------------------------------------------------------------

/// Sum over t of log p(y_t | prompt, y_<t), from one forward pass.
template <typename T>
double sequence_log_prob(const Model<T>& model, const std::vector<int>& prompt, const std::vector<int>& y,
                         const LoraAdapter<T>* adapter = nullptr) {
  if (y.empty()) return 0.0;
  std::vector<int> ids = prompt;
  ids.insert(ids.end(), y.begin(), y.end() - 1);
  if (ids.size() > model.config.max_seq_len) {
    throw ContractError("scored sequence of " + std::to_string(ids.size()) + " tokens exceeds max_seq_len");
  }
  const Tensor<T> logits = forward_logits(model, ids, adapter);
  const std::size_t V = logits.cols();
  double total = 0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const std::size_t row = prompt.size() - 1 + t;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, static_cast<double>(logits.at(row, c)));
    double s = 0;
    for (std::size_t c = 0; c < V; ++c) s += std::exp(static_cast<double>(logits.at(row, c)) - mx);
    total += static_cast<double>(logits.at(row, static_cast<std::size_t>(y[t]))) - mx - std::log(s);
  }
  return total;
}

struct ContextScore {
  std::size_t chunk_id = 0;
  double weight = 0;
  double log_prob = 0;  // log p_model(y | assemble(z, x))
  bool truncated = false;
};

struct RagScore {
  double probability = 0;
  double log_probability = 0;
  std::vector<ContextScore> contexts;
};

/// Sum over the top-k chunks z of p_r(z|x) * p_model(y | assemble(z, x)).
template <typename T>
RagScore rag_score(const RetrievalIndex& index, const Model<T>& model, std::string_view query, std::string_view y,
                   std::size_t k, bool renormalize = true, const LoraAdapter<T>* adapter = nullptr) {
  const auto ys = encode_bytes(y);
  if (ys.size() > model.config.max_seq_len) {
    throw ContractError("candidate of " + std::to_string(ys.size()) + " tokens exceeds max_seq_len");
  }
  const auto r = retrieve(index, query, k, renormalize);
  RagScore out;
  std::vector<double> terms;
  for (const auto& h : r.hits) {
    const std::size_t budget = model.config.max_seq_len + 1 - std::max<std::size_t>(ys.size(), 1);
    const auto a = assemble(index.chunks[h.chunk_id].text, query, budget);
    const double lp = sequence_log_prob(model, a.ids, ys, adapter);
    out.contexts.push_back({h.chunk_id, h.probability, lp, a.truncated});
    out.probability += h.probability * std::exp(lp);
    terms.push_back(std::log(h.probability) + lp);
  }
  const double mx = *std::max_element(terms.begin(), terms.end());
  double s = 0;
  for (double t : terms) s += std::exp(t - mx);
  out.log_probability = mx + std::log(s);
  return out;
}

// Decoding ----------------------------------------------------------------

struct RagGeneration {
  std::vector<int> ids;
  std::string text;
  std::vector<ContextScore> provenance;  // chunk ids and weights (log_prob unused)
  std::vector<std::vector<double>> step_distributions;
};

/// Per step, the next-token distribution is sum_z p_r(z|x) * softmax(logits
/// under context z); a token is then chosen as in generate().
template <typename T>
RagGeneration rag_generate(const RetrievalIndex& index, const Model<T>& model, std::string_view query, std::size_t k,
                           std::size_t max_new, double temperature, std::size_t top_k, std::uint64_t seed,
                           bool renormalize = true, const LoraAdapter<T>* adapter = nullptr, bool keep_steps = false) {
  const auto r = retrieve(index, query, k, renormalize);
  RagGeneration out;
  std::vector<std::vector<int>> prompts;
  for (const auto& h : r.hits) {
    const auto a = assemble(index.chunks[h.chunk_id].text, query, model.config.max_seq_len);
    prompts.push_back(a.ids);
    out.provenance.push_back({h.chunk_id, h.probability, 0.0, a.truncated});
  }
  TokenSampler sampler(temperature, top_k, seed);
  const std::size_t V = model.config.vocab_size;
  for (std::size_t step = 0; step < max_new; ++step) {
    std::vector<double> mix(V, 0.0);
    for (std::size_t z = 0; z < prompts.size(); ++z) {
      std::vector<int> ids = prompts[z];
      ids.insert(ids.end(), out.ids.begin(), out.ids.end());
      const auto logits = forward_logits(model, context_window(ids, model.config.max_seq_len), adapter);
      const auto p = last_row_distribution(logits, temperature);
      for (std::size_t c = 0; c < V; ++c) mix[c] += out.provenance[z].weight * p[c];
    }
    const int next = sampler.pick(mix);
    if (keep_steps) out.step_distributions.push_back(mix);
    if (next == kEos) break;
    out.ids.push_back(next);
  }
  out.text = decode(out.ids);
  return out;
}

// Persistence -------------------------------------------------------------

inline std::string encode_index(const RetrievalIndex& index, json extra = json::object()) {
  json chunks = json::array();
  for (const auto& c : index.chunks) {
    chunks.push_back({{"id", c.id}, {"doc_id", c.doc_id}, {"text", c.text}, {"start", c.start}, {"length", c.length}});
  }
  extra["chunks"] = std::move(chunks);
  extra["tau"] = index.tau;
  extra["retriever"] = index.retriever;
  extra["dim"] = index.dim();
  if (index.retriever == "tfidf") extra["tfidf"] = {{"terms", index.tfidf.terms}, {"idf", index.tfidf.idf}, {"df", index.tfidf.df}};
  std::vector<TensorRecord> records;
  if (!index.chunks.empty() && index.dim() > 0) {
    TensorRecord v{"vectors", {index.chunks.size(), index.dim()}, {}};
    for (const auto& row : index.vectors) v.values.insert(v.values.end(), row.begin(), row.end());
    records.push_back(std::move(v));
  }
  return encode_lkd("index", std::move(extra), records);
}

inline RetrievalIndex index_from_file(const LkdFile& file, EmbedFn custom = {}) {
  RetrievalIndex index;
  try {
    const auto& h = file.header;
    index.tau = h.at("tau").get<double>();
    index.retriever = h.at("retriever").get<std::string>();
    for (const auto& c : h.at("chunks")) {
      index.chunks.push_back({c.at("id").get<std::size_t>(), c.at("doc_id").get<std::string>(),
                              c.at("text").get<std::string>(), c.at("start").get<std::size_t>(),
                              c.at("length").get<std::size_t>()});
    }
    if (index.retriever == "tfidf") {
      const auto& t = h.at("tfidf");
      index.tfidf.terms = t.at("terms").get<std::vector<std::string>>();
      index.tfidf.idf = t.at("idf").get<std::vector<double>>();
      index.tfidf.df = t.at("df").get<std::vector<std::size_t>>();
    } else {
      index.custom = std::move(custom);
    }
    const std::size_t dim = h.at("dim").get<std::size_t>();
    if (!index.chunks.empty() && dim > 0) {
      const auto& v = file.tensor("vectors");
      if (v.shape != Shape{index.chunks.size(), dim}) throw FormatError("index vectors have shape " + shape_str(v.shape));
      for (std::size_t i = 0; i < index.chunks.size(); ++i) {
        index.vectors.emplace_back(v.values.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                   v.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
        double s = 0;
        for (float x : index.vectors.back()) s += static_cast<double>(x) * x;
        if (s != 0.0 && std::abs(std::sqrt(s) - 1.0) > 1e-6) {
          throw FormatError("index vector " + std::to_string(i) + " is not unit length");
        }
      }
    } else {
      index.vectors.assign(index.chunks.size(), {});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("index header: ") + e.what());
  }
  return index;
}

inline void save_index(const RetrievalIndex& index, const std::string& path, json extra = json::object()) {
  write_file_bytes(path, encode_index(index, std::move(extra)));
}

inline RetrievalIndex load_index(const std::string& path, EmbedFn custom = {}) {
  return index_from_file(read_lkd(path, "index"), std::move(custom));
}

}  // namespace lkd
