#pragma once

// Likert judges: a reference-recall heuristic and a remote HTTP rater.

#include <chrono>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "lkd/error.hpp"
#include "lkd/eval/likert.hpp"
#include "lkd/eval/questions.hpp"
#include "lkd/eval/scoring.hpp"

namespace lkd::eval {

struct JudgeScore {
  int accuracy = 1;
  int quality = 1;
};

class JudgeBackend {
 public:
  virtual ~JudgeBackend() = default;
  virtual std::string name() const = 0;
  virtual JudgeScore rate(const Question& q, std::string_view response) = 0;
};

inline const std::set<std::string>& stopwords() {
  static const std::set<std::string> words{"a",    "an",   "and",  "are",  "as",   "at",   "be",   "by",   "for",
                                           "from", "has",  "have", "in",   "into", "is",   "it",   "its",  "of",
                                           "on",   "or",   "that", "the",  "their", "this", "to",  "was",  "were",
                                           "which", "with", "can", "not",  "than", "then", "when", "will", "also"};
  return words;
}

/// Lower-cased alphanumeric words that are not stopwords.
inline std::set<std::string> content_words(std::string_view text) {
  std::set<std::string> out;
  const std::string s = lower(text);
  std::size_t i = 0;
  while (i < s.size()) {
    if (!std::isalnum(static_cast<unsigned char>(s[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && std::isalnum(static_cast<unsigned char>(s[j]))) ++j;
    std::string w = s.substr(i, j - i);
    if (!stopwords().count(w)) out.insert(std::move(w));
    i = j;
  }
  return out;
}

/// Fraction of the reference's content words that occur in the response.
inline double reference_recall(std::string_view reference, std::string_view response) {
  const auto ref = content_words(reference);
  if (ref.empty()) throw JudgeError("reference answer has no content words");
  const auto got = content_words(response);
  std::size_t hit = 0;
  for (const auto& w : ref) hit += got.count(w);
  return static_cast<double>(hit) / static_cast<double>(ref.size());
}

/// Recall bins: [0,1/6) -> 1, [1/6,2/6) -> 2, ... [5/6,1) -> 6, 1 -> 7.
inline int recall_bin(double recall) {
  if (recall >= 1.0) return 7;
  if (recall <= 0.0) return 1;
  return 1 + std::min(5, static_cast<int>(std::floor(recall * 6.0)));
}

class HeuristicJudge : public JudgeBackend {
 public:
  std::string name() const override { return "heuristic"; }
  JudgeScore rate(const Question& q, std::string_view response) override {
    if (!q.reference) throw JudgeError("question '" + q.id + "' has no reference answer for the heuristic judge");
    const int s = recall_bin(reference_recall(*q.reference, response));
    return {s, s};
  }
};

struct JudgeExchange {
  std::string request;
  std::string response;  // empty on transport failure
  int status = 0;
  std::string error;
};

inline const char* kDefaultRubric =
    "Rate the response on a 7-point Likert scale (1 = strongly disagree, 7 = strongly agree) for accuracy and for "
    "quality. Reply with JSON {\"accuracy\": n, \"quality\": n}.";

/// POSTs {prompt, response, rubric} to `url` and expects {accuracy, quality}.
/// Every exchange goes to `log`; failures throw JudgeError and are never scored.
class RemoteJudge : public JudgeBackend {
 public:
  RemoteJudge(std::string url, std::function<void(const JudgeExchange&)> log = {},
              std::chrono::seconds timeout = std::chrono::seconds(30), std::string rubric = kDefaultRubric)
      : url_(std::move(url)), log_(std::move(log)), timeout_(timeout), rubric_(std::move(rubric)) {
    const auto scheme = url_.find("://");
    if (scheme == std::string::npos) throw ParameterError("judge url needs a scheme: '" + url_ + "'");
    const auto slash = url_.find('/', scheme + 3);
    host_ = slash == std::string::npos ? url_ : url_.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : url_.substr(slash);
  }

  std::string name() const override { return "remote:" + url_; }

  JudgeScore rate(const Question& q, std::string_view response) override {
    JudgeExchange ex;
    ex.request = nlohmann::json{{"prompt", q.prompt}, {"response", std::string(response)}, {"rubric", rubric_}}.dump();
    httplib::Client cli(host_);
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    cli.set_write_timeout(timeout_);
    auto res = cli.Post(path_, ex.request, "application/json");
    if (!res) {
      ex.error = "transport failure: " + httplib::to_string(res.error());
      log(ex);
      throw JudgeError(ex.error + " (" + url_ + ")");
    }
    ex.status = res->status;
    ex.response = res->body;
    if (res->status != 200) {
      ex.error = "HTTP status " + std::to_string(res->status);
      log(ex);
      throw JudgeError(ex.error + " from " + url_);
    }
    JudgeScore s;
    try {
      const auto j = nlohmann::json::parse(res->body);
      s.accuracy = j.at("accuracy").get<int>();
      s.quality = j.at("quality").get<int>();
    } catch (const std::exception& e) {
      ex.error = std::string("malformed reply: ") + e.what();
      log(ex);
      throw JudgeError(ex.error);
    }
    if (s.accuracy < 1 || s.accuracy > 7 || s.quality < 1 || s.quality > 7) {
      ex.error = "reply scores outside 1..7";
      log(ex);
      throw JudgeError(ex.error);
    }
    log(ex);
    return s;
  }

 private:
  void log(const JudgeExchange& ex) const {
    if (log_) log_(ex);
  }

  std::string url_, host_, path_;
  std::function<void(const JudgeExchange&)> log_;
  std::chrono::seconds timeout_;
  std::string rubric_;
};

inline LikertRecord judge(const ResponseRecord& r, const Question& q, JudgeBackend& backend) {
  if (q.kind != QuestionKind::kQualitative) throw ContractError("question '" + q.id + "' is not qualitative");
  const auto s = backend.rate(q, r.text);
  return {backend.name(), r.config_id, q.id, s.accuracy, s.quality};
}

/// Judges every response to a qualitative question, in input order.
inline std::vector<LikertRecord> judge_all(const std::vector<ResponseRecord>& responses, const QuestionSet& qs,
                                           JudgeBackend& backend) {
  std::vector<LikertRecord> out;
  for (const auto& r : responses) {
    const auto& q = qs.at(r.question_id);
    if (q.kind == QuestionKind::kQualitative) out.push_back(judge(r, q, backend));
  }
  return out;
}

}  // namespace lkd::eval
