#pragma once

// Benchmark records: question sets (JSON array), responses (JSON lines).

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lkd/checkpoint.hpp"
#include "lkd/error.hpp"
#include "lkd/eval/quantity.hpp"

namespace lkd::eval {

enum class QuestionKind { kTf, kQualitative, kReasoning };

inline std::string to_string(QuestionKind k) {
  switch (k) {
    case QuestionKind::kTf: return "tf";
    case QuestionKind::kQualitative: return "qualitative";
    case QuestionKind::kReasoning: return "reasoning";
  }
  return "?";
}

struct Question {
  std::string id;
  QuestionKind kind = QuestionKind::kQualitative;
  std::string prompt;
  bool answer = false;        // tf
  double expected_value = 0;  // reasoning, in the units of `unit`
  std::string unit;           // reasoning; empty for a bare number
  double tolerance = 0.05;    // reasoning, relative
  std::optional<std::string> parent_id;
  std::optional<std::string> reference;  // qualitative

  /// Ground truth as written, e.g. "3 μm".
  std::string ground_truth() const;
};

struct ResponseRecord {
  std::string question_id;
  std::string config_id;
  std::string text;
};

class QuestionSet {
 public:
  QuestionSet() = default;
  explicit QuestionSet(std::vector<Question> qs) : questions_(std::move(qs)) {
    for (std::size_t i = 0; i < questions_.size(); ++i) {
      if (!by_id_.emplace(questions_[i].id, i).second)
        throw FormatError("question[" + std::to_string(i) + "]: duplicate id '" + questions_[i].id + "'");
    }
    for (std::size_t i = 0; i < questions_.size(); ++i) {
      const auto& p = questions_[i].parent_id;
      if (p && !by_id_.count(*p))
        throw FormatError("question[" + std::to_string(i) + "]: field 'parent_id' refers to unknown question '" + *p + "'");
    }
  }

  const std::vector<Question>& all() const { return questions_; }
  std::size_t size() const { return questions_.size(); }
  bool contains(const std::string& id) const { return by_id_.count(id) > 0; }
  const Question& at(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw LookupError("unknown question id '" + id + "'");
    return questions_[it->second];
  }
  std::vector<const Question*> of_kind(QuestionKind k) const {
    std::vector<const Question*> out;
    for (const auto& q : questions_) {
      if (q.kind == k) out.push_back(&q);
    }
    return out;
  }

 private:
  std::vector<Question> questions_;
  std::map<std::string, std::size_t> by_id_;
};

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string Question::ground_truth() const {
  if (kind == QuestionKind::kTf) return answer ? "True" : "False";
  if (kind == QuestionKind::kReasoning) return unit.empty() ? format_number(expected_value) : format_number(expected_value) + " " + unit;
  return reference.value_or("");
}

namespace detail {

inline std::string record_field(std::size_t i, const char* field) {
  return "question[" + std::to_string(i) + "]: field '" + field + "' ";
}

inline std::string string_field(const nlohmann::json& j, std::size_t i, const char* field, bool required) {
  if (!j.contains(field) || j[field].is_null()) {
    if (required) throw FormatError(record_field(i, field) + "is missing");
    return {};
  }
  if (!j[field].is_string()) throw FormatError(record_field(i, field) + "must be a string");
  return j[field].get<std::string>();
}

}  // namespace detail

inline Question question_from_json(const nlohmann::json& j, std::size_t i) {
  if (!j.is_object()) throw FormatError("question[" + std::to_string(i) + "]: not an object");
  Question q;
  q.id = detail::string_field(j, i, "id", true);
  if (q.id.empty()) throw FormatError(detail::record_field(i, "id") + "is empty");
  const auto kind = detail::string_field(j, i, "kind", true);
  if (kind == "tf") {
    q.kind = QuestionKind::kTf;
  } else if (kind == "qualitative") {
    q.kind = QuestionKind::kQualitative;
  } else if (kind == "reasoning") {
    q.kind = QuestionKind::kReasoning;
  } else {
    throw FormatError(detail::record_field(i, "kind") + "must be tf, qualitative or reasoning, got '" + kind + "'");
  }
  q.prompt = detail::string_field(j, i, "prompt", true);
  auto parent = detail::string_field(j, i, "parent_id", false);
  if (!parent.empty()) q.parent_id = parent;
  switch (q.kind) {
    case QuestionKind::kTf:
      if (!j.contains("answer") || !j["answer"].is_boolean())
        throw FormatError(detail::record_field(i, "answer") + "must be a boolean for tf questions");
      q.answer = j["answer"].get<bool>();
      break;
    case QuestionKind::kReasoning:
      if (!j.contains("expected_value") || !j["expected_value"].is_number())
        throw FormatError(detail::record_field(i, "expected_value") + "must be a number for reasoning questions");
      q.expected_value = j["expected_value"].get<double>();
      if (!j.contains("unit") || !j["unit"].is_string())
        throw FormatError(detail::record_field(i, "unit") + "must be a string for reasoning questions");
      q.unit = j["unit"].get<std::string>();
      if (!parse_unit(q.unit)) throw FormatError(detail::record_field(i, "unit") + "has unknown unit '" + q.unit + "'");
      if (j.contains("tolerance") && !j["tolerance"].is_null()) {
        if (!j["tolerance"].is_number() || j["tolerance"].get<double>() < 0)
          throw FormatError(detail::record_field(i, "tolerance") + "must be a non-negative number");
        q.tolerance = j["tolerance"].get<double>();
      }
      break;
    case QuestionKind::kQualitative: {
      auto ref = detail::string_field(j, i, "reference", false);
      if (!ref.empty()) q.reference = ref;
      break;
    }
  }
  return q;
}

inline nlohmann::json to_json(const Question& q) {
  nlohmann::json j{{"id", q.id}, {"kind", to_string(q.kind)}, {"prompt", q.prompt}};
  if (q.kind == QuestionKind::kTf) j["answer"] = q.answer;
  if (q.kind == QuestionKind::kReasoning) {
    j["expected_value"] = q.expected_value;
    j["unit"] = q.unit;
    j["tolerance"] = q.tolerance;
  }
  if (q.parent_id) j["parent_id"] = *q.parent_id;
  if (q.reference) j["reference"] = *q.reference;
  return j;
}

inline QuestionSet parse_question_set(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("question set is not valid JSON: ") + e.what());
  }
  if (!j.is_array()) throw FormatError("question set must be a JSON array");
  std::vector<Question> qs;
  for (std::size_t i = 0; i < j.size(); ++i) qs.push_back(question_from_json(j[i], i));
  return QuestionSet(std::move(qs));
}

inline QuestionSet load_question_set(const std::string& path) { return parse_question_set(read_file_bytes(path)); }

/// Calls `fn(json, line_number)` for each non-blank line.
template <typename Fn>
void for_each_json_line(const std::string& text, const std::string& what, Fn&& fn) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(what + " line " + std::to_string(n) + ": " + e.what());
    }
    if (!j.is_object()) throw FormatError(what + " line " + std::to_string(n) + ": not an object");
    fn(j, n);
  }
}

inline std::vector<ResponseRecord> parse_responses(const std::string& text) {
  std::vector<ResponseRecord> out;
  for_each_json_line(text, "responses", [&](const nlohmann::json& j, std::size_t n) {
    for (const char* f : {"question_id", "config_id", "text"}) {
      if (!j.contains(f) || !j[f].is_string())
        throw FormatError("responses line " + std::to_string(n) + ": field '" + f + "' must be a string");
    }
    out.push_back({j["question_id"].get<std::string>(), j["config_id"].get<std::string>(), j["text"].get<std::string>()});
  });
  return out;
}

inline std::vector<ResponseRecord> load_responses(const std::string& path) { return parse_responses(read_file_bytes(path)); }

/// Configuration ids in order of first appearance.
inline std::vector<std::string> config_order(const std::vector<ResponseRecord>& rs) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : rs) {
    if (seen.insert(r.config_id).second) out.push_back(r.config_id);
  }
  return out;
}

/// (config, question) -> response, rejecting unknown questions and duplicates.
inline std::map<std::pair<std::string, std::string>, const ResponseRecord*> index_responses(
    const std::vector<ResponseRecord>& rs, const QuestionSet& qs) {
  std::map<std::pair<std::string, std::string>, const ResponseRecord*> out;
  for (const auto& r : rs) {
    if (!qs.contains(r.question_id)) throw LookupError("response for unknown question '" + r.question_id + "'");
    if (!out.emplace(std::pair{r.config_id, r.question_id}, &r).second)
      throw FormatError("duplicate response for question '" + r.question_id + "' from '" + r.config_id + "'");
  }
  return out;
}

}  // namespace lkd::eval
