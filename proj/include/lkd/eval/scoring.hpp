#pragma once

// True/false accuracy and the units-aware reasoning grid.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "lkd/error.hpp"
#include "lkd/eval/quantity.hpp"
#include "lkd/eval/questions.hpp"

namespace lkd::eval {

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// First standalone "true"/"false" (any case), or nullopt.
inline std::optional<bool> extract_tf(std::string_view text) {
  const std::string s = lower(text);
  std::size_t i = 0;
  while (i < s.size()) {
    if (!std::isalnum(static_cast<unsigned char>(s[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && std::isalnum(static_cast<unsigned char>(s[j]))) ++j;
    const auto word = std::string_view(s).substr(i, j - i);
    if (word == "true") return true;
    if (word == "false") return false;
    i = j;
  }
  return std::nullopt;
}

/// One decimal, e.g. 84.0.
inline std::string format_percent(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", p);
  return buf;
}

struct TfAccuracy {
  std::string config;
  std::size_t correct = 0;
  std::size_t total = 0;  // every tf question in the set; an unanswered one is wrong
  double percent = 0;
  std::string text;
};

inline std::vector<TfAccuracy> score_tf(const std::vector<ResponseRecord>& responses, const QuestionSet& questions) {
  const auto tf = questions.of_kind(QuestionKind::kTf);
  if (tf.empty()) throw DegenerateInputError("the question set has no true/false questions");
  const auto by_key = index_responses(responses, questions);
  std::vector<TfAccuracy> out;
  for (const auto& config : config_order(responses)) {
    TfAccuracy a{config, 0, tf.size(), 0, ""};
    for (const auto* q : tf) {
      auto it = by_key.find({config, q->id});
      if (it == by_key.end()) continue;
      const auto said = extract_tf(it->second->text);
      if (said && *said == q->answer) ++a.correct;
    }
    a.percent = 100.0 * static_cast<double>(a.correct) / static_cast<double>(a.total);
    a.text = format_percent(a.percent);
    out.push_back(std::move(a));
  }
  return out;
}

enum class Outcome { kCorrect, kIncorrect, kRefused };

inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::kCorrect: return "correct";
    case Outcome::kIncorrect: return "incorrect";
    case Outcome::kRefused: return "refused";
  }
  return "?";
}

inline std::vector<std::string> default_refusal_patterns() { return {"cannot answer", "unable to assist", "as an ai"}; }

struct ReasoningScore {
  Outcome outcome = Outcome::kIncorrect;
  Quantity parsed;
};

/// Refusal first, then the parsed quantity must share the base unit and lie
/// within the relative tolerance (absolute 1e-9 when the expected value is 0).
inline ReasoningScore score_reasoning(std::string_view response, const Question& q,
                                      const std::vector<std::string>& refusal_patterns = default_refusal_patterns()) {
  if (q.kind != QuestionKind::kReasoning) throw ContractError("question '" + q.id + "' is not a reasoning question");
  const std::string low = lower(response);
  for (const auto& p : refusal_patterns) {
    if (!p.empty() && low.find(lower(p)) != std::string::npos) return {Outcome::kRefused, {}};
  }
  ReasoningScore s{Outcome::kIncorrect, parse_quantity(response)};
  if (!s.parsed.found) return s;
  const auto unit = parse_unit(q.unit);
  if (!unit) throw FormatError("question '" + q.id + "' has unknown unit '" + q.unit + "'");
  if (s.parsed.unit != unit->base) return s;
  const double expected = q.expected_value * unit->scale;
  const double err = std::abs(s.parsed.value - expected);
  const bool ok = expected == 0 ? err <= 1e-9 : err / std::abs(expected) <= q.tolerance;
  if (ok) s.outcome = Outcome::kCorrect;
  return s;
}

struct ReasoningCell {
  std::string config;
  bool answered = false;
  Outcome outcome = Outcome::kIncorrect;
  std::string shown;  // the extracted quantity, or "×" for a refusal
};

struct ReasoningRow {
  std::string question_id;
  std::string ground_truth;
  std::vector<ReasoningCell> cells;  // in configuration order
};

inline std::vector<ReasoningRow> reasoning_grid(const std::vector<ResponseRecord>& responses, const QuestionSet& questions,
                                                const std::vector<std::string>& refusal_patterns = default_refusal_patterns()) {
  const auto by_key = index_responses(responses, questions);
  const auto configs = config_order(responses);
  std::vector<ReasoningRow> rows;
  for (const auto* q : questions.of_kind(QuestionKind::kReasoning)) {
    ReasoningRow row{q->id, q->ground_truth(), {}};
    for (const auto& c : configs) {
      ReasoningCell cell{c, false, Outcome::kIncorrect, ""};
      if (auto it = by_key.find({c, q->id}); it != by_key.end()) {
        const auto s = score_reasoning(it->second->text, *q, refusal_patterns);
        cell.answered = true;
        cell.outcome = s.outcome;
        cell.shown = s.outcome == Outcome::kRefused ? "\xc3\x97" : s.parsed.text;
      }
      row.cells.push_back(std::move(cell));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace lkd::eval
