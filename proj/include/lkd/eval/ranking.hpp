#pragma once

// Ordinal ballots: top-half and worst histograms per configuration.

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lkd/checkpoint.hpp"
#include "lkd/error.hpp"
#include "lkd/eval/questions.hpp"

namespace lkd::eval {

struct RankingBallot {
  std::string respondent;
  std::string question;
  std::vector<std::string> ranking;  // best first
};

inline std::vector<RankingBallot> parse_ballots(const std::string& text) {
  std::vector<RankingBallot> out;
  for_each_json_line(text, "ballots", [&](const nlohmann::json& j, std::size_t n) {
    auto bad = [&](const std::string& what) { return FormatError("ballots line " + std::to_string(n) + ": " + what); };
    if (!j.contains("respondent_id") || !(j["respondent_id"].is_string() || j["respondent_id"].is_number_integer()))
      throw bad("field 'respondent_id' must be a string or integer");
    if (!j.contains("question_id") || !(j["question_id"].is_string() || j["question_id"].is_number_integer()))
      throw bad("field 'question_id' must be a string or integer");
    if (!j.contains("ranking") || !j["ranking"].is_array()) throw bad("field 'ranking' must be an array");
    auto id = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : std::to_string(v.get<long long>()); };
    RankingBallot b{id(j["respondent_id"]), id(j["question_id"]), {}};
    for (const auto& c : j["ranking"]) {
      if (!c.is_string()) throw bad("ranking entries must be strings");
      b.ranking.push_back(c.get<std::string>());
    }
    out.push_back(std::move(b));
  });
  return out;
}

inline std::vector<RankingBallot> load_ballots(const std::string& path) { return parse_ballots(read_file_bytes(path)); }

struct QuestionHistogram {
  std::string question;
  std::size_t ballots = 0;
  std::vector<std::size_t> top_half;  // per configuration
  std::vector<std::size_t> worst;
  double worst_entropy_bits = 0;
};

struct RankingTables {
  std::vector<std::string> configs;
  std::size_t top_half_size = 0;
  std::size_t ballots = 0;
  std::vector<std::size_t> top_half;
  std::vector<std::size_t> worst;
  double worst_entropy_bits = 0;
  std::vector<QuestionHistogram> per_question;  // in order of first appearance
};

/// Shannon entropy in bits of a count vector.
inline double entropy_bits(const std::vector<std::size_t>& counts) {
  double total = 0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total == 0) return 0;
  double h = 0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log2(p);
  }
  return h;
}

/// The first floor(n/2) places of each ballot count toward top-half, the
/// last place toward worst. Ballots must be permutations of `configs`;
/// an empty `configs` takes the first ballot's set in its listed order.
inline RankingTables ranking_histograms(const std::vector<RankingBallot>& ballots, std::vector<std::string> configs = {}) {
  if (configs.empty() && !ballots.empty()) configs = ballots.front().ranking;
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (!pos.emplace(configs[i], i).second) throw FormatError("configuration '" + configs[i] + "' declared twice");
  }
  const std::size_t n = configs.size();
  RankingTables t;
  t.configs = configs;
  t.top_half_size = n / 2;
  t.top_half.assign(n, 0);
  t.worst.assign(n, 0);
  std::map<std::string, std::size_t> q_index;
  for (const auto& b : ballots) {
    if (b.ranking.size() != n)
      throw FormatError("ballot from respondent '" + b.respondent + "' ranks " + std::to_string(b.ranking.size()) + " of " +
                        std::to_string(n) + " configurations");
    std::vector<std::size_t> idx;
    std::set<std::size_t> seen;
    for (const auto& c : b.ranking) {
      auto it = pos.find(c);
      if (it == pos.end()) throw FormatError("ballot from respondent '" + b.respondent + "' names unknown configuration '" + c + "'");
      if (!seen.insert(it->second).second)
        throw FormatError("ballot from respondent '" + b.respondent + "' is not a total order ('" + c + "' repeated)");
      idx.push_back(it->second);
    }
    auto [qit, fresh] = q_index.emplace(b.question, t.per_question.size());
    if (fresh) t.per_question.push_back({b.question, 0, std::vector<std::size_t>(n, 0), std::vector<std::size_t>(n, 0), 0});
    auto& q = t.per_question[qit->second];
    ++q.ballots;
    ++t.ballots;
    for (std::size_t k = 0; k < t.top_half_size; ++k) {
      ++q.top_half[idx[k]];
      ++t.top_half[idx[k]];
    }
    if (n > 0) {
      ++q.worst[idx.back()];
      ++t.worst[idx.back()];
    }
  }
  for (auto& q : t.per_question) q.worst_entropy_bits = entropy_bits(q.worst);
  t.worst_entropy_bits = entropy_bits(t.worst);
  return t;
}

}  // namespace lkd::eval
