#pragma once

// Evaluation report: one JSON document plus one CSV per table.

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lkd/eval/likert.hpp"
#include "lkd/eval/questions.hpp"
#include "lkd/eval/ranking.hpp"
#include "lkd/eval/scoring.hpp"

namespace lkd::eval {

struct Table {
  std::string name;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_csv() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += csv_field(cells[i]);
      }
      out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }
  nlohmann::json to_json() const { return {{"header", header}, {"rows", rows}}; }
};

/// Splits CSV text written by Table::to_csv back into rows (header first).
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::string line;
  bool quoted = false;
  for (char c : text) {
    if (c == '\n' && !quoted) {
      out.push_back(split_csv_line(line));
      line.clear();
      continue;
    }
    if (c == '"') quoted = !quoted;
    line += c;
  }
  if (!line.empty()) out.push_back(split_csv_line(line));
  return out;
}

struct ReportInputs {
  std::optional<QuestionSet> questions;
  std::vector<ResponseRecord> responses;
  std::vector<LikertRecord> likert;
  std::vector<RankingBallot> ballots;
  std::vector<std::string> ballot_configs;  // empty: taken from the first ballot
  std::vector<std::string> refusal_patterns = default_refusal_patterns();
  bool population_std = true;
};

struct EvalReport {
  nlohmann::json document;
  std::vector<Table> tables;
};

inline std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Sections appear only for the inputs that were supplied.
inline EvalReport build_report(const ReportInputs& in) {
  EvalReport rep;
  auto& doc = rep.document;
  doc["sections"] = nlohmann::json::object();
  const bool have_qa = in.questions && !in.responses.empty();
  const auto configs = config_order(in.responses);

  if (have_qa && !in.questions->of_kind(QuestionKind::kTf).empty()) {
    const auto tf = score_tf(in.responses, *in.questions);
    nlohmann::json j = nlohmann::json::array();
    Table t{"tf", {"row", "Ground Truth"}, {{"RAQ: T/F Accuracy", "-"}}};
    for (const auto& a : tf) {
      j.push_back({{"config", a.config}, {"correct", a.correct}, {"total", a.total}, {"percent", a.percent}, {"text", a.text}});
      t.header.push_back(a.config);
      t.rows[0].push_back(a.text);
    }
    doc["sections"]["tf"] = j;
    rep.tables.push_back(std::move(t));
  }

  if (have_qa && !in.questions->of_kind(QuestionKind::kReasoning).empty()) {
    const auto grid = reasoning_grid(in.responses, *in.questions, in.refusal_patterns);
    nlohmann::json j = nlohmann::json::array();
    Table shown{"reasoning", {"question", "Ground Truth"}, {}};
    Table outcomes{"reasoning_outcomes", {"question"}, {}};
    for (const auto& c : configs) {
      shown.header.push_back(c);
      outcomes.header.push_back(c);
    }
    for (const auto& row : grid) {
      nlohmann::json cells = nlohmann::json::array();
      std::vector<std::string> a{row.question_id, row.ground_truth}, b{row.question_id};
      for (const auto& cell : row.cells) {
        const std::string outcome = cell.answered ? to_string(cell.outcome) : "missing";
        cells.push_back({{"config", cell.config}, {"shown", cell.shown}, {"outcome", outcome}});
        a.push_back(cell.shown);
        b.push_back(outcome);
      }
      j.push_back({{"question", row.question_id}, {"ground_truth", row.ground_truth}, {"cells", cells}});
      shown.rows.push_back(std::move(a));
      outcomes.rows.push_back(std::move(b));
    }
    doc["sections"]["reasoning"] = j;
    rep.tables.push_back(std::move(shown));
    rep.tables.push_back(std::move(outcomes));
  }

  if (!in.likert.empty()) {
    const auto cells = likert_aggregate(in.likert, in.population_std);
    const auto corr = likert_correlations(in.likert);
    const auto lconfigs = first_seen(in.likert, [](const LikertRecord& r) { return r.config; });
    const auto evaluators = first_seen(in.likert, [](const LikertRecord& r) { return r.evaluator; });
    nlohmann::json jc = nlohmann::json::array(), jr = nlohmann::json::array();
    for (const auto& c : cells) {
      jc.push_back({{"config", c.config},
                    {"evaluator", c.evaluator},
                    {"dimension", c.dimension},
                    {"n", c.stats.n},
                    {"mean", c.stats.mean},
                    {"std", std::isnan(c.stats.sd) ? nlohmann::json() : nlohmann::json(c.stats.sd)},
                    {"text", c.text}});
    }
    for (const auto& r : corr) {
      jr.push_back({{"config", r.config},
                    {"dimension", r.dimension},
                    {"evaluator_a", r.evaluator_a},
                    {"evaluator_b", r.evaluator_b},
                    {"pairs", r.pairs},
                    {"r", r.r ? nlohmann::json(*r.r) : nlohmann::json()},
                    {"note", r.note}});
    }
    doc["sections"]["likert"] = {{"cells", jc}, {"correlations", jr}, {"std", in.population_std ? "population" : "sample"}};

    Table t{"likert", {"config"}, {}};
    for (const auto& e : evaluators) {
      for (const char* d : kDimensions) t.header.push_back(e + " " + d);
    }
    for (std::size_t a = 0; a < evaluators.size(); ++a) {
      for (std::size_t b = a + 1; b < evaluators.size(); ++b) {
        for (const char* d : kDimensions) t.header.push_back("pearson " + evaluators[a] + "~" + evaluators[b] + " " + d);
      }
    }
    for (const auto& c : lconfigs) {
      std::vector<std::string> row{c};
      for (const auto& e : evaluators) {
        for (const char* d : kDimensions) {
          std::string text;
          for (const auto& cell : cells) {
            if (cell.config == c && cell.evaluator == e && cell.dimension == d) text = cell.text;
          }
          row.push_back(text);
        }
      }
      for (const auto& r : corr) {
        if (r.config == c) row.push_back(r.r ? fixed(*r.r, 2) : "");
      }
      t.rows.push_back(std::move(row));
    }
    rep.tables.push_back(std::move(t));
  }

  if (!in.ballots.empty()) {
    const auto h = ranking_histograms(in.ballots, in.ballot_configs);
    nlohmann::json pq = nlohmann::json::array();
    for (const auto& q : h.per_question) {
      pq.push_back({{"question", q.question},
                    {"ballots", q.ballots},
                    {"top_half", q.top_half},
                    {"worst", q.worst},
                    {"worst_entropy_bits", q.worst_entropy_bits}});
    }
    doc["sections"]["ranking"] = {{"configs", h.configs},         {"top_half_size", h.top_half_size},
                                  {"ballots", h.ballots},         {"top_half", h.top_half},
                                  {"worst", h.worst},             {"worst_entropy_bits", h.worst_entropy_bits},
                                  {"per_question", pq}};
    Table overall{"ranking_overall", {"config", "top_half", "worst"}, {}};
    for (std::size_t i = 0; i < h.configs.size(); ++i)
      overall.rows.push_back({h.configs[i], std::to_string(h.top_half[i]), std::to_string(h.worst[i])});
    Table per{"ranking_questions", {"question", "ballots", "worst_entropy_bits"}, {}};
    for (const auto& c : h.configs) per.header.push_back(c + " top_half");
    for (const auto& c : h.configs) per.header.push_back(c + " worst");
    for (const auto& q : h.per_question) {
      std::vector<std::string> row{q.question, std::to_string(q.ballots), fixed(q.worst_entropy_bits, 6)};
      for (auto v : q.top_half) row.push_back(std::to_string(v));
      for (auto v : q.worst) row.push_back(std::to_string(v));
      per.rows.push_back(std::move(row));
    }
    rep.tables.push_back(std::move(overall));
    rep.tables.push_back(std::move(per));
  }

  doc["tables"] = nlohmann::json::object();
  for (const auto& t : rep.tables) doc["tables"][t.name] = t.to_json();
  return rep;
}

/// report.json plus <table>.csv; returns the written paths.
inline std::vector<std::string> write_report(const EvalReport& rep, const std::string& dir, const nlohmann::json& manifest = {}) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  auto doc = rep.document;
  if (!manifest.is_null()) doc["manifest"] = manifest;
  const auto json_path = (std::filesystem::path(dir) / "report.json").string();
  write_file_bytes(json_path, doc.dump(2) + "\n");
  paths.push_back(json_path);
  for (const auto& t : rep.tables) {
    const auto p = (std::filesystem::path(dir) / (t.name + ".csv")).string();
    write_file_bytes(p, t.to_csv());
    paths.push_back(p);
  }
  return paths;
}

/// Chart data for the ranking figure: per-question top-half counts and
/// worst counts by configuration. A report without a ranking section
/// writes nothing and sends a notice instead.
inline std::vector<std::string> emit_plot_data(const nlohmann::json& report, const std::string& dir,
                                               const std::function<void(const std::string&)>& notice = {}) {
  const auto* sections = report.contains("sections") ? &report["sections"] : nullptr;
  if (!sections || !sections->contains("ranking")) {
    if (notice) notice("report has no ranking section; no plot data written");
    return {};
  }
  const auto& r = (*sections)["ranking"];
  const auto configs = r.at("configs").get<std::vector<std::string>>();
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  for (const char* key : {"top_half", "worst"}) {
    Table t{std::string("plot_") + key, {"question"}, {}};
    for (const auto& c : configs) t.header.push_back(c);
    for (const auto& q : r.at("per_question")) {
      std::vector<std::string> row{q.at("question").get<std::string>()};
      for (const auto& v : q.at(key)) row.push_back(std::to_string(v.get<std::size_t>()));
      t.rows.push_back(std::move(row));
    }
    const auto p = (std::filesystem::path(dir) / (t.name + ".csv")).string();
    write_file_bytes(p, t.to_csv());
    paths.push_back(p);
  }
  return paths;
}

}  // namespace lkd::eval
