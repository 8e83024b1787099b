#pragma once

// 7-point Likert cells (mean ± std) and inter-rater Pearson correlation.

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "lkd/checkpoint.hpp"
#include "lkd/error.hpp"

namespace lkd::eval {

struct LikertRecord {
  std::string evaluator;
  std::string config;
  std::string question;
  int accuracy = 0;
  int quality = 0;
};

/// Comma-separated fields, with double-quoted fields allowed.
inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  return out;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<LikertRecord> parse_likert_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("likert csv is empty");
  const auto header = split_csv_line(line);
  if (header != std::vector<std::string>{"evaluator", "config", "question", "accuracy", "quality"})
    throw FormatError("likert csv header must be evaluator,config,question,accuracy,quality");
  std::vector<LikertRecord> out;
  std::size_t n = 1;
  auto score = [&](const std::string& s, const char* field) {
    int v = 0;
    std::size_t used = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty() || v < 1 || v > 7)
      throw FormatError("likert csv line " + std::to_string(n) + ": " + field + " must be an integer in 1..7, got '" + s + "'");
    return v;
  };
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw FormatError("likert csv line " + std::to_string(n) + ": expected 5 fields");
    out.push_back({f[0], f[1], f[2], score(f[3], "accuracy"), score(f[4], "quality")});
  }
  return out;
}

inline std::vector<LikertRecord> load_likert_csv(const std::string& path) { return parse_likert_csv(read_file_bytes(path)); }

inline constexpr std::array<const char*, 2> kDimensions{"accuracy", "quality"};

inline int score_of(const LikertRecord& r, std::string_view dim) { return dim == "accuracy" ? r.accuracy : r.quality; }

/// Mean to at most three decimals (at least one), std to two: "4.2±1.96".
inline std::string format_mean_std(double mean, double sd) {
  char m[32], s[32];
  std::snprintf(m, sizeof m, "%.3f", mean);
  std::string ms = m;
  while (ms.size() > 1 && ms.back() == '0' && ms[ms.size() - 2] != '.') ms.pop_back();
  std::snprintf(s, sizeof s, "%.2f", sd);
  return ms + "\xc2\xb1" + s;
}

struct MeanStd {
  std::size_t n = 0;
  double mean = 0;
  double sd = 0;
};

/// Two-pass mean and standard deviation; `population` divides by n, else n-1.
inline MeanStd mean_std(const std::vector<double>& x, bool population = true) {
  MeanStd r;
  r.n = x.size();
  if (x.empty()) return r;
  double s = 0;
  for (double v : x) s += v;
  r.mean = s / static_cast<double>(x.size());
  double ss = 0;
  for (double v : x) ss += (v - r.mean) * (v - r.mean);
  const double denom = population ? static_cast<double>(x.size()) : static_cast<double>(x.size()) - 1.0;
  r.sd = denom > 0 ? std::sqrt(ss / denom) : NAN;
  return r;
}

struct LikertCell {
  std::string config;
  std::string evaluator;
  std::string dimension;
  MeanStd stats;
  std::string text;
};

template <typename Get>
std::vector<std::string> first_seen(const std::vector<LikertRecord>& rs, Get get) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : rs) {
    if (seen.insert(get(r)).second) out.push_back(get(r));
  }
  return out;
}

/// One cell per (configuration, evaluator, dimension) that has records.
/// Cells without records are left out rather than reported as zero.
inline std::vector<LikertCell> likert_aggregate(const std::vector<LikertRecord>& records, bool population = true) {
  std::vector<LikertCell> out;
  const auto configs = first_seen(records, [](const LikertRecord& r) { return r.config; });
  const auto evaluators = first_seen(records, [](const LikertRecord& r) { return r.evaluator; });
  for (const auto& c : configs) {
    for (const auto& e : evaluators) {
      for (const char* dim : kDimensions) {
        std::vector<double> xs;
        for (const auto& r : records) {
          if (r.config == c && r.evaluator == e) xs.push_back(score_of(r, dim));
        }
        if (xs.empty()) continue;
        const auto ms = mean_std(xs, population);
        out.push_back({c, e, dim, ms, std::isnan(ms.sd) ? "" : format_mean_std(ms.mean, ms.sd)});
      }
    }
  }
  return out;
}

/// Product-moment correlation, two-pass.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ConformanceError("pearson inputs differ in length");
  if (x.size() < 2) throw DegenerateInputError("pearson needs at least 2 pairs");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0 || syy == 0) throw UndefinedCorrelationError("a score vector is constant");
  return sxy / std::sqrt(sxx * syy);
}

struct Correlation {
  std::string config;
  std::string dimension;
  std::string evaluator_a;
  std::string evaluator_b;
  std::size_t pairs = 0;
  std::optional<double> r;  // absent when undefined
  std::string note;
};

/// Pearson between every pair of evaluators, per configuration and
/// dimension, over the questions both rated.
inline std::vector<Correlation> likert_correlations(const std::vector<LikertRecord>& records) {
  std::vector<Correlation> out;
  const auto configs = first_seen(records, [](const LikertRecord& r) { return r.config; });
  const auto evaluators = first_seen(records, [](const LikertRecord& r) { return r.evaluator; });
  std::map<std::tuple<std::string, std::string, std::string>, const LikertRecord*> by_key;
  for (const auto& r : records) {
    if (!by_key.emplace(std::tuple{r.evaluator, r.config, r.question}, &r).second)
      throw FormatError("duplicate likert record for " + r.evaluator + "/" + r.config + "/" + r.question);
  }
  for (const auto& c : configs) {
    for (std::size_t a = 0; a < evaluators.size(); ++a) {
      for (std::size_t b = a + 1; b < evaluators.size(); ++b) {
        for (const char* dim : kDimensions) {
          std::vector<double> xs, ys;
          for (const auto& r : records) {
            if (r.config != c || r.evaluator != evaluators[a]) continue;
            auto it = by_key.find({evaluators[b], c, r.question});
            if (it == by_key.end()) continue;
            xs.push_back(score_of(r, dim));
            ys.push_back(score_of(*it->second, dim));
          }
          Correlation corr{c, dim, evaluators[a], evaluators[b], xs.size(), std::nullopt, ""};
          try {
            corr.r = pearson(xs, ys);
          } catch (const Error& e) {
            corr.note = e.what();
          }
          out.push_back(std::move(corr));
        }
      }
    }
  }
  return out;
}

}  // namespace lkd::eval
