#pragma once

// Number-plus-unit extraction from free text ("3 μm", "0.66 kΩ", "2/3 kΩ").

#include <array>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

namespace lkd::eval {

struct UnitScale {
  double scale = 1;  // multiply a value in this unit by scale to get base units
  std::string base;  // "m", "A", "V", "Ω", "s" or "" (dimensionless)
};

struct Prefix {
  std::string_view text;
  double scale;
};

inline constexpr std::array<Prefix, 9> kSiPrefixes{{{"G", 1e9},
                                                     {"M", 1e6},
                                                     {"k", 1e3},
                                                     {"m", 1e-3},
                                                     {"\xce\xbc", 1e-6},  // μ (Greek mu)
                                                     {"\xc2\xb5", 1e-6},  // µ (micro sign)
                                                     {"u", 1e-6},
                                                     {"n", 1e-9},
                                                     {"p", 1e-12}}};

namespace detail {

inline std::optional<std::string> base_unit(std::string_view w) {
  if (w == "m" || w == "A" || w == "V" || w == "s") return std::string(w);
  if (w == "\xce\xa9" || w == "\xe2\x84\xa6" || w == "Ohm" || w == "ohm" || w == "Ohms" || w == "ohms") return "\xce\xa9";
  return std::nullopt;
}

// Letters plus the multi-byte μ, µ, Ω and the ohm sign.
inline std::size_t unit_char_len(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  if (std::isalpha(c)) return 1;
  auto starts = [&](std::string_view p) { return s.substr(i, p.size()) == p; };
  if (starts("\xce\xbc") || starts("\xc2\xb5") || starts("\xce\xa9")) return 2;
  if (starts("\xe2\x84\xa6")) return 3;
  return 0;
}

inline bool word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.';
}

inline std::optional<double> number_at(std::string_view s, std::size_t& i) {
  double v = 0;
  const char* first = s.data() + i;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr == first) return std::nullopt;
  i += static_cast<std::size_t>(ptr - first);
  return v;
}

}  // namespace detail

/// "μm" -> {1e-6, "m"}; "" -> dimensionless. Unknown words give nullopt.
inline std::optional<UnitScale> parse_unit(std::string_view w) {
  if (w.empty()) return UnitScale{1, ""};
  if (auto b = detail::base_unit(w)) return UnitScale{1, *b};
  for (const auto& p : kSiPrefixes) {
    if (w.size() > p.text.size() && w.substr(0, p.text.size()) == p.text) {
      if (auto b = detail::base_unit(w.substr(p.text.size()))) return UnitScale{p.scale, *b};
    }
  }
  return std::nullopt;
}

struct Quantity {
  bool found = false;
  double value = 0;  // in base units
  std::string unit;  // base unit, "" when dimensionless
  std::string text;  // the matched span
};

/// First standalone number in `text`, with an optional fraction ("2/3") and
/// an optional unit word right after it. A following word that is not a
/// unit leaves the number dimensionless.
inline Quantity parse_quantity(std::string_view text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (i > 0 && detail::word_char(text[i - 1])) continue;
    std::size_t j = i;
    bool negative = false;
    if (text[j] == '-' || text[j] == '+') {
      negative = text[j] == '-';
      ++j;
    }
    if (j >= text.size()) break;
    const bool starts_number = std::isdigit(static_cast<unsigned char>(text[j])) ||
                               (text[j] == '.' && j + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[j + 1])));
    if (!starts_number) continue;
    auto v = detail::number_at(text, j);
    if (!v) continue;
    double value = *v;
    if (j + 1 < text.size() && text[j] == '/' && std::isdigit(static_cast<unsigned char>(text[j + 1]))) {
      std::size_t k = j + 1;
      if (auto d = detail::number_at(text, k); d && *d != 0) {
        value /= *d;
        j = k;
      }
    }
    if (negative) value = -value;
    std::size_t end = j;
    std::size_t k = j;
    while (k < text.size() && text[k] == ' ') ++k;
    std::size_t w = k;
    while (w < text.size()) {
      const auto n = detail::unit_char_len(text, w);
      if (n == 0) break;
      w += n;
    }
    UnitScale unit{1, ""};
    if (w > k) {
      if (auto u = parse_unit(text.substr(k, w - k))) {
        unit = *u;
        end = w;
      }
    }
    return {true, value * unit.scale, unit.base, std::string(text.substr(i, end - i))};
  }
  return {};
}

/// Inverse of parse_quantity on the supported grid: "<mantissa> <prefix><unit>".
inline std::string format_quantity(double mantissa, std::string_view prefix, std::string_view unit) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", mantissa);
  std::string s = buf;
  if (!prefix.empty() || !unit.empty()) {
    s += ' ';
    s += prefix;
    s += unit;
  }
  return s;
}

}  // namespace lkd::eval
