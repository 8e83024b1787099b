#pragma once

// Deterministic electronics text from a small template grammar. The bundled
// data/toy_corpus.txt is generate_toy_corpus(42, 200000).

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lkd/rng.hpp"

namespace lkd {

namespace toy {

struct Component {
  std::string_view name;
  std::string_view quantity;
  std::string_view unit;    // empty for dimensionless quantities
  std::string_view units;
  std::string_view symbol;
  std::string_view role;
};

inline constexpr std::array<Component, 10> kComponents{{
    {"resistor", "resistance", "ohm", "ohms", "R", "limits the current through a branch"},
    {"capacitor", "capacitance", "farad", "farads", "C", "stores charge between two plates"},
    {"inductor", "inductance", "henry", "henries", "L", "stores energy in a magnetic field"},
    {"diode", "forward voltage", "volt", "volts", "D", "conducts current in one direction"},
    {"transistor", "current gain", "", "", "Q", "amplifies or switches a signal"},
    {"MOSFET", "threshold voltage", "volt", "volts", "M", "switches current with a gate voltage"},
    {"op-amp", "open-loop gain", "", "", "U", "amplifies the difference between its inputs"},
    {"transformer", "turns ratio", "", "", "T", "couples two windings through a shared core"},
    {"crystal", "resonant frequency", "hertz", "hertz", "Y", "sets a stable clock frequency"},
    {"fuse", "current rating", "ampere", "amperes", "F", "opens the circuit on overcurrent"},
}};

inline constexpr std::array<std::string_view, 12> kCircuits{
    "voltage divider", "low-pass filter", "high-pass filter", "full-wave rectifier", "common-emitter amplifier",
    "CMOS inverter",   "ring oscillator", "current mirror",   "buck converter",      "sample-and-hold circuit",
    "SRAM cell",       "phase-locked loop"};

inline constexpr std::array<std::string_view, 10> kProcesses{
    "photolithography", "ion implantation", "chemical vapor deposition", "etching", "oxidation",
    "annealing",        "metallization",    "wafer dicing",              "chemical mechanical polishing", "doping"};

inline constexpr std::array<std::string_view, 8> kMaterials{"silicon",  "germanium", "gallium arsenide", "copper",
                                                           "aluminum", "polysilicon", "silicon dioxide", "hafnium oxide"};

inline constexpr std::array<std::string_view, 8> kTools{"SPICE", "Verilog", "VHDL", "a logic synthesizer",
                                                       "a place-and-route tool", "a timing analyzer", "an oscilloscope",
                                                       "a layout editor"};

inline constexpr std::array<std::string_view, 6> kPrefixes{"pico", "nano", "micro", "milli", "kilo", "mega"};

inline std::string article(std::string_view word) {
  const char c = word.empty() ? 'x' : word[0];
  const bool vowel = c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u' || c == 'M';  // "an MOSFET"
  return std::string(vowel ? "an " : "a ") + std::string(word);
}

template <typename C>
std::string_view pick(Rng& rng, const C& c) {
  return c[rng.below(c.size())];
}

inline std::string sentence(Rng& rng) {
  const auto& c = kComponents[rng.below(kComponents.size())];
  const std::uint64_t value = 1 + rng.below(999);
  std::string s;
  switch (rng.below(9)) {
    case 0:
      s += article(c.name);
      s += " ";
      s += c.role;
      s += ".";
      s[0] = 'A';
      break;
    case 1:
      s += "The ";
      s += c.quantity;
      s += " of ";
      s += article(c.name);
      if (c.unit.empty()) {
        s += " is a dimensionless number.";
      } else {
        s += " is measured in ";
        s += c.units;
        s += ".";
      }
      break;
    case 2:
      s += "In a ";
      s += pick(rng, kCircuits);
      s += ", the ";
      s += c.name;
      s += " ";
      s += c.symbol;
      s += std::to_string(1 + rng.below(9));
      s += " ";
      s += c.role;
      s += ".";
      break;
    case 3:
      s += "Q: What does ";
      s += article(c.name);
      s += " do? A: It ";
      s += c.role;
      s += ".";
      break;
    case 4:
      s += "True or false: ";
      s += article(c.name);
      s += " ";
      if (rng.below(2) == 0) {
        s += c.role;
        s += ". True.";
      } else {
        s += kComponents[(&c - kComponents.data() + 1 + rng.below(kComponents.size() - 1)) % kComponents.size()].role;
        s += ". False.";
      }
      break;
    case 5:
      s += "A ";
      s += std::to_string(value);
      s += " ";
      if (!c.unit.empty()) {
        s += pick(rng, kPrefixes);
        s += value == 1 ? c.unit : c.units;
        s += " ";
      } else {
        s += "gain ";
      }
      s += c.name;
      s += " appears in the ";
      s += pick(rng, kCircuits);
      s += ".";
      break;
    case 6:
      s += "During ";
      s += pick(rng, kProcesses);
      s += ", the ";
      s += pick(rng, kMaterials);
      s += " layer is patterned before ";
      s += pick(rng, kProcesses);
      s += ".";
      break;
    case 7:
      s += "Engineers simulate the ";
      s += pick(rng, kCircuits);
      s += " with ";
      s += pick(rng, kTools);
      s += " and check the ";
      s += c.quantity;
      s += " of each ";
      s += c.name;
      s += ".";
      break;
    default: {
      const std::uint64_t v = 1 + rng.below(24), r = 1 + rng.below(20);
      s += "If the supply is ";
      s += std::to_string(v);
      s += " V and the load is ";
      s += std::to_string(r);
      s += " ohms, the current is ";
      const std::uint64_t milli = (v * 1000 + r / 2) / r;
      s += std::to_string(milli);
      s += " mA.";
      break;
    }
  }
  return s;
}

}  // namespace toy

/// Sentences from the grammar until at least `target_bytes` are produced,
/// wrapped into paragraphs of 3 to 7 sentences.
inline std::string generate_toy_corpus(std::uint64_t seed, std::size_t target_bytes) {
  Rng rng = Rng::substream(seed, "corpus");
  std::string out;
  out.reserve(target_bytes + 256);
  while (out.size() < target_bytes) {
    const std::uint64_t n = 3 + rng.below(5);
    for (std::uint64_t i = 0; i < n; ++i) {
      if (i) out += ' ';
      out += toy::sentence(rng);
    }
    out += '\n';
  }
  return out;
}

}  // namespace lkd
