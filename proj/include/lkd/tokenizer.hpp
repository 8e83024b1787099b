#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "lkd/error.hpp"

namespace lkd {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kByteOffset = 3;
inline constexpr int kVocabSize = 259;

struct Encoded {
  std::vector<int> ids;
  bool truncated = false;
};

/// Byte-level encoding: BOS, then byte b -> b + 3. A non-zero max_len keeps the
/// first max_len ids and reports the cut.
inline Encoded encode(std::string_view text, std::size_t max_len = 0) {
  Encoded out;
  out.ids.reserve(text.size() + 1);
  out.ids.push_back(kBos);
  for (unsigned char c : text) out.ids.push_back(static_cast<int>(c) + kByteOffset);
  if (max_len != 0 && out.ids.size() > max_len) {
    out.ids.resize(max_len);
    out.truncated = true;
  }
  return out;
}

/// Inverse of encode on byte ids; PAD/BOS/EOS are dropped.
inline std::string decode(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= kVocabSize) {
      throw IndexError("token id " + std::to_string(id) + " outside [0, " + std::to_string(kVocabSize) + ")");
    }
    if (id >= kByteOffset) out.push_back(static_cast<char>(static_cast<unsigned char>(id - kByteOffset)));
  }
  return out;
}

/// Byte ids without the BOS marker.
inline std::vector<int> encode_bytes(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c) + kByteOffset);
  return ids;
}

}  // namespace lkd
