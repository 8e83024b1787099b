#pragma once

// "LKD1" container: 4-byte magic, u64 little-endian header length, UTF-8 JSON
// header, then little-endian float32 payloads in manifest order. The manifest
// lives under header["tensors"] as {name, shape, offset, count}; offsets are
// byte offsets from the start of the payload section.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "lkd/error.hpp"
#include "lkd/tensor.hpp"

namespace lkd {

using json = nlohmann::json;

inline constexpr char kMagic[4] = {'L', 'K', 'D', '1'};
inline constexpr int kFormatVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct LkdFile {
  json header;
  std::vector<TensorRecord> tensors;

  const TensorRecord& tensor(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw FormatError("missing tensor '" + name + "'");
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return true;
    }
    return false;
  }
};

template <typename T>
TensorRecord to_record(std::string name, const Tensor<T>& t) {
  return TensorRecord{std::move(name), t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
}

template <typename T>
Tensor<T> from_record(const TensorRecord& r) {
  return Tensor<T>(r.shape, std::vector<T>(r.values.begin(), r.values.end()));
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline float get_f32(const std::string& in, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

/// Serializes to bytes. `header` supplies everything except format_version,
/// kind and the tensor manifest, which are filled in here.
inline std::string encode_lkd(const std::string& kind, json header, const std::vector<TensorRecord>& tensors) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw ConformanceError("tensor '" + t.name + "' shape/data mismatch");
    manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.values.size()}});
    offset += 4 * t.values.size();
  }
  header["format_version"] = kFormatVersion;
  header["kind"] = kind;
  header["tensors"] = std::move(manifest);
  const std::string text = header.dump();
  std::string out(kMagic, 4);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& t : tensors) {
    for (float f : t.values) detail::put_f32(out, f);
  }
  return out;
}

inline LkdFile decode_lkd(const std::string& bytes, const std::string& expected_kind = {}) {
  if (bytes.size() < 12) throw FormatError("file shorter than the 12-byte preamble (offset 0)");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic at offset 0");
  const std::uint64_t header_len = detail::get_u64(bytes, 4);
  if (header_len > bytes.size() - 12) {
    throw FormatError("header length " + std::to_string(header_len) + " overruns file at offset 4");
  }
  LkdFile file;
  try {
    file.header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::parse_error& e) {
    throw FormatError("malformed JSON header at offset " + std::to_string(12 + e.byte) + ": " + e.what());
  }
  const auto& h = file.header;
  if (!h.is_object() || !h.contains("format_version") || !h["format_version"].is_number_integer()) {
    throw FormatError("header lacks format_version (offset 12)");
  }
  if (h["format_version"].get<int>() != kFormatVersion) {
    throw VersionError("unsupported format_version " + std::to_string(h["format_version"].get<int>()) +
                       " (expected " + std::to_string(kFormatVersion) + ")");
  }
  if (!h.contains("kind") || !h["kind"].is_string()) throw FormatError("header lacks kind (offset 12)");
  if (!expected_kind.empty() && h["kind"].get<std::string>() != expected_kind) {
    throw FormatError("expected kind '" + expected_kind + "' but file holds '" + h["kind"].get<std::string>() + "'");
  }
  if (!h.contains("tensors") || !h["tensors"].is_array()) throw FormatError("header lacks tensor manifest (offset 12)");
  const std::size_t payload = 12 + header_len;
  for (const auto& entry : h["tensors"]) {
    TensorRecord rec;
    try {
      rec.name = entry.at("name").get<std::string>();
      rec.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = entry.at("count").get<std::uint64_t>();
      if (shape_numel(rec.shape) != count) throw FormatError("tensor '" + rec.name + "' count disagrees with shape");
      const std::size_t begin = payload + offset;
      if (offset > bytes.size() || count * 4 > bytes.size() - std::min<std::size_t>(bytes.size(), begin)) {
        throw FormatError("payload of tensor '" + rec.name + "' truncated at offset " + std::to_string(begin) +
                          " (file has " + std::to_string(bytes.size()) + " bytes)");
      }
      rec.values.resize(count);
      for (std::uint64_t i = 0; i < count; ++i) rec.values[i] = detail::get_f32(bytes, begin + 4 * i);
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed manifest entry: ") + e.what());
    }
    file.tensors.push_back(std::move(rec));
  }
  return file;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

inline void write_lkd(const std::string& path, const std::string& kind, json header,
                      const std::vector<TensorRecord>& tensors) {
  write_file_bytes(path, encode_lkd(kind, std::move(header), tensors));
}

inline LkdFile read_lkd(const std::string& path, const std::string& expected_kind = {}) {
  return decode_lkd(read_file_bytes(path), expected_kind);
}

}  // namespace lkd
