#pragma once

// MDET v1 container for models, activation traces and datasets.
//
//   offset 0   "MDET"
//   offset 4   u32 LE version (= 1)
//   offset 8   u64 LE header length in bytes
//   offset 16  header: compact JSON, keys sorted, no whitespace
//   then       payload: raw little-endian tensors at the header's byte offsets
//
// Tensors are f32 (or i32 for labels) on disk and double in memory. The full
// layout is described in docs/format.md.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mde/bn.hpp"
#include "mde/tensor.hpp"

namespace mde {

inline constexpr char kMdetMagic[4] = {'M', 'D', 'E', 'T'};
inline constexpr std::uint32_t kMdetVersion = 1;
inline constexpr std::size_t kMdetPreamble = 16;

enum class MdetErrorKind { BadMagic, UnsupportedVersion, CorruptHeader, RangeViolation, Io, Invalid };

inline std::string_view to_string(MdetErrorKind k) {
  switch (k) {
    case MdetErrorKind::BadMagic: return "BadMagic";
    case MdetErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case MdetErrorKind::CorruptHeader: return "CorruptHeader";
    case MdetErrorKind::RangeViolation: return "RangeViolation";
    case MdetErrorKind::Io: return "Io";
    case MdetErrorKind::Invalid: return "Invalid";
  }
  return "?";
}

class MdetError : public std::runtime_error {
 public:
  MdetError(MdetErrorKind kind, std::uint64_t offset, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " at byte " + std::to_string(offset) + ": " + what),
        kind_(kind), offset_(offset) {}
  MdetErrorKind kind() const { return kind_; }
  std::uint64_t offset() const { return offset_; }

 private:
  MdetErrorKind kind_;
  std::uint64_t offset_;
};

enum class TensorRole { BnGamma, BnBeta, BnRunningMean, BnRunningVar, Weight, Bias, Activation, Image, Label };
enum class DType { F32, I32 };

inline std::string_view to_string(TensorRole r) {
  switch (r) {
    case TensorRole::BnGamma: return "bn_gamma";
    case TensorRole::BnBeta: return "bn_beta";
    case TensorRole::BnRunningMean: return "bn_running_mean";
    case TensorRole::BnRunningVar: return "bn_running_var";
    case TensorRole::Weight: return "weight";
    case TensorRole::Bias: return "bias";
    case TensorRole::Activation: return "activation";
    case TensorRole::Image: return "image";
    case TensorRole::Label: return "label";
  }
  return "?";
}

inline std::optional<TensorRole> parse_role(std::string_view s) {
  for (auto r : {TensorRole::BnGamma, TensorRole::BnBeta, TensorRole::BnRunningMean, TensorRole::BnRunningVar,
                 TensorRole::Weight, TensorRole::Bias, TensorRole::Activation, TensorRole::Image, TensorRole::Label})
    if (to_string(r) == s) return r;
  return std::nullopt;
}

inline std::string_view to_string(DType d) { return d == DType::F32 ? "f32" : "i32"; }

struct MdetTensor {
  std::string name;
  TensorRole role = TensorRole::Weight;
  std::int64_t layer_index = 0;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;  // i32 entries hold exact integers

  friend bool operator==(const MdetTensor&, const MdetTensor&) = default;
};

// Header metadata. Required keys are typed fields; any other keys (model
// architecture, class count, ...) ride along in `extra`.
struct MdetMetadata {
  std::string model_id;
  std::string dataset_id;
  double eps = kDefaultEps;
  double retain_alpha = 0.9;
  std::string creator = "mde";
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();

  friend bool operator==(const MdetMetadata&, const MdetMetadata&) = default;
};

struct MdetRecord {
  std::string kind;  // "model" | "trace" | "dataset"
  std::vector<MdetTensor> tensors;
  MdetMetadata metadata;

  friend bool operator==(const MdetRecord&, const MdetRecord&) = default;
};

// Location of one tensor as declared in a file header.
struct MdetEntry {
  std::string name;
  TensorRole role = TensorRole::Weight;
  std::int64_t layer_index = 0;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::uint64_t byte_offset = 0;  // relative to the payload start
  std::uint64_t byte_len = 0;
};

struct MdetHeader {
  std::string kind;
  std::vector<MdetEntry> entries;
  MdetMetadata metadata;
  std::uint64_t payload_start = 0;  // absolute file offset
  std::uint64_t payload_size = 0;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::uint64_t element_count(std::span<const std::uint64_t> shape) {
  std::uint64_t n = 1;
  for (std::uint64_t d : shape) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / 8 / d)
      throw std::overflow_error("shape product overflows");
    n *= d;
  }
  return n;
}

inline nlohmann::json metadata_json(const MdetMetadata& m) {
  nlohmann::json j = m.extra.is_object() ? m.extra : nlohmann::json::object();
  j["model_id"] = m.model_id;
  j["dataset_id"] = m.dataset_id;
  j["eps"] = m.eps;
  j["retain_alpha"] = m.retain_alpha;
  j["creator"] = m.creator;
  j["seed"] = m.seed;
  return j;
}

inline void check_bn_roles(const std::vector<std::pair<TensorRole, std::pair<std::int64_t, std::uint64_t>>>& bn,
                           std::uint64_t where) {
  // bn holds (role, (layer_index, channels)) for every bn_* entry.
  std::map<std::int64_t, std::map<TensorRole, std::uint64_t>> layers;
  for (const auto& [role, li] : bn) {
    auto& roles = layers[li.first];
    if (roles.count(role))
      throw MdetError(MdetErrorKind::CorruptHeader, where,
                      "BN layer " + std::to_string(li.first) + " repeats role " + std::string(to_string(role)));
    roles[role] = li.second;
  }
  for (const auto& [layer, roles] : layers) {
    if (roles.size() != 4)
      throw MdetError(MdetErrorKind::CorruptHeader, where,
                      "BN layer " + std::to_string(layer) + " lacks one of the four bn_* roles");
    const std::uint64_t c = roles.begin()->second;
    for (const auto& [r, ch] : roles)
      if (ch != c)
        throw MdetError(MdetErrorKind::CorruptHeader, where,
                        "BN layer " + std::to_string(layer) + " has inconsistent channel counts");
  }
}

// Strict field readers: JSON numbers of the wrong kind are rejected rather
// than converted.
inline std::uint64_t json_u64(const nlohmann::json& j) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(j.get<std::int64_t>());
  throw MdetError(MdetErrorKind::CorruptHeader, kMdetPreamble, "expected a non-negative integer, got " + j.dump());
}
inline std::int64_t json_i64(const nlohmann::json& j) {
  if (j.is_number_unsigned() && j.get<std::uint64_t>() > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
    throw MdetError(MdetErrorKind::CorruptHeader, kMdetPreamble, "integer out of range");
  if (j.is_number_integer()) return j.get<std::int64_t>();
  throw MdetError(MdetErrorKind::CorruptHeader, kMdetPreamble, "expected an integer, got " + j.dump());
}
inline double json_f64(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  throw MdetError(MdetErrorKind::CorruptHeader, kMdetPreamble, "expected a number, got " + j.dump());
}

}  // namespace detail

// Serializes a record to the exact MDET v1 byte layout.
inline std::string encode_mdet(const MdetRecord& rec) {
  if (rec.kind != "model" && rec.kind != "trace" && rec.kind != "dataset")
    throw MdetError(MdetErrorKind::Invalid, 0, "unknown record kind '" + rec.kind + "'");

  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::vector<std::pair<TensorRole, std::pair<std::int64_t, std::uint64_t>>> bn;
  for (const auto& t : rec.tensors) {
    const std::uint64_t n = detail::element_count(t.shape);
    if (n != t.values.size())
      throw MdetError(MdetErrorKind::Invalid, 0, "tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                                                     " values for shape product " + std::to_string(n));
    const std::uint64_t len = n * 4;
    entries.push_back({{"name", t.name},
                       {"role", std::string(to_string(t.role))},
                       {"layer_index", t.layer_index},
                       {"dtype", std::string(to_string(t.dtype))},
                       {"shape", t.shape},
                       {"byte_offset", offset},
                       {"byte_len", len}});
    if (t.role == TensorRole::BnGamma || t.role == TensorRole::BnBeta || t.role == TensorRole::BnRunningMean ||
        t.role == TensorRole::BnRunningVar)
      bn.push_back({t.role, {t.layer_index, n}});
    offset += len;
  }
  if (rec.kind == "model") {
    try {
      detail::check_bn_roles(bn, 0);
    } catch (const MdetError& e) {
      throw MdetError(MdetErrorKind::Invalid, 0, e.what());
    }
  }

  const nlohmann::json header = {{"kind", rec.kind}, {"entries", entries}, {"metadata", detail::metadata_json(rec.metadata)}};
  const std::string text = header.dump();

  std::string out(kMdetMagic, 4);
  detail::put_u32(out, kMdetVersion);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& t : rec.tensors)
    for (double v : t.values) {
      const std::uint32_t bits = t.dtype == DType::F32
                                     ? std::bit_cast<std::uint32_t>(static_cast<float>(v))
                                     : static_cast<std::uint32_t>(static_cast<std::int32_t>(v));
      detail::put_u32(out, bits);
    }
  return out;
}

inline void write_mdet(const MdetRecord& rec, const std::string& path) {
  const std::string bytes = encode_mdet(rec);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MdetError(MdetErrorKind::Io, 0, "cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw MdetError(MdetErrorKind::Io, 0, "write to '" + path + "' failed");
}

// Validates the preamble and header. `head` holds at least the preamble and
// header bytes (typically the whole file); `file_size` is the full file length
// so entry ranges can be checked without the payload in memory.
inline MdetHeader parse_mdet_header(std::span<const unsigned char> head, std::uint64_t file_size) {
  using K = MdetErrorKind;
  if (head.size() < 4 || std::memcmp(head.data(), kMdetMagic, 4) != 0)
    throw MdetError(K::BadMagic, 0, "missing MDET magic");
  if (head.size() < 8) throw MdetError(K::CorruptHeader, 4, "file ends inside the preamble");
  const std::uint32_t version = detail::get_u32(head.data() + 4);
  if (version != kMdetVersion)
    throw MdetError(K::UnsupportedVersion, 4, "version " + std::to_string(version));
  if (head.size() < kMdetPreamble) throw MdetError(K::CorruptHeader, 8, "file ends inside the preamble");
  const std::uint64_t header_len = detail::get_u64(head.data() + 8);
  if (header_len > file_size - kMdetPreamble || header_len > head.size() - kMdetPreamble)
    throw MdetError(K::CorruptHeader, 8,
                    "header length " + std::to_string(header_len) + " exceeds file size " + std::to_string(file_size));

  MdetHeader h;
  h.payload_start = kMdetPreamble + header_len;
  h.payload_size = file_size - h.payload_start;

  // The parser stops at a NUL, which would hide a header_len that runs into
  // the payload. Valid JSON text never holds a raw NUL.
  if (const void* nul = std::memchr(head.data() + kMdetPreamble, 0, header_len))
    throw MdetError(K::CorruptHeader, static_cast<std::uint64_t>(static_cast<const unsigned char*>(nul) - head.data()),
                    "NUL byte inside the header");

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(head.begin() + kMdetPreamble, head.begin() + static_cast<std::ptrdiff_t>(h.payload_start));
  } catch (const nlohmann::json::parse_error& e) {
    throw MdetError(K::CorruptHeader, kMdetPreamble + e.byte, std::string("header is not valid JSON: ") + e.what());
  }

  std::vector<std::pair<TensorRole, std::pair<std::int64_t, std::uint64_t>>> bn;
  try {
    if (!j.is_object()) throw MdetError(K::CorruptHeader, kMdetPreamble, "header is not an object");
    h.kind = j.at("kind").get<std::string>();
    if (h.kind != "model" && h.kind != "trace" && h.kind != "dataset")
      throw MdetError(K::CorruptHeader, kMdetPreamble, "unknown record kind '" + h.kind + "'");

    const auto& meta = j.at("metadata");
    if (!meta.is_object()) throw MdetError(K::CorruptHeader, kMdetPreamble, "metadata is not an object");
    h.metadata.model_id = meta.at("model_id").get<std::string>();
    h.metadata.dataset_id = meta.at("dataset_id").get<std::string>();
    h.metadata.eps = detail::json_f64(meta.at("eps"));
    h.metadata.retain_alpha = detail::json_f64(meta.at("retain_alpha"));
    h.metadata.creator = meta.at("creator").get<std::string>();
    h.metadata.seed = detail::json_u64(meta.at("seed"));
    h.metadata.extra = meta;
    for (const char* key : {"model_id", "dataset_id", "eps", "retain_alpha", "creator", "seed"})
      h.metadata.extra.erase(key);

    const auto& entries = j.at("entries");
    if (!entries.is_array()) throw MdetError(K::CorruptHeader, kMdetPreamble, "entries is not an array");
    std::uint64_t prev_end = 0;
    for (const auto& e : entries) {
      if (!e.is_object()) throw MdetError(K::CorruptHeader, kMdetPreamble, "entry is not an object");
      MdetEntry en;
      en.name = e.at("name").get<std::string>();
      const auto role = parse_role(e.at("role").get<std::string>());
      if (!role) throw MdetError(K::CorruptHeader, kMdetPreamble, "entry '" + en.name + "' has an unknown role");
      en.role = *role;
      en.layer_index = detail::json_i64(e.at("layer_index"));
      const auto dt = e.at("dtype").get<std::string>();
      if (dt == "f32") en.dtype = DType::F32;
      else if (dt == "i32") en.dtype = DType::I32;
      else throw MdetError(K::CorruptHeader, kMdetPreamble, "entry '" + en.name + "' has unknown dtype " + dt);
      const auto& shape = e.at("shape");
      if (!shape.is_array()) throw MdetError(K::CorruptHeader, kMdetPreamble, "entry '" + en.name + "' shape is not a list");
      for (const auto& d : shape) en.shape.push_back(detail::json_u64(d));
      en.byte_offset = detail::json_u64(e.at("byte_offset"));
      en.byte_len = detail::json_u64(e.at("byte_len"));

      const std::uint64_t abs = h.payload_start + en.byte_offset;
      std::uint64_t n = 0;
      try {
        n = detail::element_count(en.shape);
      } catch (const std::overflow_error&) {
        throw MdetError(K::RangeViolation, abs, "entry '" + en.name + "' shape overflows");
      }
      if (en.byte_len != n * 4)
        throw MdetError(K::RangeViolation, abs, "entry '" + en.name + "' byte_len does not match its shape");
      if (en.byte_offset < prev_end)
        throw MdetError(K::RangeViolation, abs, "entry '" + en.name + "' overlaps or precedes the previous entry");
      if (en.byte_offset > h.payload_size || en.byte_len > h.payload_size - en.byte_offset)
        throw MdetError(K::RangeViolation, abs, "entry '" + en.name + "' extends past the end of the payload");
      prev_end = en.byte_offset + en.byte_len;
      if (en.role == TensorRole::BnGamma || en.role == TensorRole::BnBeta || en.role == TensorRole::BnRunningMean ||
          en.role == TensorRole::BnRunningVar)
        bn.push_back({en.role, {en.layer_index, n}});
      h.entries.push_back(std::move(en));
    }
  } catch (const nlohmann::json::exception& e) {
    throw MdetError(K::CorruptHeader, kMdetPreamble, std::string("malformed header field: ") + e.what());
  }
  if (h.kind == "model") detail::check_bn_roles(bn, kMdetPreamble);
  return h;
}

inline MdetHeader parse_mdet_header(std::span<const unsigned char> bytes) {
  return parse_mdet_header(bytes, bytes.size());
}

namespace detail {
// Widens the e.byte_len bytes at p; `where` is the absolute offset for errors.
inline MdetTensor decode_tensor(const unsigned char* p, const MdetEntry& e, std::uint64_t where) {
  MdetTensor t{e.name, e.role, e.layer_index, e.dtype, e.shape, {}};
  const std::uint64_t n = e.byte_len / 4;
  t.values.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint32_t bits = get_u32(p + 4 * i);
    t.values[i] = e.dtype == DType::F32 ? static_cast<double>(std::bit_cast<float>(bits))
                                        : static_cast<double>(static_cast<std::int32_t>(bits));
  }
  if (e.role == TensorRole::BnRunningVar)
    for (double v : t.values)
      if (!(v >= 0.0))
        throw MdetError(MdetErrorKind::RangeViolation, where,
                        "entry '" + e.name + "' holds a negative or NaN running variance");
  return t;
}
}  // namespace detail

inline MdetTensor decode_entry(std::span<const unsigned char> bytes, const MdetHeader& h, const MdetEntry& e) {
  const std::uint64_t at = h.payload_start + e.byte_offset;
  return detail::decode_tensor(bytes.data() + at, e, at);
}

inline MdetRecord decode_mdet(std::span<const unsigned char> bytes) {
  const MdetHeader h = parse_mdet_header(bytes);
  MdetRecord rec{h.kind, {}, h.metadata};
  for (const auto& e : h.entries) rec.tensors.push_back(decode_entry(bytes, h, e));
  return rec;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MdetError(MdetErrorKind::Io, 0, "cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f), {});
}

inline MdetRecord read_mdet(const std::string& path) { return decode_mdet(read_file_bytes(path)); }

// Streams one entry at a time from disk: the header is parsed up front and
// each tensor is read on demand.
class MdetReader {
 public:
  explicit MdetReader(const std::string& path) : file_(path, std::ios::binary) {
    if (!file_) throw MdetError(MdetErrorKind::Io, 0, "cannot open '" + path + "'");
    file_.seekg(0, std::ios::end);
    const auto size = static_cast<std::uint64_t>(file_.tellg());
    file_.seekg(0);
    std::vector<unsigned char> head(std::min<std::uint64_t>(size, kMdetPreamble));
    file_.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    if (head.size() == kMdetPreamble) {
      const std::uint64_t header_len = detail::get_u64(head.data() + 8);
      if (header_len <= size - kMdetPreamble) {
        head.resize(kMdetPreamble + header_len);
        file_.read(reinterpret_cast<char*>(head.data() + kMdetPreamble), static_cast<std::streamsize>(header_len));
      }
    }
    header_ = parse_mdet_header(head, size);
  }

  const MdetHeader& header() const { return header_; }

  MdetTensor read(std::size_t entry_index) {
    const MdetEntry& e = header_.entries.at(entry_index);
    std::vector<unsigned char> buf(e.byte_len);
    file_.clear();
    file_.seekg(static_cast<std::streamoff>(header_.payload_start + e.byte_offset));
    file_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    const std::uint64_t at = header_.payload_start + e.byte_offset;
    if (!file_) throw MdetError(MdetErrorKind::Io, at, "short read");
    return detail::decode_tensor(buf.data(), e, at);
  }

 private:
  std::ifstream file_;
  MdetHeader header_;
};

}  // namespace mde
