#pragma once

// Binary checkpoint container.
//
// Layout (all integers little-endian, reals as IEEE-754 binary64 bit
// patterns in little-endian byte order):
//   magic "GOVACKPT" | u32 format_version | u32 header_len | header JSON
//   (model config + vocabulary) | i64 step_count | 4 x u64 rng_state |
//   u32 tensor_count | per tensor: u32 name_len, name, u32 rows, u32 cols,
//   rows*cols reals row-major | u64 FNV-1a checksum of all preceding bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gova/dataworld.hpp"
#include "gova/model.hpp"

namespace gova {

inline constexpr char kCheckpointMagic[8] = {'G', 'O', 'V', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> vocab;
  Parameters params;
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["cross_blocks"] = c.cross_blocks;
  j["object_blocks"] = c.object_blocks;
  j["text_blocks"] = c.text_blocks;
  j["ffn_dim"] = c.ffn_dim;
  j["n_queries"] = c.n_queries;
  j["max_text_len"] = c.max_text_len;
  j["patch_size"] = c.patch_size;
  j["image_width"] = c.image_width;
  j["image_height"] = c.image_height;
  j["vocab_size"] = c.vocab_size;
  j["alignment_dim"] = c.alignment_dim;
  j["temperature"] = c.temperature;
  j["variant"] = std::string(variant_name(c.variant));
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.cross_blocks = j.at("cross_blocks");
  c.object_blocks = j.at("object_blocks");
  c.text_blocks = j.at("text_blocks");
  c.ffn_dim = j.at("ffn_dim");
  c.n_queries = j.at("n_queries");
  c.max_text_len = j.at("max_text_len");
  c.patch_size = j.at("patch_size");
  c.image_width = j.at("image_width");
  c.image_height = j.at("image_height");
  c.vocab_size = j.at("vocab_size");
  c.alignment_dim = j.at("alignment_dim");
  c.temperature = j.at("temperature");
  c.variant = parse_variant(j.at("variant").get<std::string>());
  return c;
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<std::uint8_t>(bytes[i]);
    h *= 0x100000001b3ull;
  }
  return h;
}

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void real(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::string out;
};

class Reader {
 public:
  Reader(const std::string& d, std::size_t end) : data(d), limit(end) {}
  void need(std::size_t n) {
    if (pos + n > limit) fail(ErrorKind::kCheckpoint, "checkpoint truncated");
  }
  template <class U>
  U uint() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data[pos + i])) << (8 * i);
    pos += sizeof(U);
    return static_cast<U>(v);
  }
  double real() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data.substr(pos, n);
    pos += n;
    return s;
  }
  std::string str() { return bytes(uint<std::uint32_t>()); }
  const std::string& data;
  std::size_t limit;
  std::size_t pos = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  detail::Writer w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.uint(kCheckpointVersion);
  nlohmann::ordered_json header;
  header["model"] = to_json(ck.config);
  header["vocab"] = ck.vocab;
  w.str(header.dump());
  w.uint(static_cast<std::uint64_t>(ck.params.step_count));
  for (std::uint64_t s : ck.params.rng_state) w.uint(s);
  w.uint(static_cast<std::uint32_t>(ck.params.tensors.size()));
  for (const auto& [name, m] : ck.params.tensors) {
    w.str(name);
    w.uint(static_cast<std::uint32_t>(m.rows()));
    w.uint(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.real(m.data()[i]);
  }
  w.uint(detail::fnv1a(w.out, w.out.size()));
  return w.out;
}

/// Decodes and verifies a checkpoint. When `expected` is given, the stored
/// model config must equal it.
inline Checkpoint decode_checkpoint(const std::string& bytes, const std::optional<ModelConfig>& expected = std::nullopt) {
  if (bytes.size() < sizeof kCheckpointMagic + 12) fail(ErrorKind::kCheckpoint, "checkpoint truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    fail(ErrorKind::kCheckpoint, "not a checkpoint (bad magic)");
  const std::size_t body = bytes.size() - 8;
  detail::Reader tail(bytes, bytes.size());
  tail.pos = body;
  if (tail.uint<std::uint64_t>() != detail::fnv1a(bytes, body)) fail(ErrorKind::kCheckpoint, "checksum mismatch");

  detail::Reader r(bytes, body);
  r.pos = sizeof kCheckpointMagic;
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion)
    fail(ErrorKind::kCheckpoint, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  try {
    const nlohmann::json header = nlohmann::json::parse(r.str());
    ck.config = model_config_from_json(header.at("model"));
    ck.vocab = header.at("vocab").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCheckpoint, std::string("bad checkpoint header: ") + e.what());
  }
  if (expected && !(*expected == ck.config))
    fail(ErrorKind::kCheckpoint, "checkpoint model config does not match (version " + std::to_string(version) + ")");
  ck.params.step_count = static_cast<std::int64_t>(r.uint<std::uint64_t>());
  for (auto& s : ck.params.rng_state) s = r.uint<std::uint64_t>();
  const auto n = r.uint<std::uint32_t>();
  for (std::uint32_t t = 0; t < n; ++t) {
    std::string name = r.str();
    const auto rows = r.uint<std::uint32_t>(), cols = r.uint<std::uint32_t>();
    r.need(static_cast<std::size_t>(rows) * cols * 8);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.real();
    ck.params.tensors.emplace(std::move(name), std::move(m));
  }
  if (r.pos != body) fail(ErrorKind::kCheckpoint, "trailing bytes in checkpoint");
  const Parameters fresh = init_parameters(ck.config, 0);
  for (const auto& [k, m] : fresh.tensors) {
    auto it = ck.params.tensors.find(k);
    if (it == ck.params.tensors.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols())
      fail(ErrorKind::kCheckpoint, "checkpoint tensor '" + k + "' missing or misshapen");
  }
  if (fresh.tensors.size() != ck.params.tensors.size()) fail(ErrorKind::kCheckpoint, "checkpoint has unexpected tensors");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  atomic_write(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt) {
  return decode_checkpoint(read_file(path), expected);
}

}  // namespace gova
