#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/encoder/model.hpp"
#include "moembed/error.hpp"

namespace moembed {

// Layout: 8-byte magic, u64 little-endian header length, JSON header, then
// the raw little-endian float64 payload. Header offsets are byte offsets
// into the payload.
inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'E', 'M', 'B', 'E', 'D', '1'};

struct Checkpoint {
  EncoderModel model;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> extra_tensors;  // e.g. optimizer moments
};

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw InputError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64_le(std::ostream& os, std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 8));
  } else {
    for (double d : values) write_u64_le(os, std::bit_cast<std::uint64_t>(d));
  }
}

inline std::vector<double> decode_f64_le(const std::vector<char>& payload, std::size_t offset, std::size_t count) {
  if (offset + count * 8 > payload.size()) throw InputError("checkpoint tensor exceeds payload");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[offset + i * 8 + b])) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const EncoderModel& model,
                             const nlohmann::json& metadata = nlohmann::json::object(),
                             const std::vector<NamedTensor>& extra = {}) {
  nlohmann::json header;
  header["format"] = "moembed-checkpoint";
  header["version"] = 1;
  header["config"] = model.config;
  header["tokenizer"] = model.tokenizer.tokens();
  header["metadata"] = metadata;
  std::uint64_t offset = 0;
  auto describe = [&offset](const std::vector<NamedTensor>& list) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [name, t] : list) {
      arr.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
      offset += t.numel() * 8;
    }
    return arr;
  };
  const auto params = model.named_parameters();
  header["tensors"] = describe(params);
  header["extra_tensors"] = describe(extra);
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, 8);
  detail::write_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params) detail::write_f64_le(os, t.data());
  for (const auto& [name, t] : extra) detail::write_f64_le(os, t.data());
  if (!os) throw InputError("failed writing checkpoint " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw InputError("not a moembed checkpoint: " + path.string());
  }
  const auto header_len = detail::read_u64_le(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw InputError("checkpoint header truncated");
  const auto header = nlohmann::json::parse(text);
  std::vector<char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  const auto config = header.at("config").get<EncoderConfig>();
  Tokenizer tok;
  if (!header.at("tokenizer").empty()) tok = header.at("tokenizer").get<Tokenizer>();
  ck.model = init_encoder(config, 0, std::move(tok));
  ck.metadata = header.value("metadata", nlohmann::json::object());

  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : header.at("tensors")) entries[e.at("name").get<std::string>()] = e;
  for (auto& [name, t] : ck.model.named_parameters()) {
    auto it = entries.find(name);
    if (it == entries.end()) throw InputError("checkpoint is missing tensor '" + name + "'");
    if (it->second.at("shape").get<Shape>() != t.shape()) {
      throw InputError("checkpoint tensor '" + name + "' has the wrong shape");
    }
    auto values = detail::decode_f64_le(payload, it->second.at("offset").get<std::size_t>(), t.numel());
    Tensor h = t;
    std::copy(values.begin(), values.end(), h.mutable_data().begin());
    entries.erase(it);
  }
  if (!entries.empty()) throw InputError("checkpoint has unexpected tensor '" + entries.begin()->first + "'");
  for (const auto& e : header.value("extra_tensors", nlohmann::json::array())) {
    auto shape = e.at("shape").get<Shape>();
    auto values = detail::decode_f64_le(payload, e.at("offset").get<std::size_t>(), shape_numel(shape));
    ck.extra_tensors.emplace_back(e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values)));
  }
  return ck;
}

}  // namespace moembed
