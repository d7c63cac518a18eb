#pragma once

// "LPM1" container:
//   bytes 0..3   magic "LPM1"
//   bytes 4..7   header length n, uint32 little-endian
//   next n bytes JSON header {"format-version", "config", "tensors": [{"name", "shape"}], "meta"}
//   then one little-endian float32 payload per header tensor, in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lpm/model.hpp"

namespace lpm {

inline constexpr char kCheckpointMagic[4] = {'L', 'P', 'M', '1'};
inline constexpr int kCheckpointFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Container {
  nlohmann::json config;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

}  // namespace detail

/// Raw float32 payload section only; two containers with equal weights share it byte for byte.
inline std::string encode_payload(const std::vector<NamedTensor>& tensors) {
  std::string out;
  for (const auto& t : tensors)
    for (float v : t.value.values()) detail::put_f32(out, v);
  return out;
}

inline std::string encode_container(const Container& c) {
  nlohmann::json header{{"format-version", kCheckpointFormatVersion}, {"config", c.config}, {"meta", c.meta}};
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : c.tensors) header["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}});
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  out += encode_payload(c.tensors);
  return out;
}

inline Container decode_container(const std::string& bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& m) { throw Error("checkpoint " + origin + ": " + m); };
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) fail("missing LPM1 magic");
  const std::size_t hlen = detail::get_u32(bytes, 4);
  if (bytes.size() < 8 + hlen) fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed header: ") + e.what());
  }
  if (header.value("format-version", 0) != kCheckpointFormatVersion) fail("unsupported format version");
  Container c;
  c.config = header.value("config", nlohmann::json::object());
  c.meta = header.value("meta", nlohmann::json::object());
  std::size_t at = 8 + hlen;
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    Tensor<float> t(shape);
    if (bytes.size() < at + 4 * t.size()) fail("truncated payload for tensor '" + entry.at("name").get<std::string>() + "'");
    for (std::size_t i = 0; i < t.size(); ++i, at += 4) t[i] = std::bit_cast<float>(detail::get_u32(bytes, at));
    c.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
  }
  if (at != bytes.size()) fail("trailing bytes after payload");
  return c;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + tmp + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::vector<NamedTensor> named_tensors(const ModelParams<float>& p) {
  std::vector<NamedTensor> out;
  p.visit([&](const std::string& name, const Tensor<float>& t) { out.push_back({name, t}); });
  return out;
}

inline Container model_container(const ModelParams<float>& p, nlohmann::json meta = nlohmann::json::object()) {
  return {nlohmann::json(p.config), std::move(meta), named_tensors(p)};
}

/// Rebuilds parameters from a container, checking names and shapes against the config's layout.
inline ModelParams<float> params_from_container(const Container& c, const std::string& origin = "<memory>") {
  ModelParams<float> p = ModelParams<float>::zeros(c.config.get<ModelConfig>());
  std::size_t k = 0;
  p.visit([&](const std::string& name, Tensor<float>& t) {
    if (k >= c.tensors.size()) throw Error("checkpoint " + origin + ": missing tensor '" + name + "'");
    const auto& src = c.tensors[k++];
    if (src.name != name || src.value.shape() != t.shape()) {
      throw Error("checkpoint " + origin + ": tensor '" + src.name + "' " + to_string(src.value.shape()) +
                  " does not match expected '" + name + "' " + to_string(t.shape()));
    }
    t = src.value;
  });
  if (k != c.tensors.size()) throw Error("checkpoint " + origin + ": unexpected extra tensors");
  return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& p,
                            nlohmann::json meta = nlohmann::json::object()) {
  write_file(path, encode_container(model_container(p, std::move(meta))));
}

inline ModelParams<float> load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta = nullptr) {
  const auto c = decode_container(read_file(path), path.string());
  if (meta) *meta = c.meta;
  return params_from_container(c, path.string());
}

}  // namespace lpm
