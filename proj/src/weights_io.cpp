// SPDX-License-Identifier: Apache-2.0
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "attrigraph/error.hpp"
#include "attrigraph/model.hpp"

namespace attrigraph {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'A', 'T', 'G', 'W'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, double value) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(value)));
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  std::size_t at = 0;
  while (at < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - at, 1u << 30);
    crc = crc32(crc, bytes.data() + at, static_cast<uInt>(chunk));
    at += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

json config_json(const ModelBundle& model) {
  const ModelConfig& c = model.config();
  json cfg = {{"num_layers", c.num_layers},
              {"hidden_dim", c.hidden_dim},
              {"num_heads", c.num_heads},
              {"vocab_size", c.vocab_size},
              {"ffn_dim", c.ffn_dim},
              {"norm_epsilon", c.norm_epsilon},
              {"rope_base", c.rope_base},
              {"tied_unembedding", c.tied_unembedding},
              {"special_token_ids", model.special_token_ids()}};
  return cfg;
}

std::vector<std::uint8_t> payload_of(const ModelBundle& model, json* manifest) {
  std::vector<std::uint8_t> payload;
  for (const auto& [name, tensor] : model.named_tensors()) {
    if (manifest)
      manifest->push_back(
          {{"name", name}, {"dtype", "f32"}, {"shape", tensor->shape()}, {"offset", payload.size()}});
    for (double v : tensor->data()) put_f32(payload, v);
  }
  return payload;
}

}  // namespace

std::uint32_t model_checksum(const ModelBundle& model) {
  return crc32_of(payload_of(model, nullptr));
}

std::vector<std::uint8_t> serialize_model(const ModelBundle& model) {
  json manifest = json::array();
  const std::vector<std::uint8_t> payload = payload_of(model, &manifest);
  const json header = {{"config", config_json(model)}, {"tensors", manifest}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kWeightFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc32_of(payload));
  return out;
}

void save_model(const ModelBundle& model, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize_model(model);
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::io, "cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), ErrorKind::io, "write to '" + path.string() + "' failed");
}

ModelPtr parse_model(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 12, ErrorKind::malformed, "weight file shorter than its header");
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::bad_magic,
          "not an ATGW weight file");
  const std::uint32_t version = get_u32(bytes, 4);
  require(version == kWeightFormatVersion, ErrorKind::bad_version,
          "unsupported weight format version " + std::to_string(version));
  const std::size_t header_len = get_u32(bytes, 8);
  require(bytes.size() >= 12 + header_len + 4, ErrorKind::malformed,
          "weight file truncated inside its config block");

  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    fail(ErrorKind::malformed, std::string("config block is not valid JSON: ") + e.what());
  }

  ModelConfig config;
  std::set<TokenId> special;
  try {
    const json& c = header.at("config");
    config.num_layers = c.at("num_layers").get<std::size_t>();
    config.hidden_dim = c.at("hidden_dim").get<std::size_t>();
    config.num_heads = c.at("num_heads").get<std::size_t>();
    config.vocab_size = c.at("vocab_size").get<std::size_t>();
    config.norm_epsilon = c.at("norm_epsilon").get<double>();
    config.rope_base = c.at("rope_base").get<double>();
    config.tied_unembedding = c.at("tied_unembedding").get<bool>();
    special = c.at("special_token_ids").get<std::set<TokenId>>();
    if (c.contains("ffn_dim")) {
      config.ffn_dim = c.at("ffn_dim").get<std::size_t>();
    } else {
      for (const json& t : header.at("tensors"))
        if (t.at("name") == "layer.0.mlp.gate") config.ffn_dim = t.at("shape").at(1).get<std::size_t>();
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::malformed, std::string("bad model config: ") + e.what());
  }

  const std::size_t payload_begin = 12 + header_len;
  const std::size_t payload_size = bytes.size() - payload_begin - 4;
  const auto payload = bytes.subspan(payload_begin, payload_size);

  std::map<std::string, Tensor> tensors;
  std::size_t expected_offset = 0;
  try {
    for (const json& t : header.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      require(t.at("dtype").get<std::string>() == "f32", ErrorKind::malformed,
              "tensor '" + name + "' has unsupported dtype");
      const Shape shape = t.at("shape").get<Shape>();
      const std::size_t offset = t.at("offset").get<std::size_t>();
      const std::size_t count = shape_size(shape);
      require(offset == expected_offset, ErrorKind::shape_mismatch,
              "tensor '" + name + "' offset does not follow the previous tensor");
      require(offset + 4 * count <= payload_size, ErrorKind::shape_mismatch,
              "tensor '" + name + "' " + shape_string(shape) + " runs past the payload");
      std::vector<double> data(count);
      for (std::size_t i = 0; i < count; ++i)
        data[i] = static_cast<double>(std::bit_cast<float>(get_u32(payload, offset + 4 * i)));
      require(tensors.emplace(name, Tensor(shape, std::move(data))).second, ErrorKind::malformed,
              "duplicate tensor '" + name + "'");
      expected_offset = offset + 4 * count;
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::malformed, std::string("bad tensor manifest: ") + e.what());
  }
  require(expected_offset == payload_size, ErrorKind::shape_mismatch,
          "payload holds " + std::to_string(payload_size) + " bytes, manifest describes " +
              std::to_string(expected_offset));
  const std::uint32_t stored = get_u32(bytes, bytes.size() - 4);
  require(stored == crc32_of(payload), ErrorKind::checksum, "weight payload CRC32 mismatch");

  return std::make_shared<const ModelBundle>(config, std::move(tensors), std::move(special));
}

ModelPtr load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::io, "cannot open model file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return parse_model(bytes);
}

}  // namespace attrigraph
