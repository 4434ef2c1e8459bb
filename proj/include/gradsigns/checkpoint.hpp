#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradsigns/error.hpp"
#include "gradsigns/model.hpp"

namespace gradsigns {

// Layout:
//   "GSCK" | u32 version | u64 header_len | JSON header | f64 payloads | u32 crc32
// All integers and floats little-endian. The CRC covers every preceding byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'G', 'S', 'C', 'K'};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& l : c.layers) {
    nlohmann::json j{{"kind", layer_kind_name(l.kind)}};
    if (l.kind == LayerKind::Conv) {
      j["kernel"] = l.size;
      j["filters"] = l.filters;
      j["same_padding"] = l.same_padding;
    } else if (l.kind == LayerKind::Dense) {
      j["units"] = l.size;
    }
    layers.push_back(std::move(j));
  }
  return {{"input_shape", {c.height, c.width, c.channels}},
          {"layers", std::move(layers)},
          {"num_classes", c.num_classes},
          {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw value_error("input_shape must have 3 entries");
    c.height = shape[0];
    c.width = shape[1];
    c.channels = shape[2];
    c.num_classes = j.at("num_classes").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& l : j.at("layers")) {
      LayerSpec s;
      s.kind = layer_kind_from_name(l.at("kind").get<std::string>());
      if (s.kind == LayerKind::Conv) {
        s.size = l.at("kernel").get<std::size_t>();
        s.filters = l.at("filters").get<std::size_t>();
        s.same_padding = l.value("same_padding", false);
      } else if (s.kind == LayerKind::Dense) {
        s.size = l.at("units").get<std::size_t>();
      }
      c.layers.push_back(s);
    }
    parameter_layout(c);  // validates
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("bad model config: ") + e.what());
  }
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t{static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])} << (8 * i);
  return v;
}

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t len) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t done = 0;
  while (done < len) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(len - done, 1u << 30));
    crc = crc32(crc, p + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

// Serializes the model to bytes; identical models give identical bytes.
inline std::string checkpoint_bytes(const Model& model) {
  std::vector<const Tensor*> tensors;
  nlohmann::json dir = nlohmann::json::array();
  std::size_t offset = 0;
  auto add = [&](const std::string& name, const std::string& role, const Tensor& t) {
    dir.push_back({{"name", name}, {"role", role}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(double);
    tensors.push_back(&t);
  };
  for (const auto& p : model.params()) add(p.name, "parameter", p.value);
  for (std::size_t i = 0; i < model.masks().size(); ++i) add(model.params()[i].name, "mask", model.masks()[i]);

  const auto& md = model.metadata();
  const nlohmann::json header{{"config", config_to_json(model.config())},
                              {"metadata",
                               {{"epochs_run", md.epochs_run},
                                {"train_accuracy", md.train_accuracy},
                                {"val_accuracy", md.val_accuracy}}},
                              {"tensors", std::move(dir)},
                              {"payload_bytes", offset}};
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset + 4);
  for (const Tensor* t : tensors) {
    for (const double v : t->data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  detail::put_u32(out, detail::crc32_of(out, out.size()));
  return out;
}

inline Model model_from_checkpoint_bytes(const std::string& bytes) {
  if (bytes.size() < 20) throw Error("truncated", "checkpoint shorter than its fixed header");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw Error("format", "not a checkpoint (bad magic)");
  const auto stored_crc = static_cast<std::uint32_t>(detail::get_le(bytes, bytes.size() - 4, 4));
  if (stored_crc != detail::crc32_of(bytes, bytes.size() - 4)) throw Error("checksum", "checkpoint checksum mismatch");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw Error("version", "checkpoint format version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  }
  const std::uint64_t header_len = detail::get_le(bytes, 8, 8);
  if (header_len > bytes.size() - 20) throw Error("truncated", "checkpoint header length exceeds file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("bad checkpoint header: ") + e.what());
  }

  const std::size_t payload_at = 16 + header_len;
  const std::size_t payload_len = bytes.size() - 4 - payload_at;
  try {
    if (header.at("payload_bytes").get<std::size_t>() != payload_len) throw Error("truncated", "checkpoint payload length mismatch");
    const ModelConfig cfg = config_from_json(header.at("config"));
    std::vector<Parameter> params;
    std::vector<Tensor> masks;
    for (const auto& entry : header.at("tensors")) {
      const Shape shape = entry.at("shape").get<Shape>();
      const std::size_t off = entry.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      if (off % sizeof(double) != 0 || off > payload_len || n > (payload_len - off) / sizeof(double)) {
        throw Error("format", "tensor directory points outside payload");
      }
      Tensor t(shape);
      auto d = t.data();
      for (std::size_t i = 0; i < n; ++i) d[i] = std::bit_cast<double>(detail::get_le(bytes, payload_at + off + 8 * i, 8));
      const std::string role = entry.at("role").get<std::string>();
      if (role == "parameter") {
        params.push_back({entry.at("name").get<std::string>(), std::move(t), false});
      } else if (role == "mask") {
        masks.push_back(std::move(t));
      } else {
        throw Error("format", "unknown tensor role '" + role + "'");
      }
    }
    Model m(cfg, std::move(params));
    if (!masks.empty()) {
      if (masks.size() != m.params().size()) throw Error("format", "mask count does not match parameter count");
      for (std::size_t i = 0; i < masks.size(); ++i) {
        if (masks[i].shape() != m.params()[i].value.shape()) throw Error("format", "mask shape mismatch");
      }
      m.masks() = std::move(masks);
    }
    const auto& md = header.at("metadata");
    m.metadata().epochs_run = md.at("epochs_run").get<std::size_t>();
    m.metadata().train_accuracy = md.at("train_accuracy").get<double>();
    m.metadata().val_accuracy = md.at("val_accuracy").get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("bad checkpoint header: ") + e.what());
  }
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("io", "cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("io", "write failed for " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io", "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return model_from_checkpoint_bytes(bytes);
}

}  // namespace gradsigns
