#pragma once

// Checkpoint format: magic "BAAF", format version (u32 LE), tensor count,
// then per tensor: name length + UTF-8 name, rank, extents, raw 32-bit LE
// values. The model configuration rides along as reserved "config.*"
// tensors so a checkpoint is self-contained.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "baaf/common.hpp"
#include "baaf/model.hpp"
#include "baaf/tensor.hpp"

namespace baaf {

namespace ckpt_detail {

constexpr char kMagic[4] = {'B', 'A', 'A', 'F'};
constexpr std::uint32_t kVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

inline void write_tensor(std::ostream& os, const std::string& name, const Shape& shape,
                         const std::vector<float>& data) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
}

struct RawTensor {
  Shape shape;
  std::vector<float> data;
};

inline std::pair<std::string, RawTensor> read_tensor(std::istream& is) {
  const std::uint32_t name_len = read_u32(is);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  const std::uint32_t rank = read_u32(is);
  RawTensor t;
  std::size_t total = 1;
  for (std::uint32_t r = 0; r < rank; ++r) {
    const std::uint32_t d = read_u32(is);
    t.shape.push_back(static_cast<Index>(d));
    total *= d;
  }
  t.data.resize(total);
  is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(total * 4));
  if (!is) throw IoError("checkpoint: truncated tensor '" + name + "'");
  return {name, std::move(t)};
}

inline std::vector<float> to_floats(const std::vector<int>& v) {
  std::vector<float> out;
  for (int x : v) out.push_back(static_cast<float>(x));
  return out;
}

/// The architecture description, flattened to named float tensors.
inline std::vector<std::pair<std::string, RawTensor>> encode_config(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, RawTensor>> out;
  auto put = [&out](const std::string& name, std::vector<float> data) {
    RawTensor t;
    t.shape = {static_cast<Index>(data.size())};
    t.data = std::move(data);
    out.emplace_back(name, std::move(t));
  };
  std::vector<float> ratios, dims;
  for (const LevelSpec& l : cfg.levels) {
    ratios.push_back(static_cast<float>(l.ratio));
    dims.push_back(static_cast<float>(l.dim));
  }
  put("config.levels.ratio", ratios);
  put("config.levels.dim", dims);
  put("config.k", {static_cast<float>(cfg.k)});
  put("config.input_dim", {static_cast<float>(cfg.input_dim)});
  put("config.extractor_dim", {static_cast<float>(cfg.extractor_dim)});
  put("config.decode_dim", {static_cast<float>(cfg.decode_dim)});
  put("config.head_dims", to_floats(cfg.head_dims));
  put("config.num_classes", {static_cast<float>(cfg.num_classes)});
  put("config.dropout", {cfg.dropout});
  put("config.aug_loss_weights", cfg.aug_loss_weights);
  put("config.aug_loss_mean", {cfg.aug_loss_mean ? 1.0f : 0.0f});
  put("config.variant",
      {static_cast<float>(static_cast<int>(cfg.variant.offset_order)),
       cfg.variant.geometric_aug_loss ? 1.0f : 0.0f, cfg.variant.semantic_aug_loss ? 1.0f : 0.0f,
       static_cast<float>(static_cast<int>(cfg.variant.aggregation)),
       static_cast<float>(static_cast<int>(cfg.variant.fusion)),
       static_cast<float>(static_cast<int>(cfg.variant.sampler)),
       static_cast<float>(cfg.variant.knn_dilation), cfg.variant.equal_loss_weights ? 1.0f : 0.0f});
  return out;
}

inline ModelConfig decode_config(const std::map<std::string, RawTensor>& tensors) {
  auto get = [&tensors](const std::string& name) -> const std::vector<float>& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("checkpoint: missing '" + name + "'");
    return it->second.data;
  };
  ModelConfig cfg;
  const std::vector<float>& ratios = get("config.levels.ratio");
  const std::vector<float>& dims = get("config.levels.dim");
  if (ratios.size() != dims.size()) throw IoError("checkpoint: malformed level description");
  cfg.levels.clear();
  for (std::size_t i = 0; i < ratios.size(); ++i)
    cfg.levels.push_back(LevelSpec{static_cast<int>(ratios[i]), static_cast<int>(dims[i])});
  cfg.k = static_cast<int>(get("config.k")[0]);
  cfg.input_dim = static_cast<int>(get("config.input_dim")[0]);
  cfg.extractor_dim = static_cast<int>(get("config.extractor_dim")[0]);
  cfg.decode_dim = static_cast<int>(get("config.decode_dim")[0]);
  cfg.head_dims.clear();
  for (float v : get("config.head_dims")) cfg.head_dims.push_back(static_cast<int>(v));
  cfg.num_classes = static_cast<int>(get("config.num_classes")[0]);
  cfg.dropout = get("config.dropout")[0];
  cfg.aug_loss_weights = get("config.aug_loss_weights");
  cfg.aug_loss_mean = get("config.aug_loss_mean")[0] != 0.0f;
  const std::vector<float>& v = get("config.variant");
  if (v.size() != 8) throw IoError("checkpoint: malformed variant description");
  cfg.variant.offset_order = static_cast<OffsetOrder>(static_cast<int>(v[0]));
  cfg.variant.geometric_aug_loss = v[1] != 0.0f;
  cfg.variant.semantic_aug_loss = v[2] != 0.0f;
  cfg.variant.aggregation = static_cast<Aggregation>(static_cast<int>(v[3]));
  cfg.variant.fusion = static_cast<FusionMode>(static_cast<int>(v[4]));
  cfg.variant.sampler = static_cast<SamplerKind>(static_cast<int>(v[5]));
  cfg.variant.knn_dilation = static_cast<int>(v[6]);
  cfg.variant.equal_loss_weights = v[7] != 0.0f;
  return cfg;
}

}  // namespace ckpt_detail

inline void save_checkpoint(std::ostream& os, const Network& net) {
  const auto config_tensors = ckpt_detail::encode_config(net.config());
  const auto& entries = net.params().entries();
  os.write(ckpt_detail::kMagic, 4);
  ckpt_detail::write_u32(os, ckpt_detail::kVersion);
  ckpt_detail::write_u32(os, static_cast<std::uint32_t>(config_tensors.size() + entries.size()));
  for (const auto& [name, t] : config_tensors) ckpt_detail::write_tensor(os, name, t.shape, t.data);
  for (const auto& e : entries) ckpt_detail::write_tensor(os, e.name, e.tensor.shape(), e.tensor.values());
}

inline void save_checkpoint(const std::string& path, const Network& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot write '" + path + "'");
  save_checkpoint(os, net);
  if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

/// Rebuilds a network from a checkpoint: the embedded config describes the
/// architecture, then every parameter and buffer is restored by name.
inline Network load_checkpoint(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, ckpt_detail::kMagic, 4) != 0) throw IoError("checkpoint: bad magic bytes");
  const std::uint32_t version = ckpt_detail::read_u32(is);
  if (version != ckpt_detail::kVersion)
    throw IoError("checkpoint: incompatible format version " + std::to_string(version) + " (expected " +
                  std::to_string(ckpt_detail::kVersion) + ")");
  const std::uint32_t count = ckpt_detail::read_u32(is);
  std::map<std::string, ckpt_detail::RawTensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = ckpt_detail::read_tensor(is);
    if (!tensors.emplace(name, std::move(t)).second)
      throw IoError("checkpoint: duplicate tensor '" + name + "'");
  }

  Network net(ckpt_detail::decode_config(tensors), 0);
  for (const auto& e : net.params().entries()) {
    auto it = tensors.find(e.name);
    if (it == tensors.end()) throw IoError("checkpoint: missing tensor '" + e.name + "'");
    Tensor* dst = net.params().find(e.name);
    if (it->second.shape != dst->shape())
      throw IoError("checkpoint: shape mismatch for '" + e.name + "'");
    dst->values() = it->second.data;
  }
  return net;
}

inline Network load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  return load_checkpoint(is);
}

}  // namespace baaf
