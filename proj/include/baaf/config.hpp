#pragma once

// Line-based `key = value` configuration files with dotted keys, covering
// the model, the ablation variant, and the training schedule.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "baaf/common.hpp"
#include "baaf/model.hpp"
#include "baaf/train.hpp"

namespace baaf {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline int parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for '" + key + "': '" + v + "'");
  }
}

inline float parse_float(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const float x = std::stof(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for '" + key + "': '" + v + "'");
  }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean for '" + key + "': '" + v + "'");
}

}  // namespace config_detail

inline const char* to_string(OffsetOrder v) {
  switch (v) {
    case OffsetOrder::none: return "none";
    case OffsetOrder::p_then_f: return "p_then_f";
    default: return "f_then_p";
  }
}
inline const char* to_string(Aggregation v) {
  switch (v) {
    case Aggregation::max: return "max";
    case Aggregation::mean: return "mean";
    default: return "mixed";
  }
}
inline const char* to_string(FusionMode v) {
  switch (v) {
    case FusionMode::last_only: return "last_only";
    case FusionMode::sum: return "sum";
    case FusionMode::product: return "product";
    case FusionMode::concat: return "concat";
    case FusionMode::scalar_weights: return "scalar_weights";
    default: return "pointwise_adaptive";
  }
}
inline const char* to_string(SamplerKind v) { return v == SamplerKind::fps ? "fps" : "random"; }

/// Applies one `key = value` pair. Unknown keys are rejected.
inline void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  using config_detail::parse_bool;
  using config_detail::parse_float;
  using config_detail::parse_int;
  using config_detail::split;

  if (key == "model.levels") {
    std::vector<LevelSpec> levels;
    for (const std::string& pair : split(value, ',')) {
      const std::vector<std::string> rd = split(pair, ':');
      if (rd.size() != 2) throw ConfigError("config: levels expect 'ratio:dim' pairs, got '" + pair + "'");
      levels.push_back(LevelSpec{parse_int(rd[0], key), parse_int(rd[1], key)});
    }
    cfg.model.levels = levels;
  } else if (key == "model.k") {
    cfg.model.k = parse_int(value, key);
  } else if (key == "model.input_dim") {
    cfg.model.input_dim = parse_int(value, key);
  } else if (key == "model.extractor_dim") {
    cfg.model.extractor_dim = parse_int(value, key);
  } else if (key == "model.decode_dim") {
    cfg.model.decode_dim = parse_int(value, key);
  } else if (key == "model.head_dims") {
    cfg.model.head_dims.clear();
    for (const std::string& v : split(value, ',')) cfg.model.head_dims.push_back(parse_int(v, key));
  } else if (key == "model.num_classes") {
    cfg.model.num_classes = parse_int(value, key);
  } else if (key == "model.dropout") {
    cfg.model.dropout = parse_float(value, key);
  } else if (key == "model.aug_loss_weights") {
    cfg.model.aug_loss_weights.clear();
    for (const std::string& v : split(value, ',')) cfg.model.aug_loss_weights.push_back(parse_float(v, key));
  } else if (key == "model.aug_loss_mean") {
    cfg.model.aug_loss_mean = parse_bool(value, key);
  } else if (key == "variant.offset_order") {
    if (value == "none") cfg.model.variant.offset_order = OffsetOrder::none;
    else if (value == "p_then_f") cfg.model.variant.offset_order = OffsetOrder::p_then_f;
    else if (value == "f_then_p") cfg.model.variant.offset_order = OffsetOrder::f_then_p;
    else throw ConfigError("config: bad offset_order '" + value + "'");
  } else if (key == "variant.aug_loss") {
    cfg.model.variant.geometric_aug_loss = false;
    cfg.model.variant.semantic_aug_loss = false;
    if (value != "none")
      for (const std::string& v : split(value, '+')) {
        if (v == "geometric") cfg.model.variant.geometric_aug_loss = true;
        else if (v == "semantic") cfg.model.variant.semantic_aug_loss = true;
        else throw ConfigError("config: bad aug_loss term '" + v + "'");
      }
  } else if (key == "variant.aggregation") {
    if (value == "max") cfg.model.variant.aggregation = Aggregation::max;
    else if (value == "mean") cfg.model.variant.aggregation = Aggregation::mean;
    else if (value == "mixed") cfg.model.variant.aggregation = Aggregation::mixed;
    else throw ConfigError("config: bad aggregation '" + value + "'");
  } else if (key == "variant.fusion") {
    if (value == "last_only") cfg.model.variant.fusion = FusionMode::last_only;
    else if (value == "sum") cfg.model.variant.fusion = FusionMode::sum;
    else if (value == "product") cfg.model.variant.fusion = FusionMode::product;
    else if (value == "concat") cfg.model.variant.fusion = FusionMode::concat;
    else if (value == "scalar_weights") cfg.model.variant.fusion = FusionMode::scalar_weights;
    else if (value == "pointwise_adaptive") cfg.model.variant.fusion = FusionMode::pointwise_adaptive;
    else throw ConfigError("config: bad fusion '" + value + "'");
  } else if (key == "variant.sampler") {
    if (value == "fps") cfg.model.variant.sampler = SamplerKind::fps;
    else if (value == "random") cfg.model.variant.sampler = SamplerKind::random;
    else throw ConfigError("config: bad sampler '" + value + "'");
  } else if (key == "variant.knn_dilation") {
    cfg.model.variant.knn_dilation = parse_int(value, key);
  } else if (key == "variant.equal_loss_weights") {
    cfg.model.variant.equal_loss_weights = parse_bool(value, key);
  } else if (key == "train.epochs") {
    cfg.train.epochs = parse_int(value, key);
  } else if (key == "train.lr0") {
    cfg.train.lr0 = parse_float(value, key);
  } else if (key == "train.decay") {
    cfg.train.decay = parse_float(value, key);
  } else if (key == "train.decay_every") {
    cfg.train.decay_every = parse_int(value, key);
  } else if (key == "train.batch_size") {
    cfg.train.batch_size = parse_int(value, key);
  } else if (key == "train.seed") {
    cfg.train.seed = static_cast<std::uint64_t>(parse_int(value, key));
  } else if (key == "train.crop_size") {
    cfg.train.crop_size = parse_int(value, key);
  } else if (key == "train.crops_per_epoch") {
    cfg.train.crops_per_epoch = parse_int(value, key);
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

inline RunConfig parse_config_text(std::istream& is) {
  RunConfig cfg;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string trimmed = config_detail::trim(line);
    if (trimmed.empty()) continue;
    const std::size_t eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(line_no) + ": expected 'key = value'");
    try {
      apply_config_kv(cfg, config_detail::trim(trimmed.substr(0, eq)),
                      config_detail::trim(trimmed.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
    }
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open '" + path + "'");
  return parse_config_text(is);
}

/// Canonical text for the fully resolved configuration.
inline std::string format_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "model.levels = ";
  for (std::size_t i = 0; i < cfg.model.levels.size(); ++i)
    os << (i ? "," : "") << cfg.model.levels[i].ratio << ':' << cfg.model.levels[i].dim;
  os << "\nmodel.k = " << cfg.model.k;
  os << "\nmodel.input_dim = " << cfg.model.input_dim;
  os << "\nmodel.extractor_dim = " << cfg.model.extractor_dim;
  os << "\nmodel.decode_dim = " << cfg.model.decode_dim;
  os << "\nmodel.head_dims = ";
  for (std::size_t i = 0; i < cfg.model.head_dims.size(); ++i) os << (i ? "," : "") << cfg.model.head_dims[i];
  os << "\nmodel.num_classes = " << cfg.model.num_classes;
  os << "\nmodel.dropout = " << cfg.model.dropout;
  os << "\nmodel.aug_loss_weights = ";
  for (std::size_t i = 0; i < cfg.model.aug_loss_weights.size(); ++i)
    os << (i ? "," : "") << cfg.model.aug_loss_weights[i];
  os << "\nmodel.aug_loss_mean = " << (cfg.model.aug_loss_mean ? "true" : "false");
  os << "\nvariant.offset_order = " << to_string(cfg.model.variant.offset_order);
  os << "\nvariant.aug_loss = ";
  if (cfg.model.variant.geometric_aug_loss && cfg.model.variant.semantic_aug_loss) os << "geometric+semantic";
  else if (cfg.model.variant.geometric_aug_loss) os << "geometric";
  else if (cfg.model.variant.semantic_aug_loss) os << "semantic";
  else os << "none";
  os << "\nvariant.aggregation = " << to_string(cfg.model.variant.aggregation);
  os << "\nvariant.fusion = " << to_string(cfg.model.variant.fusion);
  os << "\nvariant.sampler = " << to_string(cfg.model.variant.sampler);
  os << "\nvariant.knn_dilation = " << cfg.model.variant.knn_dilation;
  os << "\nvariant.equal_loss_weights = " << (cfg.model.variant.equal_loss_weights ? "true" : "false");
  os << "\ntrain.epochs = " << cfg.train.epochs;
  os << "\ntrain.lr0 = " << cfg.train.lr0;
  os << "\ntrain.decay = " << cfg.train.decay;
  os << "\ntrain.decay_every = " << cfg.train.decay_every;
  os << "\ntrain.batch_size = " << cfg.train.batch_size;
  os << "\ntrain.seed = " << cfg.train.seed;
  os << "\ntrain.crop_size = " << cfg.train.crop_size;
  os << "\ntrain.crops_per_epoch = " << cfg.train.crops_per_epoch;
  os << "\n";
  return os.str();
}

}  // namespace baaf
