#pragma once

// The segmentation network: feature extractor, bilateral context blocks,
// encoder cascade over a resolution pyramid, multi-resolution upsampling,
// adaptive fusion, and the prediction head. A ModelConfig fully describes
// the architecture, including every ablation switch.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "baaf/cloud.hpp"
#include "baaf/common.hpp"
#include "baaf/spatial.hpp"
#include "baaf/tensor.hpp"

namespace baaf {

// ---------------------------------------------------------------------------
// Configuration

enum class OffsetOrder { none, p_then_f, f_then_p };
enum class Aggregation { max, mean, mixed };
enum class FusionMode { last_only, sum, product, concat, scalar_weights, pointwise_adaptive };
enum class SamplerKind { fps, random };

/// Architecture switches covering every ablation row.
struct AblationVariant {
  OffsetOrder offset_order = OffsetOrder::p_then_f;
  bool geometric_aug_loss = true;
  bool semantic_aug_loss = false;
  Aggregation aggregation = Aggregation::mixed;
  FusionMode fusion = FusionMode::pointwise_adaptive;
  SamplerKind sampler = SamplerKind::fps;
  int knn_dilation = 1;
  bool equal_loss_weights = false;
};

/// One encoder level: points shrink to cloud_size / ratio, features widen
/// to dim.
struct LevelSpec {
  int ratio;
  int dim;
};

struct ModelConfig {
  std::vector<LevelSpec> levels = {{4, 32}, {16, 128}, {64, 256}, {256, 512}, {512, 1024}};
  int k = 12;
  int input_dim = 6;  // xyz or xyz+rgb
  int extractor_dim = 8;
  int decode_dim = 32;
  std::vector<int> head_dims = {64, 32};
  int num_classes = 6;
  float dropout = 0.5f;
  std::vector<float> aug_loss_weights = {0.1f, 0.1f, 0.3f, 0.5f, 0.5f};
  // Per-level augmentation losses normalize by point count by default; the
  // raw sum is available but couples the loss magnitude to crop size.
  bool aug_loss_mean = true;
  AblationVariant variant;

  int num_levels() const { return static_cast<int>(levels.size()); }

  /// Loss weights after the equal-weights ablation switch.
  std::vector<float> effective_loss_weights() const {
    if (variant.equal_loss_weights) return std::vector<float>(levels.size(), 0.3f);
    return aug_loss_weights;
  }

  void validate() const {
    if (levels.empty()) throw ConfigError("config: at least one level required");
    int prev_ratio = 1;
    for (const LevelSpec& l : levels) {
      if (l.ratio < prev_ratio) throw ConfigError("config: level ratios must be nondecreasing");
      if (l.dim < 4 || l.dim % 4 != 0) throw ConfigError("config: level dims must be positive multiples of 4");
      prev_ratio = l.ratio;
    }
    if (k < 1) throw ConfigError("config: k must be >= 1");
    if (input_dim != 3 && input_dim != 6) throw ConfigError("config: input_dim must be 3 or 6");
    if (extractor_dim < 1) throw ConfigError("config: extractor_dim must be >= 1");
    if (decode_dim < 1) throw ConfigError("config: decode_dim must be >= 1");
    if (num_classes < 2) throw ConfigError("config: num_classes must be >= 2");
    if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("config: dropout must be in [0, 1)");
    if (aug_loss_weights.size() != levels.size())
      throw ConfigError("config: aug_loss_weights length must match level count");
    if (variant.knn_dilation < 1) throw ConfigError("config: knn_dilation must be >= 1");
    if (variant.offset_order == OffsetOrder::none &&
        (variant.geometric_aug_loss || variant.semantic_aug_loss))
      throw ConfigError("config: augmentation losses require bilateral offsets");
  }
};

// ---------------------------------------------------------------------------
// Parameter registry

/// Ordered name -> tensor registry holding trainable parameters and
/// non-trainable buffers (batch-norm running stats). Registration order is
/// the canonical iteration order for the optimizer and checkpoints.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable;
  };

  Tensor add(const std::string& name, Tensor t, bool trainable) {
    if (lookup_.count(name)) throw ConfigError("params: duplicate name '" + name + "'");
    lookup_[name] = entries_.size();
    entries_.push_back(Entry{name, t, trainable});
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  Tensor* find(const std::string& name) {
    auto it = lookup_.find(name);
    return it == lookup_.end() ? nullptr : &entries_[it->second].tensor;
  }

  std::int64_t param_count() const {
    std::int64_t total = 0;
    for (const Entry& e : entries_)
      if (e.trainable) total += e.tensor.size();
    return total;
  }

  void zero_grad() {
    for (Entry& e : entries_)
      if (e.trainable) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> lookup_;
};

// ---------------------------------------------------------------------------
// Layers

enum class InitKind { he, fan_in, zero };

struct LinearLayer {
  Tensor w, b;

  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }

  static LinearLayer make(ParamStore& ps, const std::string& prefix, Index in, Index out, Rng& rng,
                          InitKind init) {
    LinearLayer l;
    std::vector<float> wd(static_cast<std::size_t>(in * out), 0.0f);
    if (init != InitKind::zero) {
      const float stddev = init == InitKind::he ? std::sqrt(2.0f / static_cast<float>(in))
                                                : std::sqrt(1.0f / static_cast<float>(in));
      for (float& v : wd) v = stddev * rng.normal_f();
    }
    l.w = ps.add(prefix + ".w", Tensor::from_data({in, out}, std::move(wd), true), true);
    l.b = ps.add(prefix + ".b", Tensor::zeros({out}, true), true);
    return l;
  }
};

/// Single-layer MLP: linear map, batch normalization, ReLU.
struct MlpLayer {
  LinearLayer lin;
  mutable BatchNorm bn;  // training-mode forward updates the running stats

  Tensor forward(const Tensor& x, bool training) const {
    return relu(batch_norm(lin(x), bn, training));
  }

  static MlpLayer make(ParamStore& ps, const std::string& prefix, Index in, Index out, Rng& rng) {
    MlpLayer m;
    m.lin = LinearLayer::make(ps, prefix, in, out, rng, InitKind::he);
    m.bn = BatchNorm::make(out);
    ps.add(prefix + ".bn.scale", m.bn.scale, true);
    ps.add(prefix + ".bn.shift", m.bn.shift, true);
    ps.add(prefix + ".bn.running_mean", m.bn.running_mean, false);
    ps.add(prefix + ".bn.running_var", m.bn.running_var, false);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Local context

/// Replicates each centroid across its k neighbor slots.
inline NeighborIndex self_index(std::int64_t n, std::int64_t k) {
  NeighborIndex idx;
  idx.n = n;
  idx.k = k;
  idx.indices.resize(static_cast<std::size_t>(n * k));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < k; ++j) idx.indices[static_cast<std::size_t>(i * k + j)] = static_cast<std::int32_t>(i);
  return idx;
}

/// out[i, j] = concat(centroid_i, value_{nbr(i,j)} - centroid_i); the
/// absolute center plus relative neighbors, in either 3D or feature space.
inline Tensor local_context(const Tensor& values, const Tensor& centroids, const NeighborIndex& nbr) {
  check_same_shape("local_context", values, centroids);
  const Tensor center_rep = neighbor_gather(centroids, self_index(nbr.n, nbr.k));
  const Tensor gathered = neighbor_gather(values, nbr);
  return concat({center_rep, sub(gathered, center_rep)}, 2);
}

// ---------------------------------------------------------------------------
// Bilateral context block

struct BlockOutput {
  Tensor features_full;                      // input resolution, out_dim channels
  Tensor features_down;                      // next resolution
  std::vector<float> positions_down;         // next resolution * 3
  std::vector<std::int32_t> sample_indices;  // into the input resolution
  NeighborIndex nbr;
  Tensor context;             // augmented local context, n x k x out_dim/2
  Tensor geo_loss, sem_loss;  // undefined when the variant disables them
  Tensor shifted_p, shifted_f;
  Tensor input_features;
};

/// One encoder stage: neighborhood construction, bilateral augmentation,
/// mixed local aggregation, then downsampling to the next resolution.
class BilateralContextBlock {
 public:
  BilateralContextBlock(int in_dim, int out_dim, const AblationVariant& variant, ParamStore& ps,
                        const std::string& prefix, Rng& rng)
      : in_dim_(in_dim), out_dim_(out_dim), half_(out_dim / 2), variant_(variant) {
    const bool offsets = variant.offset_order != OffsetOrder::none;
    const int geo_ctx = offsets ? 9 : 6;
    const int sem_ctx = offsets ? 3 * in_dim : 2 * in_dim;
    if (offsets) {
      // Offset heads are plain linear layers starting at zero, so an
      // untrained block leaves neighborhoods unshifted.
      const int off_p_in = variant.offset_order == OffsetOrder::p_then_f ? 2 * in_dim : 3 * in_dim;
      const int off_f_in = variant.offset_order == OffsetOrder::p_then_f ? 9 : 6;
      offset_p_ = LinearLayer::make(ps, prefix + ".offset_p", off_p_in, 3, rng, InitKind::zero);
      offset_f_ = LinearLayer::make(ps, prefix + ".offset_f", off_f_in, in_dim, rng, InitKind::zero);
    }
    proj_geo_ = MlpLayer::make(ps, prefix + ".proj_geo", geo_ctx, half_ / 2, rng);
    proj_sem_ = MlpLayer::make(ps, prefix + ".proj_sem", sem_ctx, half_ / 2, rng);
    if (variant.aggregation != Aggregation::max) {
      refine_ = MlpLayer::make(ps, prefix + ".refine", half_, half_, rng);
      score_ = LinearLayer::make(ps, prefix + ".score", half_, half_, rng, InitKind::fan_in);
    }
    if (variant.aggregation != Aggregation::mixed)
      lift_ = LinearLayer::make(ps, prefix + ".lift", half_, out_dim, rng, InitKind::fan_in);
  }

  int out_dim() const { return out_dim_; }

  BlockOutput forward(const Tensor& feats, const std::vector<float>& positions, int k, std::int64_t n_next,
                      bool training, Rng& rng, bool aug_loss_mean) const {
    const std::int64_t n = feats.dim(0);
    BlockOutput out;
    out.input_features = feats;
    out.nbr = variant_.knn_dilation > 1 ? dilated_knn(positions, positions, k, variant_.knn_dilation)
                                        : knn(positions, positions, k);

    const Tensor pos_t = Tensor::from_data({n, 3}, positions);
    const Tensor p_ctx = local_context(pos_t, pos_t, out.nbr);   // n,k,6
    const Tensor f_ctx = local_context(feats, feats, out.nbr);   // n,k,2d
    const Tensor p_nb = neighbor_gather(pos_t, out.nbr);         // n,k,3
    const Tensor f_nb = neighbor_gather(feats, out.nbr);         // n,k,d

    Tensor geo_aug, sem_aug;
    if (variant_.offset_order == OffsetOrder::p_then_f) {
      out.shifted_p = add(offset_p_(f_ctx), p_nb);
      geo_aug = concat({p_ctx, out.shifted_p}, 2);               // n,k,9
      out.shifted_f = add(offset_f_(geo_aug), f_nb);
      sem_aug = concat({f_ctx, out.shifted_f}, 2);               // n,k,3d
    } else if (variant_.offset_order == OffsetOrder::f_then_p) {
      out.shifted_f = add(offset_f_(p_ctx), f_nb);
      sem_aug = concat({f_ctx, out.shifted_f}, 2);
      out.shifted_p = add(offset_p_(sem_aug), p_nb);
      geo_aug = concat({p_ctx, out.shifted_p}, 2);
    } else {
      geo_aug = p_ctx;
      sem_aug = f_ctx;
      out.shifted_p = p_nb;
      out.shifted_f = f_nb;
    }

    const Tensor g = concat({proj_geo_.forward(geo_aug, training), proj_sem_.forward(sem_aug, training)}, 2);
    out.context = g;

    Tensor aggregated;
    switch (variant_.aggregation) {
      case Aggregation::max:
        aggregated = lift_(neighbor_max(g));
        break;
      case Aggregation::mean:
        aggregated = lift_(neighbor_weighted_mean(refine_.forward(g, training), score_(g)));
        break;
      case Aggregation::mixed:
        aggregated =
            concat({neighbor_max(g), neighbor_weighted_mean(refine_.forward(g, training), score_(g))}, 1);
        break;
    }
    out.features_full = aggregated;

    if (variant_.offset_order != OffsetOrder::none) {
      if (variant_.geometric_aug_loss) out.geo_loss = mean_shift_loss(out.shifted_p, pos_t, aug_loss_mean);
      if (variant_.semantic_aug_loss) out.sem_loss = mean_shift_loss(out.shifted_f, feats, aug_loss_mean);
    }

    // Downsample by gathering rows at sampler-selected points.
    if (variant_.sampler == SamplerKind::fps) {
      SampleSet sel = fps(positions, n_next, 0);
      out.sample_indices = std::move(sel.indices);
      out.positions_down = std::move(sel.positions);
    } else {
      out.sample_indices = random_subset(n, n_next, rng);
      out.positions_down.reserve(static_cast<std::size_t>(n_next) * 3);
      for (std::int32_t idx : out.sample_indices) {
        const float* p = positions.data() + static_cast<std::int64_t>(idx) * 3;
        out.positions_down.insert(out.positions_down.end(), p, p + 3);
      }
    }
    out.features_down = row_gather(aggregated, out.sample_indices);
    return out;
  }

 private:
  static std::vector<std::int32_t> random_subset(std::int64_t n, std::int64_t m, Rng& rng) {
    std::vector<std::int32_t> pool(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);
    for (std::int64_t i = 0; i < m; ++i) {
      const std::int64_t j = i + rng.uniform_int(n - i);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(m));
    return pool;
  }

  int in_dim_, out_dim_, half_;
  AblationVariant variant_;
  LinearLayer offset_p_, offset_f_;
  MlpLayer proj_geo_, proj_sem_;
  MlpLayer refine_;
  LinearLayer score_;
  LinearLayer lift_;
};

// ---------------------------------------------------------------------------
// Fusion

/// Parameter-free fusion of full-sized maps. pointwise_adaptive consumes
/// the per-map point summaries; last_only/sum/product/concat ignore them.
/// scalar_weights needs learned parameters and lives in the network.
inline Tensor fused_output(FusionMode mode, const std::vector<Tensor>& maps, const std::vector<Tensor>& phis) {
  if (maps.empty()) throw ShapeError("fusion: no maps");
  for (const Tensor& m : maps) check_same_shape("fusion", maps[0], m);
  switch (mode) {
    case FusionMode::last_only:
      return maps.back();
    case FusionMode::sum: {
      Tensor acc = maps[0];
      for (std::size_t i = 1; i < maps.size(); ++i) acc = add(acc, maps[i]);
      return acc;
    }
    case FusionMode::product: {
      Tensor acc = maps[0];
      for (std::size_t i = 1; i < maps.size(); ++i) acc = mul(acc, maps[i]);
      return acc;
    }
    case FusionMode::concat:
      return concat(maps, 1);
    case FusionMode::pointwise_adaptive: {
      if (phis.size() != maps.size()) throw ShapeError("fusion: summary count mismatch");
      const Tensor weights = softmax(concat(phis, 1), 1);  // N x M, rows sum to 1
      Tensor acc;
      for (std::size_t m = 0; m < maps.size(); ++m) {
        Tensor term = scale_rows(maps[m], column(weights, static_cast<Index>(m)));
        acc = m == 0 ? term : add(acc, term);
      }
      return acc;
    }
    default:
      throw ConfigError("fusion: mode requires network parameters");
  }
}

// ---------------------------------------------------------------------------
// Network

struct PyramidLevel {
  Tensor features;  // S_m at this level's resolution
  std::vector<float> positions;
  std::vector<std::int32_t> sample_indices;  // into the previous level
  NeighborIndex nbr;                         // neighborhoods at the previous level
  Tensor geo_loss, sem_loss;
  Tensor shifted_p, shifted_f;
  Tensor input_features;  // features the block consumed (previous resolution)
};

struct ForwardResult {
  Tensor logits;                   // N x Q
  std::vector<Tensor> aug_losses;  // one scalar per level (zero when inactive)
  std::vector<PyramidLevel> pyramid;
  Tensor extractor_features;
};

class Network {
 public:
  Network(ModelConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    Rng rng(seed);
    const int levels = cfg_.num_levels();

    extractor_ = MlpLayer::make(params_, "extractor", cfg_.input_dim, cfg_.extractor_dim, rng);

    int in_dim = cfg_.extractor_dim;
    for (int m = 0; m < levels; ++m) {
      blocks_.push_back(std::make_unique<BilateralContextBlock>(
          in_dim, cfg_.levels[static_cast<std::size_t>(m)].dim, cfg_.variant, params_,
          "enc.block" + std::to_string(m + 1), rng));
      in_dim = cfg_.levels[static_cast<std::size_t>(m)].dim;
    }

    // Upsampling chains. Map m hops through levels m..1; a ratio-1 level is
    // already full-sized and gets a single projection instead.
    const bool last_map_only = cfg_.variant.fusion == FusionMode::last_only;
    dec_pre_.resize(static_cast<std::size_t>(levels));
    dec_post_.resize(static_cast<std::size_t>(levels));
    for (int m = 0; m < levels; ++m) {
      if (last_map_only && m != levels - 1) continue;
      const std::string map_prefix = "dec.map" + std::to_string(m + 1);
      if (cfg_.levels[static_cast<std::size_t>(m)].ratio == 1) {
        dec_pre_[static_cast<std::size_t>(m)].push_back(MlpLayer::make(
            params_, map_prefix + ".proj", cfg_.levels[static_cast<std::size_t>(m)].dim, cfg_.decode_dim, rng));
        continue;
      }
      for (int l = m; l >= 0; --l) {
        const int cur_dim = l == m ? cfg_.levels[static_cast<std::size_t>(m)].dim : cfg_.decode_dim;
        const int skip_dim = l == 0 ? cfg_.extractor_dim : cfg_.levels[static_cast<std::size_t>(l - 1)].dim;
        const std::string hop_prefix = map_prefix + ".hop" + std::to_string(l + 1);
        dec_pre_[static_cast<std::size_t>(m)].push_back(
            MlpLayer::make(params_, hop_prefix + ".pre", cur_dim, cfg_.decode_dim, rng));
        dec_post_[static_cast<std::size_t>(m)].push_back(
            MlpLayer::make(params_, hop_prefix + ".post", cfg_.decode_dim + skip_dim, cfg_.decode_dim, rng));
      }
    }

    if (cfg_.variant.fusion == FusionMode::pointwise_adaptive)
      for (int m = 0; m < levels; ++m)
        phi_.push_back(LinearLayer::make(params_, "dec.map" + std::to_string(m + 1) + ".phi", cfg_.decode_dim,
                                         1, rng, InitKind::fan_in));
    if (cfg_.variant.fusion == FusionMode::scalar_weights)
      for (int m = 0; m < levels; ++m)
        psi_.push_back(LinearLayer::make(params_, "fuse.map" + std::to_string(m + 1) + ".psi", cfg_.decode_dim,
                                         1, rng, InitKind::fan_in));

    int head_in = cfg_.variant.fusion == FusionMode::concat
                      ? cfg_.decode_dim * (last_map_only ? 1 : levels)
                      : cfg_.decode_dim;
    for (std::size_t i = 0; i < cfg_.head_dims.size(); ++i) {
      head_hidden_.push_back(MlpLayer::make(params_, "head.fc" + std::to_string(i + 1), head_in,
                                            cfg_.head_dims[i], rng));
      head_in = cfg_.head_dims[i];
    }
    head_out_ = LinearLayer::make(params_, "head.out", head_in, cfg_.num_classes, rng, InitKind::fan_in);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::int64_t param_count() const { return params_.param_count(); }

  /// Input attributes for the extractor: xyz, plus rgb when configured.
  Tensor input_tensor(const PointCloud& cloud) const {
    const std::int64_t n = cloud.size();
    std::vector<float> data(static_cast<std::size_t>(n) * static_cast<std::size_t>(cfg_.input_dim));
    if (cfg_.input_dim == 6 && !cloud.has_colors())
      throw ValueError("model: config expects colors but the cloud has none");
    for (std::int64_t i = 0; i < n; ++i) {
      for (int d = 0; d < 3; ++d) data[static_cast<std::size_t>(i * cfg_.input_dim + d)] = cloud.positions[static_cast<std::size_t>(i * 3 + d)];
      if (cfg_.input_dim == 6)
        for (int d = 0; d < 3; ++d)
          data[static_cast<std::size_t>(i * cfg_.input_dim + 3 + d)] = cloud.colors[static_cast<std::size_t>(i * 3 + d)];
    }
    return Tensor::from_data({n, cfg_.input_dim}, std::move(data));
  }

  ForwardResult forward(const PointCloud& cloud, bool training, Rng& rng) const {
    const std::int64_t n = cloud.size();
    if (n < 1) throw ValueError("model: empty cloud");
    ForwardResult res;
    res.extractor_features = extractor_.forward(input_tensor(cloud), training);

    // Encoder cascade.
    const int levels = cfg_.num_levels();
    Tensor feats = res.extractor_features;
    std::vector<float> positions = cloud.positions;
    for (int m = 0; m < levels; ++m) {
      const std::int64_t n_next =
          std::max<std::int64_t>(1, n / cfg_.levels[static_cast<std::size_t>(m)].ratio);
      BlockOutput bo = blocks_[static_cast<std::size_t>(m)]->forward(feats, positions, cfg_.k, n_next,
                                                                     training, rng, cfg_.aug_loss_mean);
      PyramidLevel level;
      level.features = bo.features_down;
      level.positions = bo.positions_down;
      level.sample_indices = std::move(bo.sample_indices);
      level.nbr = std::move(bo.nbr);
      level.geo_loss = bo.geo_loss;
      level.sem_loss = bo.sem_loss;
      level.shifted_p = bo.shifted_p;
      level.shifted_f = bo.shifted_f;
      level.input_features = bo.input_features;
      feats = bo.features_down;
      positions = level.positions;
      res.pyramid.push_back(std::move(level));
    }

    // Per-level augmentation loss terms.
    for (int m = 0; m < levels; ++m) {
      const PyramidLevel& lv = res.pyramid[static_cast<std::size_t>(m)];
      Tensor term;
      if (lv.geo_loss.defined() && lv.sem_loss.defined())
        term = add(lv.geo_loss, lv.sem_loss);
      else if (lv.geo_loss.defined())
        term = lv.geo_loss;
      else if (lv.sem_loss.defined())
        term = lv.sem_loss;
      else
        term = Tensor::scalar(0.0f);
      res.aug_losses.push_back(term);
    }

    // Nearest-neighbor upsampling indices between consecutive resolutions,
    // shared by every map.
    std::vector<std::vector<std::int32_t>> up_nn(static_cast<std::size_t>(levels));
    for (int l = 0; l < levels; ++l) {
      const std::vector<float>& low = res.pyramid[static_cast<std::size_t>(l)].positions;
      const std::vector<float>& high = l == 0 ? cloud.positions : res.pyramid[static_cast<std::size_t>(l - 1)].positions;
      up_nn[static_cast<std::size_t>(l)] = nearest_indices(low, high);
    }

    const bool last_map_only = cfg_.variant.fusion == FusionMode::last_only;
    std::vector<Tensor> maps;
    for (int m = 0; m < levels; ++m) {
      if (last_map_only && m != levels - 1) continue;
      maps.push_back(upsample_map(m, res, up_nn, training));
    }

    Tensor fused;
    if (cfg_.variant.fusion == FusionMode::pointwise_adaptive) {
      std::vector<Tensor> phis;
      for (std::size_t i = 0; i < maps.size(); ++i) phis.push_back(phi_[i](maps[i]));
      fused = fused_output(FusionMode::pointwise_adaptive, maps, phis);
    } else if (cfg_.variant.fusion == FusionMode::scalar_weights) {
      std::vector<Tensor> squeezed;  // per-map scalars from globally averaged maps
      for (std::size_t i = 0; i < maps.size(); ++i) squeezed.push_back(psi_[i](mean_axis0(maps[i])));
      const Tensor weights = softmax(concat(squeezed, 1), 1);  // 1 x M
      for (std::size_t m = 0; m < maps.size(); ++m) {
        Tensor term = mul_scalar_tensor(maps[m], column(weights, static_cast<Index>(m)));
        fused = m == 0 ? term : add(fused, term);
      }
    } else {
      fused = fused_output(cfg_.variant.fusion, maps, {});
    }

    // Prediction head; logits carry no final activation.
    Tensor h = fused;
    for (const MlpLayer& layer : head_hidden_) h = layer.forward(h, training);
    h = dropout(h, cfg_.dropout, training, rng);
    res.logits = head_out_(h);
    return res;
  }

 private:
  /// Upsamples level m's map to full resolution: repeated
  /// (MLP -> nearest-neighbor gather -> attach same-resolution encoder
  /// features -> MLP) hops; a ratio-1 level is a single projection.
  Tensor upsample_map(int m, const ForwardResult& res, const std::vector<std::vector<std::int32_t>>& up_nn,
                      bool training) const {
    const std::vector<MlpLayer>& pre = dec_pre_[static_cast<std::size_t>(m)];
    const std::vector<MlpLayer>& post = dec_post_[static_cast<std::size_t>(m)];
    Tensor cur = res.pyramid[static_cast<std::size_t>(m)].features;
    if (cfg_.levels[static_cast<std::size_t>(m)].ratio == 1) return pre[0].forward(cur, training);
    std::size_t hop = 0;
    for (int l = m; l >= 0; --l, ++hop) {
      cur = pre[hop].forward(cur, training);
      cur = row_gather(cur, up_nn[static_cast<std::size_t>(l)]);
      const Tensor skip = l == 0 ? res.extractor_features : res.pyramid[static_cast<std::size_t>(l - 1)].features;
      cur = post[hop].forward(concat({cur, skip}, 1), training);
    }
    return cur;
  }

  ModelConfig cfg_;
  ParamStore params_;
  MlpLayer extractor_;
  std::vector<std::unique_ptr<BilateralContextBlock>> blocks_;
  std::vector<std::vector<MlpLayer>> dec_pre_, dec_post_;
  std::vector<LinearLayer> phi_, psi_;
  std::vector<MlpLayer> head_hidden_;
  LinearLayer head_out_;
};

// ---------------------------------------------------------------------------
// Ablation grids

struct GridRow {
  std::string name;
  ModelConfig config;
};

/// Rows of the block / fusion / network ablation tables, derived from a
/// base configuration.
inline std::vector<GridRow> ablation_grid(const std::string& grid, const ModelConfig& base) {
  std::vector<GridRow> rows;
  auto push = [&rows](const std::string& name, ModelConfig cfg) {
    cfg.validate();
    rows.push_back(GridRow{name, std::move(cfg)});
  };
  auto block_row = [&base](OffsetOrder order, bool geo, bool sem, Aggregation agg) {
    ModelConfig cfg = base;
    cfg.variant.offset_order = order;
    cfg.variant.geometric_aug_loss = geo;
    cfg.variant.semantic_aug_loss = sem;
    cfg.variant.aggregation = agg;
    return cfg;
  };

  if (grid == "block") {
    push("B0", block_row(OffsetOrder::none, false, false, Aggregation::max));
    push("B1", block_row(OffsetOrder::f_then_p, false, true, Aggregation::mixed));
    push("B2", block_row(OffsetOrder::p_then_f, true, true, Aggregation::mixed));
    push("B3", block_row(OffsetOrder::p_then_f, false, false, Aggregation::mixed));
    push("B4", block_row(OffsetOrder::p_then_f, true, false, Aggregation::max));
    push("B5", block_row(OffsetOrder::p_then_f, true, false, Aggregation::mean));
    push("B6", block_row(OffsetOrder::p_then_f, true, false, Aggregation::mixed));
  } else if (grid == "fusion") {
    const FusionMode modes[6] = {FusionMode::last_only,      FusionMode::sum,
                                 FusionMode::product,        FusionMode::concat,
                                 FusionMode::scalar_weights, FusionMode::pointwise_adaptive};
    for (int i = 0; i < 6; ++i) {
      ModelConfig cfg = base;
      cfg.variant.fusion = modes[i];
      push("A" + std::to_string(i), cfg);
    }
  } else if (grid == "network") {
    ModelConfig n0 = block_row(OffsetOrder::none, false, false, Aggregation::max);
    n0.variant.fusion = FusionMode::last_only;
    push("N0", n0);
    ModelConfig n1 = base;
    n1.variant.sampler = SamplerKind::random;
    push("N1", n1);
    ModelConfig n2 = base;
    n2.variant.knn_dilation = 2;
    push("N2", n2);
    ModelConfig n3 = base;
    n3.variant.equal_loss_weights = true;
    push("N3", n3);
    ModelConfig n4 = base;  // four blocks, narrower dims
    n4.levels = {{4, 16}, {16, 64}, {64, 128}, {256, 256}};
    n4.aug_loss_weights = {0.1f, 0.1f, 0.3f, 0.5f};
    push("N4", n4);
    push("N5", base);
  } else {
    throw ConfigError("ablation grid: unknown grid '" + grid + "'");
  }
  return rows;
}

}  // namespace baaf
