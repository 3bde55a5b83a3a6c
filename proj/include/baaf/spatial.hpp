#pragma once

// Non-differentiable geometric primitives: farthest point sampling,
// k-nearest-neighbor search on a median-split kd-tree, nearest-neighbor
// feature interpolation, and neighborhood compactness statistics.
//
// All distance comparisons use squared norms with ties broken by lower
// point index, so results are deterministic and match a brute-force sort
// under the same ordering.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "baaf/common.hpp"

namespace baaf {

/// Indices (and coordinates) of a downsampled subset of a parent cloud.
struct SampleSet {
  std::vector<std::int32_t> indices;  // into the parent cloud, distinct
  std::vector<float> positions;       // m*3
};

namespace spatial_detail {

inline float sq_dist3(const float* a, const float* b) {
  const float dx = a[0] - b[0];
  const float dy = a[1] - b[1];
  const float dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

struct Candidate {
  float d2;
  std::int32_t idx;
};

// Preference ordering: smaller distance wins, lower index breaks ties.
// Heaped with this comparator, the front element is the worst kept
// candidate, which is the eviction point for a bounded k-best search.
inline bool closer(const Candidate& a, const Candidate& b) {
  if (a.d2 != b.d2) return a.d2 < b.d2;
  return a.idx < b.idx;
}

}  // namespace spatial_detail

/// Static median-split kd-tree over 3D points. Construction copies nothing
/// but an index permutation; the caller's point indexing is untouched.
class KdTree {
 public:
  KdTree(const float* positions, std::int64_t n) : points_(positions), n_(n) {
    if (n <= 0) throw ValueError("kd-tree: empty reference set");
    perm_.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) perm_[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);
    nodes_.reserve(static_cast<std::size_t>(2 * n / kLeafSize + 2));
    root_ = build(0, n);
  }

  explicit KdTree(const std::vector<float>& positions)
      : KdTree(positions.data(), static_cast<std::int64_t>(positions.size() / 3)) {}

  std::int64_t size() const { return n_; }

  /// k nearest points to `query`, sorted by (distance, index). Requires
  /// k <= size(); callers handle padding.
  void query_knn(const float* query, int k, std::vector<std::int32_t>& out) const {
    heap_.clear();
    search(root_, query, static_cast<std::size_t>(k));
    std::sort(heap_.begin(), heap_.end(), spatial_detail::closer);
    out.resize(heap_.size());
    for (std::size_t i = 0; i < heap_.size(); ++i) out[i] = heap_[i].idx;
  }

  std::int32_t nearest(const float* query) const {
    std::vector<std::int32_t> out;
    query_knn(query, 1, out);
    return out[0];
  }

 private:
  static constexpr std::int64_t kLeafSize = 8;

  struct TreeNode {
    int axis = -1;       // -1 marks a leaf
    float split = 0.0f;  // splitting coordinate value
    std::int32_t left = -1, right = -1;
    std::int64_t begin = 0, end = 0;  // leaf range in perm_
  };

  std::int32_t build(std::int64_t begin, std::int64_t end) {
    TreeNode node;
    if (end - begin <= kLeafSize) {
      node.begin = begin;
      node.end = end;
      nodes_.push_back(node);
      return static_cast<std::int32_t>(nodes_.size() - 1);
    }
    // Split on the widest axis at the median point.
    float lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::numeric_limits<float>::max();
      hi[a] = std::numeric_limits<float>::lowest();
    }
    for (std::int64_t i = begin; i < end; ++i) {
      const float* p = points_ + static_cast<std::int64_t>(perm_[static_cast<std::size_t>(i)]) * 3;
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
    }
    int axis = 0;
    for (int a = 1; a < 3; ++a)
      if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;

    const std::int64_t mid = begin + (end - begin) / 2;
    std::nth_element(perm_.begin() + begin, perm_.begin() + mid, perm_.begin() + end,
                     [this, axis](std::int32_t a, std::int32_t b) {
                       const float ca = points_[static_cast<std::int64_t>(a) * 3 + axis];
                       const float cb = points_[static_cast<std::int64_t>(b) * 3 + axis];
                       if (ca != cb) return ca < cb;
                       return a < b;
                     });
    node.axis = axis;
    node.split = points_[static_cast<std::int64_t>(perm_[static_cast<std::size_t>(mid)]) * 3 + axis];
    nodes_.push_back(node);
    const std::int32_t id = static_cast<std::int32_t>(nodes_.size() - 1);
    const std::int32_t l = build(begin, mid);
    const std::int32_t r = build(mid, end);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  void consider(const float* query, std::int32_t point, std::size_t k) const {
    spatial_detail::Candidate c{spatial_detail::sq_dist3(query, points_ + static_cast<std::int64_t>(point) * 3), point};
    if (heap_.size() < k) {
      heap_.push_back(c);
      std::push_heap(heap_.begin(), heap_.end(), spatial_detail::closer);
      return;
    }
    if (spatial_detail::closer(c, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), spatial_detail::closer);
      heap_.back() = c;
      std::push_heap(heap_.begin(), heap_.end(), spatial_detail::closer);
    }
  }

  void search(std::int32_t node_id, const float* query, std::size_t k) const {
    const TreeNode& node = nodes_[static_cast<std::size_t>(node_id)];
    if (node.axis < 0) {
      for (std::int64_t i = node.begin; i < node.end; ++i) consider(query, perm_[static_cast<std::size_t>(i)], k);
      return;
    }
    const float delta = query[node.axis] - node.split;
    const std::int32_t near = delta < 0.0f ? node.left : node.right;
    const std::int32_t far = delta < 0.0f ? node.right : node.left;
    search(near, query, k);
    // Visit the far side unless it provably cannot improve the heap; use
    // strict > so equal-distance candidates still get tie-resolved by index.
    if (heap_.size() < k || !(delta * delta > heap_.front().d2)) search(far, query, k);
  }

  const float* points_;
  std::int64_t n_;
  std::vector<std::int32_t> perm_;
  std::vector<TreeNode> nodes_;
  std::int32_t root_ = -1;
  mutable std::vector<spatial_detail::Candidate> heap_;
};

/// Greedy farthest point sampling. The first pick is `start`; each later
/// pick maximizes the minimum distance to the picked set (ties to the
/// lowest index). Deterministic given `start`.
inline SampleSet fps(const std::vector<float>& positions, std::int64_t m, std::int64_t start = 0) {
  const std::int64_t n = static_cast<std::int64_t>(positions.size() / 3);
  if (m < 1 || m > n) throw ValueError("fps: sample count out of range");
  if (start < 0 || start >= n) throw IndexError("fps: start index out of range");

  SampleSet out;
  out.indices.reserve(static_cast<std::size_t>(m));
  out.positions.reserve(static_cast<std::size_t>(m * 3));
  std::vector<float> min_d2(static_cast<std::size_t>(n), std::numeric_limits<float>::max());

  std::int64_t pick = start;
  for (std::int64_t s = 0; s < m; ++s) {
    out.indices.push_back(static_cast<std::int32_t>(pick));
    const float* p = positions.data() + pick * 3;
    out.positions.insert(out.positions.end(), p, p + 3);
    std::int64_t next = -1;
    float best = -1.0f;
    for (std::int64_t i = 0; i < n; ++i) {
      const float d2 = spatial_detail::sq_dist3(positions.data() + i * 3, p);
      float& m2 = min_d2[static_cast<std::size_t>(i)];
      if (d2 < m2) m2 = d2;
      if (m2 > best) {
        best = m2;
        next = i;
      }
    }
    pick = next;
  }
  return out;
}

/// k nearest reference points per query, rows sorted by (distance, index).
/// When k exceeds the reference size, rows are padded by repeating the
/// nearest reference point.
inline NeighborIndex knn(const std::vector<float>& query, const std::vector<float>& reference, int k) {
  const std::int64_t nq = static_cast<std::int64_t>(query.size() / 3);
  const std::int64_t nr = static_cast<std::int64_t>(reference.size() / 3);
  if (nr < 1) throw ValueError("knn: empty reference set");
  if (k < 1) throw ValueError("knn: k must be >= 1");

  KdTree tree(reference);
  const int k_eff = static_cast<int>(std::min<std::int64_t>(k, nr));
  NeighborIndex out;
  out.n = nq;
  out.k = k;
  out.indices.resize(static_cast<std::size_t>(nq * k));
  std::vector<std::int32_t> row;
  for (std::int64_t i = 0; i < nq; ++i) {
    tree.query_knn(query.data() + i * 3, k_eff, row);
    std::int32_t* dst = out.indices.data() + i * k;
    for (int j = 0; j < k_eff; ++j) dst[j] = row[static_cast<std::size_t>(j)];
    for (int j = k_eff; j < k; ++j) dst[j] = row[0];
  }
  return out;
}

/// Dilated kNN: searches k*d neighbors, keeps ranks 0, d, 2d, ...
inline NeighborIndex dilated_knn(const std::vector<float>& query, const std::vector<float>& reference, int k,
                                 int dilation) {
  if (dilation < 1) throw ValueError("dilated_knn: dilation must be >= 1");
  if (dilation == 1) return knn(query, reference, k);
  NeighborIndex wide = knn(query, reference, k * dilation);
  NeighborIndex out;
  out.n = wide.n;
  out.k = k;
  out.indices.resize(static_cast<std::size_t>(out.n * k));
  for (std::int64_t i = 0; i < out.n; ++i)
    for (int j = 0; j < k; ++j)
      out.indices[static_cast<std::size_t>(i * k + j)] = wide.at(i, static_cast<std::int64_t>(j) * dilation);
  return out;
}

/// Index of the nearest low-resolution point for every high-resolution
/// point; the gather half of nearest-neighbor upsampling.
inline std::vector<std::int32_t> nearest_indices(const std::vector<float>& low_pos,
                                                 const std::vector<float>& high_pos) {
  const std::int64_t m = static_cast<std::int64_t>(low_pos.size() / 3);
  if (m < 1) throw ValueError("nearest_indices: empty low-resolution set");
  KdTree tree(low_pos);
  const std::int64_t n = static_cast<std::int64_t>(high_pos.size() / 3);
  std::vector<std::int32_t> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = tree.nearest(high_pos.data() + i * 3);
  return out;
}

/// Upsamples features by copying each high-resolution point's nearest
/// low-resolution feature row.
inline std::vector<float> nn_interpolate(const std::vector<float>& low_pos, const std::vector<float>& low_feat,
                                         std::int64_t channels, const std::vector<float>& high_pos) {
  const std::vector<std::int32_t> idx = nearest_indices(low_pos, high_pos);
  std::vector<float> out(idx.size() * static_cast<std::size_t>(channels));
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(low_feat.data() + static_cast<std::int64_t>(idx[i]) * channels, channels,
                out.data() + static_cast<std::int64_t>(i) * channels);
  return out;
}

/// Mean neighbor-to-centroid distance and mean per-neighborhood variance.
struct NeighborhoodStats {
  double mean_dist = 0.0;
  double mean_variance = 0.0;
};

/// Stats of the neighborhoods defined by `nbr` over `values` (n x dim rows,
/// centroids are the rows themselves). When `shifted` is non-empty it
/// supplies the neighbor values (n*k*dim) in place of gathered rows, so
/// callers can difference shifted vs. raw neighborhoods.
inline NeighborhoodStats neighborhood_stats(const std::vector<float>& values, std::int64_t dim,
                                            const NeighborIndex& nbr, const std::vector<float>& shifted = {}) {
  const std::int64_t n = nbr.n, k = nbr.k;
  if (!shifted.empty() && static_cast<std::int64_t>(shifted.size()) != n * k * dim)
    throw ShapeError("neighborhood_stats: shifted size mismatch");
  NeighborhoodStats stats;
  if (n == 0 || k == 0) return stats;
  std::vector<double> mean(static_cast<std::size_t>(dim));
  for (std::int64_t i = 0; i < n; ++i) {
    const float* center = values.data() + i * dim;
    std::fill(mean.begin(), mean.end(), 0.0);
    double dist_acc = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      const float* v = shifted.empty() ? values.data() + static_cast<std::int64_t>(nbr.at(i, j)) * dim
                                       : shifted.data() + (i * k + j) * dim;
      double sq = 0.0;
      for (std::int64_t d = 0; d < dim; ++d) {
        const double diff = static_cast<double>(v[d]) - center[d];
        sq += diff * diff;
        mean[static_cast<std::size_t>(d)] += v[d];
      }
      dist_acc += std::sqrt(sq);
    }
    for (std::int64_t d = 0; d < dim; ++d) mean[static_cast<std::size_t>(d)] /= static_cast<double>(k);
    double var_acc = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      const float* v = shifted.empty() ? values.data() + static_cast<std::int64_t>(nbr.at(i, j)) * dim
                                       : shifted.data() + (i * k + j) * dim;
      for (std::int64_t d = 0; d < dim; ++d) {
        const double diff = static_cast<double>(v[d]) - mean[static_cast<std::size_t>(d)];
        var_acc += diff * diff;
      }
    }
    stats.mean_dist += dist_acc / static_cast<double>(k);
    stats.mean_variance += var_acc / static_cast<double>(k);
  }
  stats.mean_dist /= static_cast<double>(n);
  stats.mean_variance /= static_cast<double>(n);
  return stats;
}

}  // namespace baaf
