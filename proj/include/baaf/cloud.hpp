#pragma once

// Point-cloud container, text/binary serialization, synthetic labeled
// scene generation, and fixed-size crop sampling.

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "baaf/common.hpp"
#include "baaf/spatial.hpp"

namespace baaf {

/// One scene: positions in meters, optional colors in [0,1], optional
/// per-point class labels.
struct PointCloud {
  std::vector<float> positions;      // N*3
  std::vector<float> colors;        // N*3 or empty
  std::vector<std::int32_t> labels;  // N or empty
  int num_classes = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(positions.size() / 3); }
  bool has_colors() const { return !colors.empty(); }
  bool has_labels() const { return !labels.empty(); }

  void validate() const {
    if (size() < 1) throw ValueError("point cloud: empty");
    if (has_colors() && colors.size() != positions.size()) throw ShapeError("point cloud: color count mismatch");
    if (has_labels()) {
      if (static_cast<std::int64_t>(labels.size()) != size()) throw ShapeError("point cloud: label count mismatch");
      for (std::int32_t l : labels)
        if (l < 0 || l >= num_classes) throw ValueError("point cloud: label outside [0, num_classes)");
    }
    for (float c : colors)
      if (c < 0.0f || c > 1.0f) throw ValueError("point cloud: color outside [0, 1]");
  }
};

enum class CloudFormat { text, binary };

namespace cloud_detail {

constexpr char kMagic[4] = {'P', 'C', 'S', 'B'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagColors = 1;
constexpr std::uint32_t kFlagLabels = 2;

inline void infer_classes(PointCloud& cloud) {
  cloud.num_classes = 0;
  for (std::int32_t l : cloud.labels) cloud.num_classes = std::max(cloud.num_classes, l + 1);
}

// Colors arriving in 0..255 are rescaled to [0,1].
inline void normalize_colors(PointCloud& cloud) {
  float mx = 0.0f;
  for (float c : cloud.colors) mx = std::max(mx, c);
  if (mx > 1.0f)
    for (float& c : cloud.colors) c /= 255.0f;
}

template <typename T>
void write_raw(std::ostream& os, const T* data, std::size_t count) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
}

template <typename T>
void read_raw(std::istream& is, T* data, std::size_t count) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  if (!is) throw IoError("cloud: truncated binary file");
}

}  // namespace cloud_detail

/// Parses a text cloud: one `x y z [r g b] [label]` record per line,
/// '#' starts a comment. All records must carry the same fields.
inline PointCloud load_cloud_text(std::istream& is) {
  PointCloud cloud;
  std::string line;
  int layout = -1;  // token count of the first record
  std::int64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<std::string> tokens;
    std::string tok;
    while (ls >> tok) tokens.push_back(tok);
    if (tokens.empty()) continue;
    const int count = static_cast<int>(tokens.size());
    if (count != 3 && count != 4 && count != 6 && count != 7)
      throw ParseError("cloud: line " + std::to_string(line_no) + ": expected 3, 4, 6, or 7 fields, got " +
                       std::to_string(count));
    if (layout < 0) layout = count;
    if (count != layout)
      throw ParseError("cloud: line " + std::to_string(line_no) + ": inconsistent record layout");

    auto parse_f = [&](const std::string& s) {
      char* end = nullptr;
      const float v = std::strtof(s.c_str(), &end);
      if (end == s.c_str() || *end != '\0')
        throw ParseError("cloud: line " + std::to_string(line_no) + ": bad number '" + s + "'");
      return v;
    };
    for (int i = 0; i < 3; ++i) cloud.positions.push_back(parse_f(tokens[static_cast<std::size_t>(i)]));
    const bool has_rgb = count >= 6;
    if (has_rgb)
      for (int i = 3; i < 6; ++i) cloud.colors.push_back(parse_f(tokens[static_cast<std::size_t>(i)]));
    if (count == 4 || count == 7) {
      const std::string& s = tokens.back();
      char* end = nullptr;
      const long l = std::strtol(s.c_str(), &end, 10);
      if (end == s.c_str() || *end != '\0' || l < 0)
        throw ParseError("cloud: line " + std::to_string(line_no) + ": bad label '" + s + "'");
      cloud.labels.push_back(static_cast<std::int32_t>(l));
    }
  }
  if (cloud.positions.empty()) throw ParseError("cloud: no records");
  cloud_detail::infer_classes(cloud);
  cloud_detail::normalize_colors(cloud);
  cloud.validate();
  return cloud;
}

inline PointCloud load_cloud_binary(std::istream& is) {
  char magic[4];
  cloud_detail::read_raw(is, magic, 4);
  if (std::memcmp(magic, cloud_detail::kMagic, 4) != 0) throw IoError("cloud: bad magic bytes");
  std::uint32_t version = 0, n = 0, flags = 0;
  cloud_detail::read_raw(is, &version, 1);
  if (version != cloud_detail::kVersion)
    throw IoError("cloud: unsupported format version " + std::to_string(version));
  cloud_detail::read_raw(is, &n, 1);
  cloud_detail::read_raw(is, &flags, 1);
  PointCloud cloud;
  cloud.positions.resize(static_cast<std::size_t>(n) * 3);
  cloud_detail::read_raw(is, cloud.positions.data(), cloud.positions.size());
  if (flags & cloud_detail::kFlagColors) {
    cloud.colors.resize(static_cast<std::size_t>(n) * 3);
    cloud_detail::read_raw(is, cloud.colors.data(), cloud.colors.size());
  }
  if (flags & cloud_detail::kFlagLabels) {
    cloud.labels.resize(n);
    cloud_detail::read_raw(is, cloud.labels.data(), cloud.labels.size());
  }
  cloud_detail::infer_classes(cloud);
  cloud_detail::normalize_colors(cloud);
  cloud.validate();
  return cloud;
}

inline PointCloud load_cloud(const std::string& path, CloudFormat format) {
  std::ifstream is(path, format == CloudFormat::binary ? std::ios::binary : std::ios::in);
  if (!is) throw IoError("cloud: cannot open '" + path + "'");
  return format == CloudFormat::text ? load_cloud_text(is) : load_cloud_binary(is);
}

inline void save_cloud_text(std::ostream& os, const PointCloud& cloud) {
  char buf[64];
  for (std::int64_t i = 0; i < cloud.size(); ++i) {
    std::string line;
    for (int d = 0; d < 3; ++d) {
      std::snprintf(buf, sizeof buf, "%.9g", cloud.positions[static_cast<std::size_t>(i * 3 + d)]);
      line += buf;
      line += d < 2 ? " " : "";
    }
    if (cloud.has_colors())
      for (int d = 0; d < 3; ++d) {
        std::snprintf(buf, sizeof buf, " %.9g", cloud.colors[static_cast<std::size_t>(i * 3 + d)]);
        line += buf;
      }
    if (cloud.has_labels()) {
      std::snprintf(buf, sizeof buf, " %d", cloud.labels[static_cast<std::size_t>(i)]);
      line += buf;
    }
    os << line << '\n';
  }
}

inline void save_cloud_binary(std::ostream& os, const PointCloud& cloud) {
  os.write(cloud_detail::kMagic, 4);
  const std::uint32_t version = cloud_detail::kVersion;
  const std::uint32_t n = static_cast<std::uint32_t>(cloud.size());
  std::uint32_t flags = 0;
  if (cloud.has_colors()) flags |= cloud_detail::kFlagColors;
  if (cloud.has_labels()) flags |= cloud_detail::kFlagLabels;
  cloud_detail::write_raw(os, &version, 1);
  cloud_detail::write_raw(os, &n, 1);
  cloud_detail::write_raw(os, &flags, 1);
  cloud_detail::write_raw(os, cloud.positions.data(), cloud.positions.size());
  if (cloud.has_colors()) cloud_detail::write_raw(os, cloud.colors.data(), cloud.colors.size());
  if (cloud.has_labels()) cloud_detail::write_raw(os, cloud.labels.data(), cloud.labels.size());
}

inline void save_cloud(const std::string& path, const PointCloud& cloud, CloudFormat format) {
  std::ofstream os(path, format == CloudFormat::binary ? std::ios::binary : std::ios::out);
  if (!os) throw IoError("cloud: cannot write '" + path + "'");
  if (format == CloudFormat::text)
    save_cloud_text(os, cloud);
  else
    save_cloud_binary(os, cloud);
  if (!os) throw IoError("cloud: write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Room layout for the synthetic scene generator.
struct GenSpec {
  float room_w = 8.0f;
  float room_d = 6.0f;
  float room_h = 3.0f;
  int num_boxes = 6;
  int num_pillars = 4;
  int num_classes = 6;
  std::int64_t num_points = 4096;
  std::uint64_t seed = 1;
};

/// Deterministic labeled scene made of planar/box primitives: floor,
/// walls, boxes, pillars, ceiling, scattered clutter; classes beyond six
/// become extra box-shaped objects at distinct heights. Every requested
/// class receives a nonzero share of points.
inline PointCloud gen_synthetic(const GenSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("gen_synthetic: at least 2 classes required");
  if (spec.room_w <= 0.0f || spec.room_d <= 0.0f || spec.room_h <= 0.0f)
    throw ConfigError("gen_synthetic: degenerate room dimensions");
  if (spec.num_points < spec.num_classes) throw ConfigError("gen_synthetic: too few points for class count");

  Rng rng(spec.seed);
  const int q = spec.num_classes;
  const float w = spec.room_w, d = spec.room_d, h = spec.room_h;

  // Per-class point budget, proportional with every class nonzero.
  std::vector<double> weight(static_cast<std::size_t>(q));
  const double base_weights[6] = {0.26, 0.22, 0.18, 0.12, 0.12, 0.10};
  double total_w = 0.0;
  for (int c = 0; c < q; ++c) {
    weight[static_cast<std::size_t>(c)] = c < 6 ? base_weights[c] : 0.08;
    total_w += weight[static_cast<std::size_t>(c)];
  }
  std::vector<std::int64_t> budget(static_cast<std::size_t>(q));
  std::int64_t assigned = 0;
  for (int c = 0; c < q; ++c) {
    budget[static_cast<std::size_t>(c)] =
        std::max<std::int64_t>(1, static_cast<std::int64_t>(static_cast<double>(spec.num_points) *
                                                            weight[static_cast<std::size_t>(c)] / total_w));
    assigned += budget[static_cast<std::size_t>(c)];
  }
  budget[0] += spec.num_points - assigned;  // remainder (or deficit) to the floor

  struct Box {
    float cx, cy, sx, sy, z0, z1;
  };
  auto make_boxes = [&](int count, float min_s, float max_s, float min_h, float max_h, float z0) {
    std::vector<Box> boxes;
    for (int b = 0; b < count; ++b) {
      Box box;
      box.sx = min_s + (max_s - min_s) * rng.uniform_f();
      box.sy = min_s + (max_s - min_s) * rng.uniform_f();
      box.cx = box.sx / 2 + (w - box.sx) * rng.uniform_f();
      box.cy = box.sy / 2 + (d - box.sy) * rng.uniform_f();
      box.z0 = z0;
      box.z1 = z0 + min_h + (max_h - min_h) * rng.uniform_f();
      boxes.push_back(box);
    }
    return boxes;
  };
  const std::vector<Box> boxes = make_boxes(std::max(1, spec.num_boxes), 0.5f, 1.2f, 0.3f, 0.9f, 0.0f);
  std::vector<Box> pillars;
  for (int b = 0; b < std::max(1, spec.num_pillars); ++b) {
    Box p;
    p.sx = p.sy = 0.25f;
    p.cx = 0.5f + (w - 1.0f) * rng.uniform_f();
    p.cy = 0.5f + (d - 1.0f) * rng.uniform_f();
    p.z0 = 0.0f;
    p.z1 = h;
    pillars.push_back(p);
  }

  auto sample_box_surface = [&](const Box& b, float* p) {
    // Faces: 0 top, 1..4 sides.
    const int face = static_cast<int>(rng.uniform_int(5));
    const float u = rng.uniform_f(), v = rng.uniform_f();
    switch (face) {
      case 0:
        p[0] = b.cx + (u - 0.5f) * b.sx;
        p[1] = b.cy + (v - 0.5f) * b.sy;
        p[2] = b.z1;
        break;
      case 1:
      case 2:
        p[0] = b.cx + (face == 1 ? -0.5f : 0.5f) * b.sx;
        p[1] = b.cy + (u - 0.5f) * b.sy;
        p[2] = b.z0 + v * (b.z1 - b.z0);
        break;
      default:
        p[0] = b.cx + (u - 0.5f) * b.sx;
        p[1] = b.cy + (face == 3 ? -0.5f : 0.5f) * b.sy;
        p[2] = b.z0 + v * (b.z1 - b.z0);
        break;
    }
  };

  // Colors are deliberately ambiguous between confusable classes: boxes and
  // pillars share a palette entry, as do walls and ceilings, so those
  // classes are separable only through geometric context.
  static const float palette[8][3] = {{0.45f, 0.45f, 0.45f}, {0.85f, 0.82f, 0.70f}, {0.60f, 0.35f, 0.25f},
                                      {0.60f, 0.35f, 0.25f}, {0.85f, 0.82f, 0.70f}, {0.20f, 0.75f, 0.25f},
                                      {0.85f, 0.60f, 0.15f}, {0.60f, 0.20f, 0.70f}};

  PointCloud cloud;
  cloud.num_classes = q;
  const std::int64_t n = spec.num_points;
  cloud.positions.reserve(static_cast<std::size_t>(n) * 3);
  cloud.colors.reserve(static_cast<std::size_t>(n) * 3);
  cloud.labels.reserve(static_cast<std::size_t>(n));

  for (int c = 0; c < q; ++c) {
    // Extra classes are free-standing boxes stacked at distinct heights.
    std::vector<Box> extra;
    if (c >= 6) {
      Box b;
      b.sx = b.sy = 0.6f;
      b.cx = 0.6f + (w - 1.2f) * rng.uniform_f();
      b.cy = 0.6f + (d - 1.2f) * rng.uniform_f();
      b.z0 = 0.3f * static_cast<float>(c - 5);
      b.z1 = b.z0 + 0.25f;
      extra.push_back(b);
    }
    for (std::int64_t i = 0; i < budget[static_cast<std::size_t>(c)]; ++i) {
      float p[3];
      switch (c) {
        case 0:  // floor
          p[0] = w * rng.uniform_f();
          p[1] = d * rng.uniform_f();
          p[2] = 0.02f * rng.uniform_f();
          break;
        case 1: {  // one of four walls
          const int wall = static_cast<int>(rng.uniform_int(4));
          const float along = rng.uniform_f();
          p[2] = h * rng.uniform_f();
          if (wall < 2) {
            p[0] = wall == 0 ? 0.0f : w;
            p[1] = d * along;
          } else {
            p[0] = w * along;
            p[1] = wall == 2 ? 0.0f : d;
          }
          break;
        }
        case 2:
          sample_box_surface(boxes[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(boxes.size())))], p);
          break;
        case 3:
          sample_box_surface(pillars[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(pillars.size())))], p);
          break;
        case 4:  // ceiling
          p[0] = w * rng.uniform_f();
          p[1] = d * rng.uniform_f();
          p[2] = h - 0.02f * rng.uniform_f();
          break;
        case 5:  // clutter
          p[0] = w * rng.uniform_f();
          p[1] = d * rng.uniform_f();
          p[2] = 0.1f + (h - 0.2f) * rng.uniform_f();
          break;
        default:
          sample_box_surface(extra[0], p);
          break;
      }
      for (int dd = 0; dd < 3; ++dd)
        cloud.positions.push_back(p[dd] + 0.01f * (rng.uniform_f() - 0.5f));
      const float* base = palette[c % 8];
      for (int dd = 0; dd < 3; ++dd) {
        const float col = base[dd] + 0.2f * (rng.uniform_f() - 0.5f);
        cloud.colors.push_back(std::min(1.0f, std::max(0.0f, col)));
      }
      cloud.labels.push_back(c);
    }
  }

  // Shuffle so crops mix classes.
  const std::int64_t total = cloud.size();
  for (std::int64_t i = total - 1; i > 0; --i) {
    const std::int64_t j = rng.uniform_int(i + 1);
    for (int dd = 0; dd < 3; ++dd) {
      std::swap(cloud.positions[static_cast<std::size_t>(i * 3 + dd)], cloud.positions[static_cast<std::size_t>(j * 3 + dd)]);
      std::swap(cloud.colors[static_cast<std::size_t>(i * 3 + dd)], cloud.colors[static_cast<std::size_t>(j * 3 + dd)]);
    }
    std::swap(cloud.labels[static_cast<std::size_t>(i)], cloud.labels[static_cast<std::size_t>(j)]);
  }
  cloud.validate();
  return cloud;
}

// ---------------------------------------------------------------------------
// Crops

/// Fixed-size training sample request.
struct CropSpec {
  std::int64_t crop_size = 512;
  std::uint64_t seed = 1;
};

/// Spatially contiguous fixed-size sample: the crop_size nearest neighbors
/// of a randomly chosen center point. Clouds smaller than the crop are
/// padded by resampling with replacement.
inline PointCloud sample_crop(const PointCloud& cloud, const CropSpec& spec) {
  const std::int64_t n = cloud.size();
  if (n < 1) throw ValueError("sample_crop: empty cloud");
  Rng rng(spec.seed);
  const std::int64_t center = rng.uniform_int(n);

  std::vector<std::int32_t> pick;
  if (spec.crop_size <= n) {
    KdTree tree(cloud.positions);
    tree.query_knn(cloud.positions.data() + center * 3, static_cast<int>(spec.crop_size), pick);
  } else {
    pick.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) pick[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);
    for (std::int64_t i = n; i < spec.crop_size; ++i)
      pick.push_back(static_cast<std::int32_t>(rng.uniform_int(n)));
  }

  PointCloud crop;
  crop.num_classes = cloud.num_classes;
  crop.positions.reserve(pick.size() * 3);
  for (std::int32_t idx : pick) {
    const float* p = cloud.positions.data() + static_cast<std::int64_t>(idx) * 3;
    crop.positions.insert(crop.positions.end(), p, p + 3);
    if (cloud.has_colors()) {
      const float* c = cloud.colors.data() + static_cast<std::int64_t>(idx) * 3;
      crop.colors.insert(crop.colors.end(), c, c + 3);
    }
    if (cloud.has_labels()) crop.labels.push_back(cloud.labels[static_cast<std::size_t>(idx)]);
  }
  return crop;
}

}  // namespace baaf
