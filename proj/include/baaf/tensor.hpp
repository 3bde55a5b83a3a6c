#pragma once

// Reverse-mode automatic differentiation over dense float32 tensors.
//
// The graph is define-by-run: every operation on tensors that require
// gradients records a node with parent links and a backprop closure.
// backward() replays those closures in reverse execution order. Leaf
// gradients accumulate across backward calls until zero_grad().

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <unordered_set>
#include <utility>
#include <vector>

#include "baaf/common.hpp"

namespace baaf {

using Index = std::int64_t;
using Shape = std::vector<Index>;

namespace detail {

inline Index shape_product(const Shape& s) {
  Index p = 1;
  for (Index d : s) p *= d;
  return p;
}

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  Index size() const { return static_cast<Index>(data.size()); }
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline std::vector<float>& grad_buf(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0f);
  return n.grad;
}

inline void check_finite(const char* op, const Node& n) {
#ifndef NDEBUG
  for (float v : n.data) {
    if (!std::isfinite(v)) throw ValueError(std::string(op) + ": non-finite value in forward output");
  }
#else
  (void)op;
  (void)n;
#endif
}

}  // namespace detail

/// Dense n-dimensional float32 value, row-major, with an optional gradient
/// record. Copying a Tensor copies the handle, not the storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0f, requires_grad);
  }

  static Tensor filled(Shape shape, float value, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node>();
    const Index total = detail::shape_product(shape);
    if (total < 0) throw ShapeError("tensor: negative extent");
    n->shape = std::move(shape);
    n->data.assign(static_cast<std::size_t>(total), value);
    n->requires_grad = requires_grad;
    n->seq = detail::next_seq();
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false) {
    const Index total = detail::shape_product(shape);
    if (total != static_cast<Index>(data.size()))
      throw ShapeError("tensor: data length does not match shape");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->seq = detail::next_seq();
    return Tensor(std::move(n));
  }

  static Tensor scalar(float v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
  Index size() const { return node_->size(); }

  float* data() { return node_->data.data(); }
  const float* data() const { return node_->data.data(); }
  std::vector<float>& values() { return node_->data; }
  const std::vector<float>& values() const { return node_->data; }

  /// Value of a size-1 tensor.
  float item() const {
    if (size() != 1) throw ShapeError("item: tensor is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient buffer; empty until a backward pass reaches this tensor.
  const std::vector<float>& grad() const { return node_->grad; }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Learnable batch normalization state for one channel axis, plus running
/// statistics used in eval mode. Running stats follow
/// running = momentum * running + (1 - momentum) * batch.
struct BatchNorm {
  Tensor scale;
  Tensor shift;
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.9f;
  float eps = 1e-6f;

  static BatchNorm make(Index channels) {
    BatchNorm bn;
    bn.scale = Tensor::filled({channels}, 1.0f, true);
    bn.shift = Tensor::zeros({channels}, true);
    bn.running_mean = Tensor::zeros({channels});
    bn.running_var = Tensor::filled({channels}, 1.0f);
    return bn;
  }
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<Tensor> parents) {
  auto n = std::make_shared<Node>();
  const Index total = shape_product(shape);
  n->shape = std::move(shape);
  n->data.assign(static_cast<std::size_t>(total), 0.0f);
  n->seq = next_seq();
  bool rg = false;
  for (const Tensor& p : parents) rg = rg || p.requires_grad();
  if (rg) {
    n->requires_grad = true;
    n->leaf = false;
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node());
  }
  return Tensor(std::move(n));
}

inline bool recording(const Tensor& t) { return !t.node()->leaf; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops

inline Tensor relu(const Tensor& x) {
  Tensor out = detail::make_op(x.shape(), {x});
  const float* xd = x.data();
  float* od = out.data();
  const Index n = x.size();
  for (Index i = 0; i < n; ++i) od[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
  if (detail::recording(out)) {
    out.node()->backprop = [](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      for (Index i = 0; i < self.size(); ++i)
        if (px.data[static_cast<std::size_t>(i)] > 0.0f) g[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i)];
    };
  }
  return out;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": shape mismatch");
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = detail::make_op(a.shape(), {a, b});
  const Index n = a.size();
  for (Index i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::recording(out)) {
    out.node()->backprop = [](detail::Node& self) {
      for (int p = 0; p < 2; ++p) {
        auto& pn = *self.parents[static_cast<std::size_t>(p)];
        if (!pn.requires_grad) continue;
        auto& g = detail::grad_buf(pn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = detail::make_op(a.shape(), {a, b});
  const Index n = a.size();
  for (Index i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::recording(out)) {
    out.node()->backprop = [](detail::Node& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        auto& g = detail::grad_buf(pa);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        auto& g = detail::grad_buf(pb);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    };
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = detail::make_op(a.shape(), {a, b});
  const Index n = a.size();
  for (Index i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::recording(out)) {
    out.node()->backprop = [](detail::Node& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        auto& g = detail::grad_buf(pa);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
      }
      if (pb.requires_grad) {
        auto& g = detail::grad_buf(pb);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
      }
    };
  }
  return out;
}

inline Tensor mul_scalar(const Tensor& x, float s) {
  Tensor out = detail::make_op(x.shape(), {x});
  for (Index i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * s;
  if (detail::recording(out)) {
    out.node()->backprop = [s](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    };
  }
  return out;
}

/// out = s * x where s is a size-1 tensor; differentiable in both.
inline Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar_tensor: scale must be size 1");
  Tensor out = detail::make_op(x.shape(), {x, s});
  const float sv = s.data()[0];
  for (Index i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * sv;
  if (detail::recording(out)) {
    out.node()->backprop = [](detail::Node& self) {
      auto& px = *self.parents[0];
      auto& ps = *self.parents[1];
      const float sv = ps.data[0];
      if (px.requires_grad) {
        auto& g = detail::grad_buf(px);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sv;
      }
      if (ps.requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < px.data.size(); ++i) acc += static_cast<double>(self.grad[i]) * px.data[i];
        detail::grad_buf(ps)[0] += static_cast<float>(acc);
      }
    };
  }
  return out;
}

inline Tensor sum(const Tensor& x) {
  Tensor out = detail::make_op({1}, {x});
  double acc = 0.0;
  for (Index i = 0; i < x.size(); ++i) acc += x.data()[i];
  out.data()[0] = static_cast<float>(acc);
  if (detail::recording(out)) {
    out.node()->backprop = [](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      const float gv = self.grad[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv;
    };
  }
  return out;
}

/// Sum over the middle axis of an (n, k, c) tensor -> (n, c).
inline Tensor sum_axis(const Tensor& x, int axis) {
  if (x.rank() != 3 || axis != 1) throw ShapeError("sum_axis: only rank-3 axis 1 is supported");
  const Index n = x.dim(0), k = x.dim(1), c = x.dim(2);
  Tensor out = detail::make_op({n, c}, {x});
  const float* xd = x.data();
  float* od = out.data();
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) {
      const float* row = xd + (i * k + j) * c;
      float* orow = od + i * c;
      for (Index cc = 0; cc < c; ++cc) orow[cc] += row[cc];
    }
  if (detail::recording(out)) {
    out.node()->backprop = [n, k, c](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < k; ++j)
          for (Index cc = 0; cc < c; ++cc)
            g[static_cast<std::size_t>((i * k + j) * c + cc)] += self.grad[static_cast<std::size_t>(i * c + cc)];
    };
  }
  return out;
}

/// Mean over rows of an (n, c) tensor -> (1, c).
inline Tensor mean_axis0(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("mean_axis0: rank-2 input required");
  const Index n = x.dim(0), c = x.dim(1);
  if (n == 0) throw ValueError("mean_axis0: empty input");
  Tensor out = detail::make_op({1, c}, {x});
  for (Index cc = 0; cc < c; ++cc) {
    double acc = 0.0;
    for (Index i = 0; i < n; ++i) acc += x.data()[i * c + cc];
    out.data()[cc] = static_cast<float>(acc / static_cast<double>(n));
  }
  if (detail::recording(out)) {
    out.node()->backprop = [n, c](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      const float inv = 1.0f / static_cast<float>(n);
      for (Index i = 0; i < n; ++i)
        for (Index cc = 0; cc < c; ++cc)
          g[static_cast<std::size_t>(i * c + cc)] += self.grad[static_cast<std::size_t>(cc)] * inv;
    };
  }
  return out;
}

/// out[i, :] = w[i] * x[i, :], with w of shape (n) or (n, 1).
inline Tensor scale_rows(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2) throw ShapeError("scale_rows: rank-2 input required");
  const Index n = x.dim(0), c = x.dim(1);
  if (w.size() != n) throw ShapeError("scale_rows: weight length must match rows");
  Tensor out = detail::make_op(x.shape(), {x, w});
  for (Index i = 0; i < n; ++i) {
    const float wv = w.data()[i];
    for (Index cc = 0; cc < c; ++cc) out.data()[i * c + cc] = x.data()[i * c + cc] * wv;
  }
  if (detail::recording(out)) {
    out.node()->backprop = [n, c](detail::Node& self) {
      auto& px = *self.parents[0];
      auto& pw = *self.parents[1];
      if (px.requires_grad) {
        auto& g = detail::grad_buf(px);
        for (Index i = 0; i < n; ++i) {
          const float wv = pw.data[static_cast<std::size_t>(i)];
          for (Index cc = 0; cc < c; ++cc)
            g[static_cast<std::size_t>(i * c + cc)] += self.grad[static_cast<std::size_t>(i * c + cc)] * wv;
        }
      }
      if (pw.requires_grad) {
        auto& g = detail::grad_buf(pw);
        for (Index i = 0; i < n; ++i) {
          double acc = 0.0;
          for (Index cc = 0; cc < c; ++cc)
            acc += static_cast<double>(self.grad[static_cast<std::size_t>(i * c + cc)]) * px.data[static_cast<std::size_t>(i * c + cc)];
          g[static_cast<std::size_t>(i)] += static_cast<float>(acc);
        }
      }
    };
  }
  return out;
}

/// Extracts column j of an (n, m) tensor as (n, 1).
inline Tensor column(const Tensor& x, Index j) {
  if (x.rank() != 2) throw ShapeError("column: rank-2 input required");
  const Index n = x.dim(0), m = x.dim(1);
  if (j < 0 || j >= m) throw IndexError("column: index out of range");
  Tensor out = detail::make_op({n, 1}, {x});
  for (Index i = 0; i < n; ++i) out.data()[i] = x.data()[i * m + j];
  if (detail::recording(out)) {
    out.node()->backprop = [n, m, j](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      for (Index i = 0; i < n; ++i) g[static_cast<std::size_t>(i * m + j)] += self.grad[static_cast<std::size_t>(i)];
    };
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int rank = xs[0].rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat: invalid axis");
  Shape out_shape = xs[0].shape();
  Index axis_total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && t.dim(d) != xs[0].dim(d)) throw ShapeError("concat: shape mismatch off the concat axis");
    axis_total += t.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  Index outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= xs[0].dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= xs[0].dim(d);

  Tensor out = detail::make_op(out_shape, xs);
  std::vector<Index> chunks(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) chunks[t] = xs[t].dim(axis) * inner;
  const Index out_chunk = axis_total * inner;

  for (Index o = 0; o < outer; ++o) {
    Index offset = 0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
      std::memcpy(out.data() + o * out_chunk + offset, xs[t].data() + o * chunks[t],
                  static_cast<std::size_t>(chunks[t]) * sizeof(float));
      offset += chunks[t];
    }
  }
  if (detail::recording(out)) {
    out.node()->backprop = [outer, out_chunk, chunks](detail::Node& self) {
      for (Index o = 0; o < outer; ++o) {
        Index offset = 0;
        for (std::size_t t = 0; t < self.parents.size(); ++t) {
          auto& pn = *self.parents[t];
          if (pn.requires_grad) {
            auto& g = detail::grad_buf(pn);
            for (Index i = 0; i < chunks[t]; ++i)
              g[static_cast<std::size_t>(o * chunks[t] + i)] += self.grad[static_cast<std::size_t>(o * out_chunk + offset + i)];
          }
          offset += chunks[t];
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neural-network ops

/// Per-row affine map: out[r, j] = sum_k x[r, k] * w[k, j] + b[j].
/// x may have any rank >= 2; leading axes are treated as rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() < 2 || w.rank() != 2 || b.rank() != 1) throw ShapeError("linear: bad operand ranks");
  const Index cin = x.dim(x.rank() - 1);
  const Index cout = w.dim(1);
  if (w.dim(0) != cin) throw ShapeError("linear: inner dimensions disagree");
  if (b.dim(0) != cout) throw ShapeError("linear: bias length mismatch");
  const Index rows = x.size() / cin;

  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor out = detail::make_op(out_shape, {x, w, b});

  const float* xd = x.data();
  const float* wd = w.data();
  const float* bd = b.data();
  float* od = out.data();
  for (Index r = 0; r < rows; ++r) {
    float* orow = od + r * cout;
    for (Index j = 0; j < cout; ++j) orow[j] = bd[j];
    const float* xrow = xd + r * cin;
    for (Index k = 0; k < cin; ++k) {
      const float a = xrow[k];
      const float* wrow = wd + k * cout;
      for (Index j = 0; j < cout; ++j) orow[j] += a * wrow[j];
    }
  }
  detail::check_finite("linear", *out.node());
  if (detail::recording(out)) {
    out.node()->backprop = [rows, cin, cout](detail::Node& self) {
      auto& px = *self.parents[0];
      auto& pw = *self.parents[1];
      auto& pb = *self.parents[2];
      const float* g = self.grad.data();
      if (px.requires_grad) {
        auto& gx = detail::grad_buf(px);
        for (Index r = 0; r < rows; ++r) {
          const float* grow = g + r * cout;
          float* gxrow = gx.data() + r * cin;
          for (Index k = 0; k < cin; ++k) {
            const float* wrow = pw.data.data() + k * cout;
            float acc = 0.0f;
            for (Index j = 0; j < cout; ++j) acc += grow[j] * wrow[j];
            gxrow[k] += acc;
          }
        }
      }
      if (pw.requires_grad) {
        auto& gw = detail::grad_buf(pw);
        for (Index r = 0; r < rows; ++r) {
          const float* grow = g + r * cout;
          const float* xrow = px.data.data() + r * cin;
          for (Index k = 0; k < cin; ++k) {
            const float a = xrow[k];
            float* gwrow = gw.data() + k * cout;
            for (Index j = 0; j < cout; ++j) gwrow[j] += a * grow[j];
          }
        }
      }
      if (pb.requires_grad) {
        auto& gb = detail::grad_buf(pb);
        for (Index r = 0; r < rows; ++r) {
          const float* grow = g + r * cout;
          for (Index j = 0; j < cout; ++j) gb[static_cast<std::size_t>(j)] += grow[j];
        }
      }
    };
  }
  return out;
}

/// Batch normalization over the last axis; leading axes are rows.
/// Training mode normalizes by batch statistics and updates the running
/// stats in place; eval mode normalizes by the running stats.
inline Tensor batch_norm(const Tensor& x, BatchNorm& bn, bool training) {
  if (x.rank() < 2) throw ShapeError("batch_norm: rank >= 2 input required");
  const Index c = x.dim(x.rank() - 1);
  if (bn.scale.size() != c) throw ShapeError("batch_norm: channel mismatch");
  const Index rows = x.size() / c;
  if (rows == 0) throw ValueError("batch_norm: empty input");

  Tensor out = detail::make_op(x.shape(), {x, bn.scale, bn.shift});
  const float* xd = x.data();
  float* od = out.data();
  const float* sc = bn.scale.data();
  const float* sh = bn.shift.data();

  if (training) {
    auto xhat = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows * c));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(c));
    std::vector<double> mean(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < c; ++j) mean[static_cast<std::size_t>(j)] += xd[r * c + j];
    for (Index j = 0; j < c; ++j) mean[static_cast<std::size_t>(j)] /= static_cast<double>(rows);
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < c; ++j) {
        const double d = xd[r * c + j] - mean[static_cast<std::size_t>(j)];
        var[static_cast<std::size_t>(j)] += d * d;
      }
    for (Index j = 0; j < c; ++j) {
      var[static_cast<std::size_t>(j)] /= static_cast<double>(rows);
      (*inv_std)[static_cast<std::size_t>(j)] =
          static_cast<float>(1.0 / std::sqrt(var[static_cast<std::size_t>(j)] + bn.eps));
    }
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < c; ++j) {
        const float h = (xd[r * c + j] - static_cast<float>(mean[static_cast<std::size_t>(j)])) *
                        (*inv_std)[static_cast<std::size_t>(j)];
        (*xhat)[static_cast<std::size_t>(r * c + j)] = h;
        od[r * c + j] = sc[j] * h + sh[j];
      }
    float* rm = bn.running_mean.data();
    float* rv = bn.running_var.data();
    for (Index j = 0; j < c; ++j) {
      rm[j] = bn.momentum * rm[j] + (1.0f - bn.momentum) * static_cast<float>(mean[static_cast<std::size_t>(j)]);
      rv[j] = bn.momentum * rv[j] + (1.0f - bn.momentum) * static_cast<float>(var[static_cast<std::size_t>(j)]);
    }
    if (detail::recording(out)) {
      out.node()->backprop = [rows, c, xhat, inv_std](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pscale = *self.parents[1];
        auto& pshift = *self.parents[2];
        const float* g = self.grad.data();
        if (pscale.requires_grad) {
          auto& gs = detail::grad_buf(pscale);
          for (Index j = 0; j < c; ++j) {
            double acc = 0.0;
            for (Index r = 0; r < rows; ++r) acc += static_cast<double>(g[r * c + j]) * (*xhat)[static_cast<std::size_t>(r * c + j)];
            gs[static_cast<std::size_t>(j)] += static_cast<float>(acc);
          }
        }
        if (pshift.requires_grad) {
          auto& gb = detail::grad_buf(pshift);
          for (Index j = 0; j < c; ++j) {
            double acc = 0.0;
            for (Index r = 0; r < rows; ++r) acc += g[r * c + j];
            gb[static_cast<std::size_t>(j)] += static_cast<float>(acc);
          }
        }
        if (px.requires_grad) {
          auto& gx = detail::grad_buf(px);
          const float* scale = pscale.data.data();
          for (Index j = 0; j < c; ++j) {
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (Index r = 0; r < rows; ++r) {
              const double dh = static_cast<double>(g[r * c + j]) * scale[j];
              sum_dh += dh;
              sum_dh_h += dh * (*xhat)[static_cast<std::size_t>(r * c + j)];
            }
            const double mean_dh = sum_dh / static_cast<double>(rows);
            const double mean_dh_h = sum_dh_h / static_cast<double>(rows);
            const float inv = (*inv_std)[static_cast<std::size_t>(j)];
            for (Index r = 0; r < rows; ++r) {
              const double dh = static_cast<double>(g[r * c + j]) * scale[j];
              gx[static_cast<std::size_t>(r * c + j)] += static_cast<float>(
                  inv * (dh - mean_dh - (*xhat)[static_cast<std::size_t>(r * c + j)] * mean_dh_h));
            }
          }
        }
      };
    }
  } else {
    const float* rm = bn.running_mean.data();
    const float* rv = bn.running_var.data();
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(c));
    auto mean_copy = std::make_shared<std::vector<float>>(rm, rm + c);
    for (Index j = 0; j < c; ++j)
      (*inv_std)[static_cast<std::size_t>(j)] = 1.0f / std::sqrt(rv[j] + bn.eps);
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < c; ++j)
        od[r * c + j] = sc[j] * (xd[r * c + j] - rm[j]) * (*inv_std)[static_cast<std::size_t>(j)] + sh[j];
    if (detail::recording(out)) {
      out.node()->backprop = [rows, c, inv_std, mean_copy](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pscale = *self.parents[1];
        auto& pshift = *self.parents[2];
        const float* g = self.grad.data();
        const float* scale = pscale.data.data();
        if (px.requires_grad) {
          auto& gx = detail::grad_buf(px);
          for (Index r = 0; r < rows; ++r)
            for (Index j = 0; j < c; ++j)
              gx[static_cast<std::size_t>(r * c + j)] += g[r * c + j] * scale[j] * (*inv_std)[static_cast<std::size_t>(j)];
        }
        if (pscale.requires_grad) {
          auto& gs = detail::grad_buf(pscale);
          for (Index j = 0; j < c; ++j) {
            double acc = 0.0;
            for (Index r = 0; r < rows; ++r) {
              const float h = (px.data[static_cast<std::size_t>(r * c + j)] - (*mean_copy)[static_cast<std::size_t>(j)]) *
                              (*inv_std)[static_cast<std::size_t>(j)];
              acc += static_cast<double>(g[r * c + j]) * h;
            }
            gs[static_cast<std::size_t>(j)] += static_cast<float>(acc);
          }
        }
        if (pshift.requires_grad) {
          auto& gb = detail::grad_buf(pshift);
          for (Index j = 0; j < c; ++j) {
            double acc = 0.0;
            for (Index r = 0; r < rows; ++r) acc += g[r * c + j];
            gb[static_cast<std::size_t>(j)] += static_cast<float>(acc);
          }
        }
      };
    }
  }
  detail::check_finite("batch_norm", *out.node());
  return out;
}

/// Numerically stable softmax along the given axis.
inline Tensor softmax(const Tensor& x, int axis) {
  const int rank = x.rank();
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: invalid axis");
  Index outer = 1, inner = 1;
  const Index n = x.dim(axis);
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= x.dim(d);

  Tensor out = detail::make_op(x.shape(), {x});
  const float* xd = x.data();
  float* od = out.data();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      float mx = -std::numeric_limits<float>::infinity();
      for (Index a = 0; a < n; ++a) mx = std::max(mx, xd[base + a * inner]);
      double denom = 0.0;
      for (Index a = 0; a < n; ++a) denom += std::exp(static_cast<double>(xd[base + a * inner] - mx));
      for (Index a = 0; a < n; ++a)
        od[base + a * inner] = static_cast<float>(std::exp(static_cast<double>(xd[base + a * inner] - mx)) / denom);
    }
  detail::check_finite("softmax", *out.node());
  if (detail::recording(out)) {
    out.node()->backprop = [outer, n, inner](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& gx = detail::grad_buf(px);
      const float* y = self.data.data();
      const float* g = self.grad.data();
      for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < inner; ++i) {
          const Index base = o * n * inner + i;
          double dot = 0.0;
          for (Index a = 0; a < n; ++a) dot += static_cast<double>(g[base + a * inner]) * y[base + a * inner];
          for (Index a = 0; a < n; ++a)
            gx[static_cast<std::size_t>(base + a * inner)] +=
                y[base + a * inner] * (g[base + a * inner] - static_cast<float>(dot));
        }
    };
  }
  return out;
}

/// Inverted dropout: training mode zeroes entries with probability p and
/// scales survivors by 1/(1-p); eval mode is the identity.
inline Tensor dropout(const Tensor& x, float p, bool training, Rng& rng) {
  if (p < 0.0f || p >= 1.0f) throw ValueError("dropout: p must be in [0, 1)");
  if (!training || p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  auto mask = std::make_shared<std::vector<char>>(static_cast<std::size_t>(x.size()));
  Tensor out = detail::make_op(x.shape(), {x});
  for (Index i = 0; i < x.size(); ++i) {
    const bool keep = rng.uniform_f() >= p;
    (*mask)[static_cast<std::size_t>(i)] = keep ? 1 : 0;
    out.data()[i] = keep ? x.data()[i] * keep_scale : 0.0f;
  }
  if (detail::recording(out)) {
    out.node()->backprop = [mask, keep_scale](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      for (std::size_t i = 0; i < g.size(); ++i)
        if ((*mask)[i]) g[i] += self.grad[i] * keep_scale;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neighborhood ops

/// out[i, j, :] = x[idx[i, j], :]. Backward scatter-adds into source rows.
inline Tensor neighbor_gather(const Tensor& x, const NeighborIndex& nbr) {
  if (x.rank() != 2) throw ShapeError("neighbor_gather: rank-2 input required");
  const Index n = x.dim(0), c = x.dim(1);
  const Index k = nbr.k;
  for (std::int32_t idx : nbr.indices)
    if (idx < 0 || idx >= n) throw IndexError("neighbor_gather: index out of range");
  Tensor out = detail::make_op({nbr.n, k, c}, {x});
  for (Index i = 0; i < nbr.n; ++i)
    for (Index j = 0; j < k; ++j)
      std::memcpy(out.data() + (i * k + j) * c, x.data() + static_cast<Index>(nbr.at(i, j)) * c,
                  static_cast<std::size_t>(c) * sizeof(float));
  if (detail::recording(out)) {
    auto idx = std::make_shared<std::vector<std::int32_t>>(nbr.indices);
    const Index rows = nbr.n;
    out.node()->backprop = [idx, rows, k, c](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < k; ++j) {
          const Index src = (*idx)[static_cast<std::size_t>(i * k + j)];
          for (Index cc = 0; cc < c; ++cc)
            g[static_cast<std::size_t>(src * c + cc)] += self.grad[static_cast<std::size_t>((i * k + j) * c + cc)];
        }
    };
  }
  return out;
}

/// Row subset: out[r, ...] = x[rows[r], ...]. Backward scatter-adds.
inline Tensor row_gather(const Tensor& x, const std::vector<std::int32_t>& rows) {
  if (x.rank() < 2) throw ShapeError("row_gather: rank >= 2 input required");
  const Index n = x.dim(0);
  const Index stride = x.size() / n;
  for (std::int32_t r : rows)
    if (r < 0 || r >= n) throw IndexError("row_gather: index out of range");
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<Index>(rows.size());
  Tensor out = detail::make_op(out_shape, {x});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::memcpy(out.data() + static_cast<Index>(r) * stride, x.data() + static_cast<Index>(rows[r]) * stride,
                static_cast<std::size_t>(stride) * sizeof(float));
  if (detail::recording(out)) {
    auto idx = std::make_shared<std::vector<std::int32_t>>(rows);
    out.node()->backprop = [idx, stride](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      for (std::size_t r = 0; r < idx->size(); ++r) {
        const Index src = (*idx)[r];
        for (Index i = 0; i < stride; ++i)
          g[static_cast<std::size_t>(src * stride + i)] += self.grad[static_cast<std::size_t>(static_cast<Index>(r) * stride + i)];
      }
    };
  }
  return out;
}

/// Per-point, per-channel max over the neighbor axis of (n, k, c).
/// Gradient routes to the argmax entry only; ties go to the lowest index.
inline Tensor neighbor_max(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("neighbor_max: rank-3 input required");
  const Index n = x.dim(0), k = x.dim(1), c = x.dim(2);
  if (k < 1) throw ShapeError("neighbor_max: k must be >= 1");
  Tensor out = detail::make_op({n, c}, {x});
  auto arg = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(n * c));
  for (Index i = 0; i < n; ++i)
    for (Index cc = 0; cc < c; ++cc) {
      float best = x.data()[(i * k) * c + cc];
      Index best_j = 0;
      for (Index j = 1; j < k; ++j) {
        const float v = x.data()[(i * k + j) * c + cc];
        if (v > best) {
          best = v;
          best_j = j;
        }
      }
      out.data()[i * c + cc] = best;
      (*arg)[static_cast<std::size_t>(i * c + cc)] = static_cast<std::int32_t>(best_j);
    }
  if (detail::recording(out)) {
    out.node()->backprop = [arg, n, k, c](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      for (Index i = 0; i < n; ++i)
        for (Index cc = 0; cc < c; ++cc) {
          const Index j = (*arg)[static_cast<std::size_t>(i * c + cc)];
          g[static_cast<std::size_t>((i * k + j) * c + cc)] += self.grad[static_cast<std::size_t>(i * c + cc)];
        }
    };
  }
  return out;
}

/// Softmax-weighted neighborhood mean: weights are softmax(scores) along
/// the neighbor axis, per channel; out[i, c] = sum_j w[i, j, c] * x[i, j, c].
inline Tensor neighbor_weighted_mean(const Tensor& x, const Tensor& scores) {
  if (x.rank() != 3) throw ShapeError("neighbor_weighted_mean: rank-3 input required");
  check_same_shape("neighbor_weighted_mean", x, scores);
  Tensor weights = softmax(scores, 1);
  return sum_axis(mul(weights, x), 1);
}

// ---------------------------------------------------------------------------
// Losses

/// Mean negative log-softmax probability of the true class over all
/// non-ignored points.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& labels,
                            std::optional<std::int32_t> ignore_id = std::nullopt) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: rank-2 logits required");
  const Index n = logits.dim(0), q = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("cross_entropy: label count mismatch");
  Index counted = 0;
  for (std::int32_t l : labels) {
    if (ignore_id && l == *ignore_id) continue;
    if (l < 0 || l >= q) throw ValueError("cross_entropy: label out of range");
    ++counted;
  }
  if (counted == 0) throw ValueError("cross_entropy: all points ignored, loss undefined");

  Tensor out = detail::make_op({1}, {logits});
  auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n * q));
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const float* row = logits.data() + i * q;
    float mx = row[0];
    for (Index j = 1; j < q; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (Index j = 0; j < q; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    const double log_denom = std::log(denom);
    for (Index j = 0; j < q; ++j)
      (*probs)[static_cast<std::size_t>(i * q + j)] =
          static_cast<float>(std::exp(static_cast<double>(row[j] - mx) - log_denom));
    const std::int32_t l = labels[static_cast<std::size_t>(i)];
    if (ignore_id && l == *ignore_id) continue;
    total += -(static_cast<double>(row[l] - mx) - log_denom);
  }
  out.data()[0] = static_cast<float>(total / static_cast<double>(counted));
  if (detail::recording(out)) {
    auto lab = std::make_shared<std::vector<std::int32_t>>(labels);
    out.node()->backprop = [probs, lab, ignore_id, n, q, counted](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      auto& g = detail::grad_buf(px);
      const float scale = self.grad[0] / static_cast<float>(counted);
      for (Index i = 0; i < n; ++i) {
        const std::int32_t l = (*lab)[static_cast<std::size_t>(i)];
        if (ignore_id && l == *ignore_id) continue;
        for (Index j = 0; j < q; ++j) {
          const float p = (*probs)[static_cast<std::size_t>(i * q + j)];
          g[static_cast<std::size_t>(i * q + j)] += scale * (p - (j == l ? 1.0f : 0.0f));
        }
      }
    };
  }
  return out;
}

/// l2 distance between each neighborhood's shifted-neighbor mean and its
/// center, reduced over points by sum (default) or mean. Zero-norm points
/// propagate a zero subgradient.
inline Tensor mean_shift_loss(const Tensor& shifted, const Tensor& centers, bool mean_over_points = false) {
  if (shifted.rank() != 3 || centers.rank() != 2) throw ShapeError("mean_shift_loss: bad ranks");
  const Index n = shifted.dim(0), k = shifted.dim(1), d = shifted.dim(2);
  if (centers.dim(0) != n || centers.dim(1) != d) throw ShapeError("mean_shift_loss: shape mismatch");

  Tensor out = detail::make_op({1}, {shifted, centers});
  auto offsets = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n * d));
  auto norms = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    double sq = 0.0;
    for (Index dd = 0; dd < d; ++dd) {
      double acc = 0.0;
      for (Index j = 0; j < k; ++j) acc += shifted.data()[(i * k + j) * d + dd];
      const double v = acc / static_cast<double>(k) - centers.data()[i * d + dd];
      (*offsets)[static_cast<std::size_t>(i * d + dd)] = static_cast<float>(v);
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    (*norms)[static_cast<std::size_t>(i)] = static_cast<float>(norm);
    total += norm;
  }
  if (mean_over_points) total /= static_cast<double>(n);
  out.data()[0] = static_cast<float>(total);
  if (detail::recording(out)) {
    out.node()->backprop = [offsets, norms, n, k, d, mean_over_points](detail::Node& self) {
      auto& ps = *self.parents[0];
      auto& pc = *self.parents[1];
      const float g = mean_over_points ? self.grad[0] / static_cast<float>(n) : self.grad[0];
      for (Index i = 0; i < n; ++i) {
        const float norm = (*norms)[static_cast<std::size_t>(i)];
        if (norm <= 0.0f) continue;
        for (Index dd = 0; dd < d; ++dd) {
          const float t = g * (*offsets)[static_cast<std::size_t>(i * d + dd)] / norm;
          if (ps.requires_grad) {
            auto& gs = detail::grad_buf(ps);
            const float per_neighbor = t / static_cast<float>(k);
            for (Index j = 0; j < k; ++j) gs[static_cast<std::size_t>((i * k + j) * d + dd)] += per_neighbor;
          }
          if (pc.requires_grad) detail::grad_buf(pc)[static_cast<std::size_t>(i * d + dd)] -= t;
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward

/// Populates gradients of every requires_grad leaf reachable from the given
/// scalar loss. Leaf gradients accumulate across calls; intermediate node
/// gradients are reset per call.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ValueError("backward: loss must be a scalar tensor");
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Reachable subgraph, iteratively.
  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{root.get()};
  std::unordered_set<detail::Node*> seen{root.get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  for (detail::Node* n : order)
    if (!n->leaf) n->grad.assign(n->data.size(), 0.0f);
  detail::grad_buf(*root)[0] += 1.0f;
  for (detail::Node* n : order)
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
}

/// Index of the max column per row (ties to the lowest index); not recorded.
inline std::vector<std::int32_t> argmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("argmax_rows: rank-2 input required");
  const Index n = x.dim(0), c = x.dim(1);
  std::vector<std::int32_t> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const float* row = x.data() + i * c;
    Index best = 0;
    for (Index j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(best);
  }
  return out;
}

}  // namespace baaf
