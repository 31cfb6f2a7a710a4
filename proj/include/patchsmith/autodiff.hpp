#pragma once
// Reverse-mode automatic differentiation on Tensor values.
//
// A Var wraps a shared graph node holding the forward value; each op appends
// a node with a backward closure that scatters the node's gradient into its
// parents.  backward() runs the closures in reverse topological order.
// Ops short-circuit to plain (graph-free) results when no input needs a
// gradient, so inference paths pay nothing.
//
// The op set is exactly what the pipeline needs: elementwise arithmetic,
// smooth nonlinearities, reductions, slicing/pasting for image composition,
// bilinear warps, conv2d, and small dense layers.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "patchsmith/tensor.hpp"

namespace patchsmith::ad {

struct Node;
using NodeP = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily by ensure_grad()
  bool requires_grad = false;
  std::vector<NodeP> parents;
  // Receives this node's gradient; must accumulate into parents' grads.
  std::function<void(const Tensor&)> backward;

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(NodeP n) : n_(std::move(n)) {}

  static Var leaf(Tensor value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(n);
  }
  static Var param(Tensor value) { return leaf(std::move(value), true); }
  static Var scalar(double v, bool requires_grad = false) {
    return leaf(Tensor::from_data({1}, {v}), requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const { return n_->value; }
  Tensor& mutable_value() { return n_->value; }
  const std::vector<int>& shape() const { return n_->value.shape(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  double item() const {
    if (n_->value.numel() != 1) throw std::invalid_argument("Var::item: not a scalar");
    return n_->value[0];
  }

  const Tensor& grad() const {
    if (!n_->grad.defined()) throw std::logic_error("Var::grad: no gradient present");
    return n_->grad;
  }
  bool has_grad() const { return n_ && n_->grad.defined(); }
  void zero_grad() { n_->grad = Tensor(); }

  NodeP node() const { return n_; }

 private:
  NodeP n_;
};

inline bool any_requires_grad(const std::vector<Var>& vs) {
  for (const auto& v : vs)
    if (v.requires_grad()) return true;
  return false;
}

// Appends an op node; callers pass a closure writing into parents' grads.
inline Var make_op(Tensor value, std::vector<Var> parents,
                   std::function<void(const Tensor&)> backward) {
  if (!any_requires_grad(parents)) return Var::leaf(std::move(value));
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->parents.reserve(parents.size());
  for (auto& p : parents) n->parents.push_back(p.node());
  n->backward = std::move(backward);
  return Var(n);
}

// ---------------------------------------------------------------------------
// Backward driver
// ---------------------------------------------------------------------------

// Runs reverse-mode accumulation from `root`.  `seed` is the gradient of the
// final objective w.r.t. root; omitted for scalar roots (seeded with 1).
inline void backward(const Var& root, const Tensor* seed = nullptr) {
  if (!root.defined() || !root.node()->requires_grad)
    throw std::logic_error("backward: root does not require grad");

  // Iterative post-order DFS -> topological order (children after parents).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor& rg = root.node()->ensure_grad();
  if (seed) {
    require_same_shape(rg, *seed, "backward seed");
    for (std::int64_t i = 0; i < rg.numel(); ++i) rg[i] += (*seed)[i];
  } else {
    if (rg.numel() != 1) throw std::invalid_argument("backward: non-scalar root needs a seed");
    rg[0] += 1.0;
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(n->grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

namespace detail {
inline void accumulate(const NodeP& p, const Tensor& g,
                       const std::function<double(std::int64_t)>& contrib) {
  if (!p->requires_grad) return;
  Tensor& pg = p->ensure_grad();
  for (std::int64_t i = 0; i < g.numel(); ++i) pg[i] += contrib(i);
}
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  NodeP na = a.node(), nb = b.node();
  return make_op(std::move(out), {a, b}, [na, nb](const Tensor& g) {
    detail::accumulate(na, g, [&](std::int64_t i) { return g[i]; });
    detail::accumulate(nb, g, [&](std::int64_t i) { return g[i]; });
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  NodeP na = a.node(), nb = b.node();
  return make_op(std::move(out), {a, b}, [na, nb](const Tensor& g) {
    detail::accumulate(na, g, [&](std::int64_t i) { return g[i]; });
    detail::accumulate(nb, g, [&](std::int64_t i) { return -g[i]; });
  });
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  NodeP na = a.node(), nb = b.node();
  return make_op(std::move(out), {a, b}, [na, nb](const Tensor& g) {
    detail::accumulate(na, g, [&](std::int64_t i) { return g[i] * nb->value[i]; });
    detail::accumulate(nb, g, [&](std::int64_t i) { return g[i] * na->value[i]; });
  });
}

inline Var scale(const Var& a, double k) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= k;
  NodeP na = a.node();
  return make_op(std::move(out), {a}, [na, k](const Tensor& g) {
    detail::accumulate(na, g, [&](std::int64_t i) { return g[i] * k; });
  });
}

inline Var add_scalar(const Var& a, double k) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += k;
  NodeP na = a.node();
  return make_op(std::move(out), {a}, [na](const Tensor& g) {
    detail::accumulate(na, g, [&](std::int64_t i) { return g[i]; });
  });
}

// ka*a + kb*b in one node; the diffusion update lines live on this.
inline Var scale_add(double ka, const Var& a, double kb, const Var& b) {
  require_same_shape(a.value(), b.value(), "scale_add");
  Tensor out(a.value().shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = ka * a.value()[i] + kb * b.value()[i];
  NodeP na = a.node(), nb = b.node();
  return make_op(std::move(out), {a, b}, [na, nb, ka, kb](const Tensor& g) {
    detail::accumulate(na, g, [&](std::int64_t i) { return ka * g[i]; });
    detail::accumulate(nb, g, [&](std::int64_t i) { return kb * g[i]; });
  });
}

// Tensor times scalar Var (both differentiable); used by structured heads
// where a learned scalar coefficient multiplies a whole feature map.
inline Var mul_scalar_var(const Var& x, const Var& s) {
  if (s.value().numel() != 1) throw std::invalid_argument("mul_scalar_var: s not scalar");
  double sv = s.value()[0];
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= sv;
  NodeP nx = x.node(), ns = s.node();
  return make_op(std::move(out), {x, s}, [nx, ns, sv](const Tensor& g) {
    detail::accumulate(nx, g, [&](std::int64_t i) { return g[i] * sv; });
    if (ns->requires_grad) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < g.numel(); ++i) acc += g[i] * nx->value[i];
      ns->ensure_grad()[0] += acc;
    }
  });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities (all smooth; finite-difference friendly)
// ---------------------------------------------------------------------------

namespace detail {
template <class F, class DF>
Var unary_op(const Var& a, F f, DF dfdx_from_in_out) {
  Tensor out(a.value().shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = f(a.value()[i]);
  NodeP na = a.node();
  Tensor out_copy = out;  // closure reads activations, not recompute
  return make_op(std::move(out), {a},
                 [na, dfdx_from_in_out, out_copy](const Tensor& g) {
                   detail::accumulate(na, g, [&](std::int64_t i) {
                     return g[i] * dfdx_from_in_out(na->value[i], out_copy[i]);
                   });
                 });
}
}  // namespace detail

inline Var square(const Var& a) {
  return detail::unary_op(a, [](double v) { return v * v; },
                          [](double in, double) { return 2.0 * in; });
}

inline Var sqrt_v(const Var& a) {
  return detail::unary_op(a, [](double v) { return std::sqrt(v); },
                          [](double, double out) { return 0.5 / out; });
}

inline Var exp_v(const Var& a) {
  return detail::unary_op(a, [](double v) { return std::exp(v); },
                          [](double, double out) { return out; });
}

inline Var log_v(const Var& a) {
  return detail::unary_op(a, [](double v) { return std::log(v); },
                          [](double in, double) { return 1.0 / in; });
}

inline Var tanh_v(const Var& a) {
  return detail::unary_op(a, [](double v) { return std::tanh(v); },
                          [](double, double out) { return 1.0 - out * out; });
}

inline double sigmoid_val(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline Var sigmoid(const Var& a) {
  return detail::unary_op(a, [](double v) { return sigmoid_val(v); },
                          [](double, double out) { return out * (1.0 - out); });
}

inline double softplus_val(double z) {
  // log(1 + e^z), overflow-safe.
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

inline Var softplus(const Var& a) {
  return detail::unary_op(a, [](double v) { return softplus_val(v); },
                          [](double in, double) { return sigmoid_val(in); });
}

// clamp to [0,1]; gradient passes on the closed interval (subgradient 1 at
// the boundary) so exactly-saturated pixels stay optimizable.
inline Var clamp01(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
  NodeP na = a.node();
  return make_op(std::move(out), {a}, [na](const Tensor& g) {
    detail::accumulate(na, g, [&](std::int64_t i) {
      double v = na->value[i];
      return (v >= 0.0 && v <= 1.0) ? g[i] : 0.0;
    });
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.value().numel(); ++i) acc += a.value()[i];
  NodeP na = a.node();
  return make_op(Tensor::from_data({1}, {acc}), {a}, [na](const Tensor& g) {
    if (!na->requires_grad) return;
    Tensor& pg = na->ensure_grad();
    for (std::int64_t i = 0; i < pg.numel(); ++i) pg[i] += g[0];
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

inline Var dot(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "dot");
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.value().numel(); ++i) acc += a.value()[i] * b.value()[i];
  NodeP na = a.node(), nb = b.node();
  return make_op(Tensor::from_data({1}, {acc}), {a, b}, [na, nb](const Tensor& g) {
    if (na->requires_grad) {
      Tensor& pg = na->ensure_grad();
      for (std::int64_t i = 0; i < pg.numel(); ++i) pg[i] += g[0] * nb->value[i];
    }
    if (nb->requires_grad) {
      Tensor& pg = nb->ensure_grad();
      for (std::int64_t i = 0; i < pg.numel(); ++i) pg[i] += g[0] * na->value[i];
    }
  });
}

// Maximum element (first occurrence on ties); gradient flows to the argmax.
inline Var max_all(const Var& a) {
  const Tensor& v = a.value();
  std::int64_t arg = 0;
  for (std::int64_t i = 1; i < v.numel(); ++i)
    if (v[i] > v[arg]) arg = i;
  NodeP na = a.node();
  return make_op(Tensor::from_data({1}, {v[arg]}), {a}, [na, arg](const Tensor& g) {
    if (!na->requires_grad) return;
    na->ensure_grad()[arg] += g[0];
  });
}

// Stack of scalar Vars -> rank-1 Var.
inline Var stack_scalars(const std::vector<Var>& xs) {
  Tensor out({static_cast<int>(xs.size())});
  std::vector<Var> parents;
  parents.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].value().numel() != 1) throw std::invalid_argument("stack_scalars: non-scalar");
    out[static_cast<std::int64_t>(i)] = xs[i].value()[0];
    parents.push_back(xs[i]);
  }
  std::vector<NodeP> nodes;
  for (const auto& p : parents) nodes.push_back(p.node());
  return make_op(std::move(out), parents, [nodes](const Tensor& g) {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i]->requires_grad)
        nodes[i]->ensure_grad()[0] += g[static_cast<std::int64_t>(i)];
  });
}

// ---------------------------------------------------------------------------
// Shape ops: reshape, slicing, pasting, channel concat
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = Tensor::from_data(std::move(shape), a.value().vec());
  if (out.numel() != a.value().numel()) throw std::invalid_argument("reshape: numel mismatch");
  NodeP na = a.node();
  return make_op(std::move(out), {a}, [na](const Tensor& g) {
    detail::accumulate(na, g, [&](std::int64_t i) { return g[i]; });
  });
}

// Rank-3 {C,H,W} crop over the spatial dims; coordinates must be in range.
inline Var crop3(const Var& a, int y0, int h, int x0, int w) {
  const Tensor& v = a.value();
  if (v.rank() != 3) throw std::invalid_argument("crop3: rank != 3");
  int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  if (y0 < 0 || x0 < 0 || h <= 0 || w <= 0 || y0 + h > H || x0 + w > W)
    throw std::invalid_argument("crop3: window out of range");
  Tensor out({C, h, w});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = v.at(c, y0 + y, x0 + x);
  NodeP na = a.node();
  return make_op(std::move(out), {a}, [na, C, h, w, y0, x0](const Tensor& g) {
    if (!na->requires_grad) return;
    Tensor& pg = na->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) pg.at(c, y0 + y, x0 + x) += g.at(c, y, x);
  });
}

// Overwrite-composite src into dst at (y0, x0), clipping to the destination.
// Gradient splits: pass-through to dst outside the pasted window, to src
// inside it (the overwritten dst pixels receive zero gradient).
inline Var paste3(const Var& dst, const Var& src, int y0, int x0) {
  const Tensor& d = dst.value();
  const Tensor& s = src.value();
  if (d.rank() != 3 || s.rank() != 3 || d.dim(0) != s.dim(0))
    throw std::invalid_argument("paste3: expects {C,H,W} operands with equal C");
  int C = d.dim(0), DH = d.dim(1), DW = d.dim(2), SH = s.dim(1), SW = s.dim(2);
  int sy0 = std::max(0, -y0), sx0 = std::max(0, -x0);
  int dy0 = std::max(0, y0), dx0 = std::max(0, x0);
  int h = std::min(SH - sy0, DH - dy0), w = std::min(SW - sx0, DW - dx0);
  Tensor out = d;
  if (h > 0 && w > 0)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          out.at(c, dy0 + y, dx0 + x) = s.at(c, sy0 + y, sx0 + x);
  NodeP nd = dst.node(), ns = src.node();
  return make_op(std::move(out), {dst, src},
                 [nd, ns, C, h, w, sy0, sx0, dy0, dx0](const Tensor& g) {
                   if (nd->requires_grad) {
                     Tensor& pg = nd->ensure_grad();
                     for (std::int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
                     if (h > 0 && w > 0)  // pasted window saw overwrite, not add
                       for (int c = 0; c < C; ++c)
                         for (int y = 0; y < h; ++y)
                           for (int x = 0; x < w; ++x)
                             pg.at(c, dy0 + y, dx0 + x) -= g.at(c, dy0 + y, dx0 + x);
                   }
                   if (ns->requires_grad && h > 0 && w > 0) {
                     Tensor& pg = ns->ensure_grad();
                     for (int c = 0; c < C; ++c)
                       for (int y = 0; y < h; ++y)
                         for (int x = 0; x < w; ++x)
                           pg.at(c, sy0 + y, sx0 + x) += g.at(c, dy0 + y, dx0 + x);
                   }
                 });
}

// Rank-3 {C,H,W} slice of `count` channels starting at c0.
inline Var slice_channels(const Var& a, int c0, int count) {
  const Tensor& v = a.value();
  if (v.rank() != 3) throw std::invalid_argument("slice_channels: rank != 3");
  int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  if (c0 < 0 || count <= 0 || c0 + count > C)
    throw std::invalid_argument("slice_channels: range out of bounds");
  Tensor out({count, H, W});
  for (int c = 0; c < count; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at(c, y, x) = v.at(c0 + c, y, x);
  NodeP na = a.node();
  return make_op(std::move(out), {a}, [na, c0, count, H, W](const Tensor& g) {
    if (!na->requires_grad) return;
    Tensor& pg = na->ensure_grad();
    for (int c = 0; c < count; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) pg.at(c0 + c, y, x) += g.at(c, y, x);
  });
}

// Single element of a rank-3 tensor as a scalar Var.
inline Var element3(const Var& a, int c, int y, int x) {
  const Tensor& v = a.value();
  if (v.rank() != 3) throw std::invalid_argument("element3: rank != 3");
  if (c < 0 || c >= v.dim(0) || y < 0 || y >= v.dim(1) || x < 0 || x >= v.dim(2))
    throw std::invalid_argument("element3: index out of bounds");
  std::int64_t flat = (static_cast<std::int64_t>(c) * v.dim(1) + y) * v.dim(2) + x;
  NodeP na = a.node();
  return make_op(Tensor::from_data({1}, {v[flat]}), {a}, [na, flat](const Tensor& g) {
    if (!na->requires_grad) return;
    na->ensure_grad()[flat] += g[0];
  });
}

inline Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty");
  int H = xs[0].value().dim(1), W = xs[0].value().dim(2), C = 0;
  for (const auto& x : xs) {
    if (x.value().rank() != 3 || x.value().dim(1) != H || x.value().dim(2) != W)
      throw std::invalid_argument("concat_channels: spatial shape mismatch");
    C += x.value().dim(0);
  }
  Tensor out({C, H, W});
  int c0 = 0;
  for (const auto& x : xs) {
    const Tensor& v = x.value();
    for (int c = 0; c < v.dim(0); ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) out.at(c0 + c, y, xx) = v.at(c, y, xx);
    c0 += v.dim(0);
  }
  std::vector<NodeP> nodes;
  std::vector<int> chans;
  for (const auto& x : xs) {
    nodes.push_back(x.node());
    chans.push_back(x.value().dim(0));
  }
  return make_op(std::move(out), xs, [nodes, chans, H, W](const Tensor& g) {
    int c0 = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (nodes[k]->requires_grad) {
        Tensor& pg = nodes[k]->ensure_grad();
        for (int c = 0; c < chans[k]; ++c)
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) pg.at(c, y, x) += g.at(c0 + c, y, x);
      }
      c0 += chans[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Dense layer on rank-1 vectors: y = W x + b, W is {m,n}, b is {m}.
// ---------------------------------------------------------------------------

inline Var linear(const Var& x, const Var& W, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& Wv = W.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 1 || Wv.rank() != 2 || bv.rank() != 1 || Wv.dim(1) != xv.dim(0) ||
      Wv.dim(0) != bv.dim(0))
    throw std::invalid_argument("linear: shape mismatch");
  int m = Wv.dim(0), n = Wv.dim(1);
  Tensor out({m});
  for (int j = 0; j < m; ++j) {
    double acc = bv[j];
    const double* row = Wv.data() + static_cast<std::int64_t>(j) * n;
    for (int i = 0; i < n; ++i) acc += row[i] * xv[i];
    out[j] = acc;
  }
  NodeP nx = x.node(), nW = W.node(), nb = b.node();
  return make_op(std::move(out), {x, W, b}, [nx, nW, nb, m, n](const Tensor& g) {
    if (nx->requires_grad) {
      Tensor& pg = nx->ensure_grad();
      for (int j = 0; j < m; ++j) {
        const double* row = nW->value.data() + static_cast<std::int64_t>(j) * n;
        for (int i = 0; i < n; ++i) pg[i] += g[j] * row[i];
      }
    }
    if (nW->requires_grad) {
      Tensor& pg = nW->ensure_grad();
      for (int j = 0; j < m; ++j)
        for (int i = 0; i < n; ++i)
          pg[static_cast<std::int64_t>(j) * n + i] += g[j] * nx->value[i];
    }
    if (nb->requires_grad) {
      Tensor& pg = nb->ensure_grad();
      for (int j = 0; j < m; ++j) pg[j] += g[j];
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d: x {IC,H,W} * w {OC,IC,KH,KW} + b {OC} -> {OC,OH,OW}
// ---------------------------------------------------------------------------

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = 0) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 3 || wv.rank() != 4 || bv.rank() != 1)
    throw std::invalid_argument("conv2d: rank mismatch");
  int IC = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  int OC = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
  if (wv.dim(1) != IC || bv.dim(0) != OC)
    throw std::invalid_argument("conv2d: channel mismatch");
  if (stride < 1) throw std::invalid_argument("conv2d: stride < 1");
  int OH = (H + 2 * pad - KH) / stride + 1;
  int OW = (W + 2 * pad - KW) / stride + 1;
  if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv2d: empty output");

  auto widx = [IC, KH, KW](int oc, int ic, int ky, int kx) {
    return ((static_cast<std::int64_t>(oc) * IC + ic) * KH + ky) * KW + kx;
  };

  Tensor out({OC, OH, OW});
  for (int oc = 0; oc < OC; ++oc)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) out.at(oc, oy, ox) = bv[oc];
  for (int oc = 0; oc < OC; ++oc)
    for (int ic = 0; ic < IC; ++ic)
      for (int ky = 0; ky < KH; ++ky)
        for (int kx = 0; kx < KW; ++kx) {
          double wval = wv[widx(oc, ic, ky, kx)];
          if (wval == 0.0) continue;
          for (int oy = 0; oy < OH; ++oy) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int ox = 0; ox < OW; ++ox) {
              int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              out.at(oc, oy, ox) += wval * xv.at(ic, iy, ix);
            }
          }
        }

  NodeP nx = x.node(), nw = w.node(), nb = b.node();
  return make_op(
      std::move(out), {x, w, b},
      [nx, nw, nb, IC, H, W, OC, KH, KW, OH, OW, stride, pad, widx](const Tensor& g) {
        if (nb->requires_grad) {
          Tensor& pg = nb->ensure_grad();
          for (int oc = 0; oc < OC; ++oc) {
            double acc = 0.0;
            for (int oy = 0; oy < OH; ++oy)
              for (int ox = 0; ox < OW; ++ox) acc += g.at(oc, oy, ox);
            pg[oc] += acc;
          }
        }
        if (nw->requires_grad) {
          Tensor& pg = nw->ensure_grad();
          for (int oc = 0; oc < OC; ++oc)
            for (int ic = 0; ic < IC; ++ic)
              for (int ky = 0; ky < KH; ++ky)
                for (int kx = 0; kx < KW; ++kx) {
                  double acc = 0.0;
                  for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < OW; ++ox) {
                      int ix = ox * stride - pad + kx;
                      if (ix < 0 || ix >= W) continue;
                      acc += g.at(oc, oy, ox) * nx->value.at(ic, iy, ix);
                    }
                  }
                  pg[widx(oc, ic, ky, kx)] += acc;
                }
        }
        if (nx->requires_grad) {
          Tensor& pg = nx->ensure_grad();
          for (int oc = 0; oc < OC; ++oc)
            for (int ic = 0; ic < IC; ++ic)
              for (int ky = 0; ky < KH; ++ky)
                for (int kx = 0; kx < KW; ++kx) {
                  double wval = nw->value[widx(oc, ic, ky, kx)];
                  if (wval == 0.0) continue;
                  for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < OW; ++ox) {
                      int ix = ox * stride - pad + kx;
                      if (ix < 0 || ix >= W) continue;
                      pg.at(ic, iy, ix) += wval * g.at(oc, oy, ox);
                    }
                  }
                }
        }
      });
}

// ---------------------------------------------------------------------------
// Bilinear sampling: resize and inverse-affine warp (clamp-to-edge)
// ---------------------------------------------------------------------------

namespace detail {
struct Tap {
  int y0, y1, x0, x1;
  double fy, fx;
};

inline Tap tap_at(double sy, double sx, int H, int W) {
  sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
  Tap t;
  t.y0 = static_cast<int>(std::floor(sy));
  t.x0 = static_cast<int>(std::floor(sx));
  t.y1 = std::min(t.y0 + 1, H - 1);
  t.x1 = std::min(t.x0 + 1, W - 1);
  t.fy = sy - t.y0;
  t.fx = sx - t.x0;
  return t;
}

inline double tap_sample(const Tensor& v, int c, const Tap& t) {
  double top = v.at(c, t.y0, t.x0) * (1.0 - t.fx) + v.at(c, t.y0, t.x1) * t.fx;
  double bot = v.at(c, t.y1, t.x0) * (1.0 - t.fx) + v.at(c, t.y1, t.x1) * t.fx;
  return top * (1.0 - t.fy) + bot * t.fy;
}

inline void tap_scatter(Tensor& pg, int c, const Tap& t, double g) {
  pg.at(c, t.y0, t.x0) += g * (1.0 - t.fx) * (1.0 - t.fy);
  pg.at(c, t.y0, t.x1) += g * t.fx * (1.0 - t.fy);
  pg.at(c, t.y1, t.x0) += g * (1.0 - t.fx) * t.fy;
  pg.at(c, t.y1, t.x1) += g * t.fx * t.fy;
}
}  // namespace detail

inline Var bilinear_resize(const Var& x, int OH, int OW) {
  const Tensor& v = x.value();
  if (v.rank() != 3) throw std::invalid_argument("bilinear_resize: rank != 3");
  if (OH <= 0 || OW <= 0) throw std::invalid_argument("bilinear_resize: bad size");
  int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  double ry = static_cast<double>(H) / OH, rx = static_cast<double>(W) / OW;
  std::vector<detail::Tap> taps(static_cast<std::size_t>(OH) * OW);
  for (int oy = 0; oy < OH; ++oy)
    for (int ox = 0; ox < OW; ++ox)
      taps[static_cast<std::size_t>(oy) * OW + ox] =
          detail::tap_at((oy + 0.5) * ry - 0.5, (ox + 0.5) * rx - 0.5, H, W);
  Tensor out({C, OH, OW});
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox)
        out.at(c, oy, ox) = detail::tap_sample(v, c, taps[static_cast<std::size_t>(oy) * OW + ox]);
  NodeP nx = x.node();
  return make_op(std::move(out), {x}, [nx, taps, C, OH, OW](const Tensor& g) {
    if (!nx->requires_grad) return;
    Tensor& pg = nx->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox)
          detail::tap_scatter(pg, c, taps[static_cast<std::size_t>(oy) * OW + ox],
                              g.at(c, oy, ox));
  });
}

// Inverse-affine warp: output pixel (ox,oy) samples the input at
//   sx = m[0]*ox + m[1]*oy + m[2],  sy = m[3]*ox + m[4]*oy + m[5]
// with bilinear interpolation and clamp-to-edge.  Output shape == input.
inline Var affine_sample(const Var& x, const std::array<double, 6>& m) {
  const Tensor& v = x.value();
  if (v.rank() != 3) throw std::invalid_argument("affine_sample: rank != 3");
  int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  std::vector<detail::Tap> taps(static_cast<std::size_t>(H) * W);
  for (int oy = 0; oy < H; ++oy)
    for (int ox = 0; ox < W; ++ox) {
      double sx = m[0] * ox + m[1] * oy + m[2];
      double sy = m[3] * ox + m[4] * oy + m[5];
      taps[static_cast<std::size_t>(oy) * W + ox] = detail::tap_at(sy, sx, H, W);
    }
  Tensor out({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < H; ++oy)
      for (int ox = 0; ox < W; ++ox)
        out.at(c, oy, ox) = detail::tap_sample(v, c, taps[static_cast<std::size_t>(oy) * W + ox]);
  NodeP nx = x.node();
  return make_op(std::move(out), {x}, [nx, taps, C, H, W](const Tensor& g) {
    if (!nx->requires_grad) return;
    Tensor& pg = nx->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < H; ++oy)
        for (int ox = 0; ox < W; ++ox)
          detail::tap_scatter(pg, c, taps[static_cast<std::size_t>(oy) * W + ox], g.at(c, oy, ox));
  });
}

// ---------------------------------------------------------------------------
// Operator sugar
// ---------------------------------------------------------------------------

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double k) { return scale(a, k); }
inline Var operator*(double k, const Var& a) { return scale(a, k); }
inline Var operator+(const Var& a, double k) { return add_scalar(a, k); }
inline Var operator+(double k, const Var& a) { return add_scalar(a, k); }
inline Var operator-(const Var& a, double k) { return add_scalar(a, -k); }
inline Var operator-(double k, const Var& a) { return add_scalar(neg(a), k); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace patchsmith::ad
