#include "epift/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <unordered_map>
#include <unordered_set>

namespace epift {

namespace {

thread_local bool g_grad_enabled = true;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

// Strides of `in` aligned to the trailing axes of `out`; broadcast axes get 0.
std::vector<Index> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<Index> s(out.size(), 0);
  const auto in_strides = strides_of(in);
  const std::size_t lead = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    s[lead + i] = in[i] == 1 ? 0 : in_strides[i];
  return s;
}

// Visits every flat index of `out` along with offsets into two inputs.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<Index>& sa, const std::vector<Index>& sb, F&& f) {
  const Index n = numel(out);
  if (n == 0) return;
  // Drop unit axes and fuse neighbours that are contiguous for both inputs,
  // so the inner loop runs as long as possible.
  std::vector<Index> dims, da, db;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == 1) continue;
    if (!dims.empty() && da.back() == sa[i] * out[i] && db.back() == sb[i] * out[i]) {
      dims.back() *= out[i];
      da.back() = sa[i];
      db.back() = sb[i];
    } else {
      dims.push_back(out[i]);
      da.push_back(sa[i]);
      db.push_back(sb[i]);
    }
  }
  if (dims.empty()) {
    f(Index{0}, Index{0}, Index{0});
    return;
  }
  const std::size_t r = dims.size();
  std::vector<Index> idx(r, 0);
  Index oa = 0, ob = 0;
  const Index inner = dims[r - 1];
  const Index ia_step = da[r - 1], ib_step = db[r - 1];
  for (Index i = 0; i < n; i += inner) {
    Index pa = oa, pb = ob;
    for (Index j = 0; j < inner; ++j) {
      f(i + j, pa, pb);
      pa += ia_step;
      pb += ib_step;
    }
    // Advance the odometer over the outer axes.
    for (int ax = static_cast<int>(r) - 2; ax >= 0; --ax) {
      if (++idx[ax] < dims[ax]) {
        oa += da[ax];
        ob += db[ax];
        break;
      }
      oa -= da[ax] * (dims[ax] - 1);
      ob -= db[ax] * (dims[ax] - 1);
      idx[ax] = 0;
    }
  }
}

template <typename Scalar, typename F>
Tensor<Scalar> binary_map(const Tensor<Scalar>& a, const Tensor<Scalar>& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor<Scalar> out(a.shape());
    out.array() = a.array().binaryExpr(b.array(), f);
    return out;
  }
  const Shape shape = broadcast_shapes(a.shape(), b.shape());
  Tensor<Scalar> out(shape);
  if (b.size() == 1 && numel(shape) == a.size()) {
    const Scalar bv = b[0];
    out.array() = a.array().unaryExpr([&](Scalar x) { return f(x, bv); });
    return out;
  }
  if (a.size() == 1 && numel(shape) == b.size()) {
    const Scalar av = a[0];
    out.array() = b.array().unaryExpr([&](Scalar y) { return f(av, y); });
    return out;
  }
  const auto sa = aligned_strides(a.shape(), shape);
  const auto sb = aligned_strides(b.shape(), shape);
  const Scalar* pa = a.data();
  const Scalar* pb = b.data();
  Scalar* po = out.data();
  for_each_broadcast(shape, sa, sb, [&](Index i, Index ia, Index ib) { po[i] = f(pa[ia], pb[ib]); });
  return out;
}

void check_broadcast_target(const Shape& from, const Shape& to) {
  bool ok = from.size() <= to.size();
  for (std::size_t i = 0; ok && i < from.size(); ++i) {
    const Index f = from[i], t = to[to.size() - from.size() + i];
    ok = f == t || f == 1;
  }
  if (!ok) throw ShapeError("cannot broadcast " + shape_str(from) + " to " + shape_str(to));
}

template <typename Scalar>
Tensor<Scalar> broadcast_value(const Tensor<Scalar>& x, const Shape& shape) {
  check_broadcast_target(x.shape(), shape);
  Tensor<Scalar> out(shape);
  if (x.size() == 1) {
    out.array().setConstant(x[0]);
    return out;
  }
  const auto sx = aligned_strides(x.shape(), shape);
  const std::vector<Index> zero(shape.size(), 0);
  const Scalar* px = x.data();
  Scalar* po = out.data();
  for_each_broadcast(shape, sx, zero, [&](Index i, Index ix, Index) { po[i] = px[ix]; });
  return out;
}

template <typename Scalar>
Tensor<Scalar> sum_to_value(const Tensor<Scalar>& x, const Shape& shape) {
  check_broadcast_target(shape, x.shape());
  Tensor<Scalar> out = Tensor<Scalar>::zeros(shape);
  if (out.size() == 1) {
    out[0] = x.array().sum();
    return out;
  }
  const auto so = aligned_strides(shape, x.shape());
  const std::vector<Index> zero(x.rank(), 0);
  const Scalar* px = x.data();
  Scalar* po = out.data();
  for_each_broadcast(x.shape(), so, zero, [&](Index i, Index io, Index) { po[io] += px[i]; });
  return out;
}

int normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  return axis < 0 ? axis + r : axis;
}

template <typename Scalar>
void require_finite(const Tensor<Scalar>& x, const char* op) {
  if (!x.all_finite()) throw NumericError(std::string(op) + ": non-finite input of shape " + shape_str(x.shape()));
}

// ---- convolution kernels (stride 1, zero padding) --------------------------

struct ConvGeometry {
  Index n, c, h, w, o, kh, kw, pad, ho, wo;
  Index patch() const { return c * kh * kw; }
  Index out_area() const { return ho * wo; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, Index pad) {
  if (x.size() != 4 || w.size() != 4)
    throw ShapeError("conv2d expects NCHW input and OIHW weight, got " + shape_str(x) + " and " + shape_str(w));
  if (x[1] != w[1])
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x) + " vs weight " + shape_str(w));
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], pad, 0, 0};
  g.ho = g.h + 2 * pad - g.kh + 1;
  g.wo = g.w + 2 * pad - g.kw + 1;
  if (g.ho <= 0 || g.wo <= 0)
    throw ShapeError("conv2d kernel " + shape_str(w) + " larger than padded input " + shape_str(x));
  return g;
}

// Valid output columns [lo, hi) for kernel column b: those reading inside
// the image.
inline std::pair<Index, Index> valid_span(const ConvGeometry& g, Index b) {
  const Index lo = std::clamp(g.pad - b, Index{0}, g.wo);
  const Index hi = std::clamp(g.w + g.pad - b, lo, g.wo);
  return {lo, hi};
}

// Writes the patch matrix of one image into `cols`, whose rows are `ld`
// elements apart (so several images can share one matrix).
template <typename Scalar>
void im2col(const Scalar* img, const ConvGeometry& g, Scalar* cols, Index ld) {
  for (Index c = 0; c < g.c; ++c)
    for (Index a = 0; a < g.kh; ++a)
      for (Index b = 0; b < g.kw; ++b) {
        Scalar* row = cols + ((c * g.kh + a) * g.kw + b) * ld;
        const auto [lo, hi] = valid_span(g, b);
        for (Index i = 0; i < g.ho; ++i) {
          const Index y = i + a - g.pad;
          Scalar* dst = row + i * g.wo;
          if (y < 0 || y >= g.h) {
            std::fill(dst, dst + g.wo, Scalar(0));
            continue;
          }
          const Scalar* src = img + (c * g.h + y) * g.w + b - g.pad;
          std::fill(dst, dst + lo, Scalar(0));
          std::copy(src + lo, src + hi, dst + lo);
          std::fill(dst + hi, dst + g.wo, Scalar(0));
        }
      }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* img, Index ld) {
  for (Index c = 0; c < g.c; ++c)
    for (Index a = 0; a < g.kh; ++a)
      for (Index b = 0; b < g.kw; ++b) {
        const Scalar* row = cols + ((c * g.kh + a) * g.kw + b) * ld;
        const auto [lo, hi] = valid_span(g, b);
        for (Index i = 0; i < g.ho; ++i) {
          const Index y = i + a - g.pad;
          if (y < 0 || y >= g.h) continue;
          Scalar* dst = img + (c * g.h + y) * g.w + b - g.pad;
          const Scalar* src = row + i * g.wo;
          for (Index j = lo; j < hi; ++j) dst[j] += src[j];
        }
      }
}

// The whole batch goes through one GEMM: patches are laid out as
// (patch, n * area) and outputs as (o, n * area).
template <typename Scalar>
RowMatrix<Scalar> batch_cols(const Tensor<Scalar>& x, const ConvGeometry& g) {
  const Index ld = g.n * g.out_area();
  RowMatrix<Scalar> cols(g.patch(), ld);
  for (Index n = 0; n < g.n; ++n) im2col(x.data() + n * g.c * g.h * g.w, g, cols.data() + n * g.out_area(), ld);
  return cols;
}

// (n, o, area) <-> (o, n * area)
template <typename Scalar>
RowMatrix<Scalar> to_channel_major(const Tensor<Scalar>& y, Index n, Index o, Index area) {
  RowMatrix<Scalar> m(o, n * area);
  for (Index b = 0; b < n; ++b)
    for (Index k = 0; k < o; ++k) std::copy_n(y.data() + (b * o + k) * area, area, m.data() + k * n * area + b * area);
  return m;
}

template <typename Scalar>
Tensor<Scalar> conv_forward_value(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Index pad) {
  const auto g = conv_geometry(x.shape(), w.shape(), pad);
  const Index area = g.out_area();
  ConstMatMap<Scalar> wm(w.data(), g.o, g.patch());
  RowMatrix<Scalar> ym = wm * batch_cols(x, g);
  Tensor<Scalar> y(Shape{g.n, g.o, g.ho, g.wo});
  for (Index b = 0; b < g.n; ++b)
    for (Index k = 0; k < g.o; ++k) std::copy_n(ym.data() + k * g.n * area + b * area, area, y.data() + (b * g.o + k) * area);
  return y;
}

template <typename Scalar>
Tensor<Scalar> conv_input_grad_value(const Tensor<Scalar>& gy, const Tensor<Scalar>& w, const Shape& x_shape, Index pad) {
  const auto g = conv_geometry(x_shape, w.shape(), pad);
  const Index area = g.out_area(), ld = g.n * area;
  ConstMatMap<Scalar> wm(w.data(), g.o, g.patch());
  RowMatrix<Scalar> cols = wm.transpose() * to_channel_major(gy, g.n, g.o, area);
  Tensor<Scalar> dx = Tensor<Scalar>::zeros(x_shape);
  for (Index n = 0; n < g.n; ++n) col2im_add(cols.data() + n * area, g, dx.data() + n * g.c * g.h * g.w, ld);
  return dx;
}

template <typename Scalar>
Tensor<Scalar> conv_weight_grad_value(const Tensor<Scalar>& x, const Tensor<Scalar>& gy, const Shape& w_shape, Index pad) {
  const auto g = conv_geometry(x.shape(), w_shape, pad);
  Tensor<Scalar> dw(w_shape);
  MatMap<Scalar> dwm(dw.data(), g.o, g.patch());
  dwm.noalias() = to_channel_major(gy, g.n, g.o, g.out_area()) * batch_cols(x, g).transpose();
  return dw;
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph machinery

template <typename Scalar>
Node<Scalar>::~Node() {
  if (parents.empty()) return;
  // Long unrolled graphs would otherwise recurse once per node on teardown.
  std::vector<Var<Scalar>> stack = std::move(parents);
  while (!stack.empty()) {
    Var<Scalar> v = std::move(stack.back());
    stack.pop_back();
    if (v && v.shared().use_count() == 1) {
      auto& ps = v.node()->parents;
      for (auto& p : ps) stack.push_back(std::move(p));
      ps.clear();
    }
  }
}

template <typename Scalar>
Var<Scalar> Var<Scalar>::param(Tensor<Scalar> value) {
  auto n = std::make_shared<NodeType>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

template <typename Scalar>
Var<Scalar> Var<Scalar>::constant(Tensor<Scalar> value) {
  auto n = std::make_shared<NodeType>();
  n->value = std::move(value);
  n->op = "const";
  return Var(std::move(n));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
Var<Scalar> make_node(Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                      typename Node<Scalar>::Backward backward, const char* op) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->op = op;
  const bool track = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                   [](const Var<Scalar>& p) { return p.requires_grad(); });
  if (track) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
    n->requires_grad = true;
  }
  return Var<Scalar>(std::move(n));
}

template <typename Scalar>
bool Gradients<Scalar>::any_unreachable() const {
  return std::any_of(unreachable.begin(), unreachable.end(), [](bool b) { return b; });
}

template <typename Scalar>
std::vector<Tensor<Scalar>> Gradients<Scalar>::tensors() const {
  std::vector<Tensor<Scalar>> out;
  out.reserve(grads.size());
  for (const auto& g : grads) out.push_back(g.value());
  return out;
}

template <typename Scalar>
Gradients<Scalar> grad(const Var<Scalar>& output, std::span<const Var<Scalar>> wrt, GradOptions options) {
  if (output.size() != 1)
    throw ShapeError("grad() needs a scalar output, got shape " + shape_str(output.shape()));

  // Post-order DFS over nodes that require grad: parents precede children.
  std::vector<std::shared_ptr<Node<Scalar>>> order;
  std::unordered_map<const Node<Scalar>*, std::size_t> position;
  if (output.requires_grad()) {
    std::unordered_set<const Node<Scalar>*> visited;
    std::vector<std::pair<std::shared_ptr<Node<Scalar>>, std::size_t>> stack;
    stack.emplace_back(output.shared(), 0);
    visited.insert(output.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        const auto& p = node->parents[next++];
        if (p.requires_grad() && visited.insert(p.node()).second) stack.emplace_back(p.shared(), 0);
      } else {
        position[node.get()] = order.size();
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<const Node<Scalar>*> keep;
  for (const auto& w : wrt) keep.insert(w.node());

  std::vector<Var<Scalar>> grads(order.size());
  {
    std::optional<NoGradGuard> no_grad;
    std::optional<EnableGradGuard> with_grad;
    if (options.create_graph)
      with_grad.emplace();
    else
      no_grad.emplace();

    if (!order.empty()) grads.back() = Var<Scalar>::constant(Tensor<Scalar>::ones(output.shape()));
    for (std::size_t i = order.size(); i-- > 0;) {
      const auto& node = order[i];
      if (!grads[i] || node->parents.empty() || !node->backward) continue;
      const Var<Scalar> self(node);
      auto parent_grads = node->backward(self, grads[i]);
      for (std::size_t k = 0; k < node->parents.size(); ++k) {
        const auto& p = node->parents[k];
        if (!p.requires_grad() || k >= parent_grads.size() || !parent_grads[k]) continue;
        const std::size_t j = position.at(p.node());
        grads[j] = grads[j] ? add(grads[j], parent_grads[k]) : parent_grads[k];
      }
      if (!keep.count(node.get())) grads[i] = Var<Scalar>();
    }
  }

  Gradients<Scalar> result;
  for (const auto& w : wrt) {
    auto it = position.find(w.node());
    if (it != position.end() && grads[it->second]) {
      result.grads.push_back(options.create_graph ? grads[it->second] : detach(grads[it->second]));
      result.unreachable.push_back(false);
    } else {
      result.grads.push_back(Var<Scalar>::constant(Tensor<Scalar>::zeros(w.shape())));
      result.unreachable.push_back(true);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementary ops

template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& x) {
  if (!x.requires_grad()) return x;
  return Var<Scalar>::constant(x.value());
}

template <typename Scalar>
Var<Scalar> sum_to(const Var<Scalar>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  return make_node<Scalar>(
      sum_to_value(x.value(), shape), {x},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        return std::vector<Var<Scalar>>{broadcast_to(g, self.node()->parents[0].shape())};
      },
      "sum_to");
}

template <typename Scalar>
Var<Scalar> broadcast_to(const Var<Scalar>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  return make_node<Scalar>(
      broadcast_value(x.value(), shape), {x},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        return std::vector<Var<Scalar>>{sum_to(g, self.node()->parents[0].shape())};
      },
      "broadcast_to");
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  return make_node<Scalar>(
      binary_map(a.value(), b.value(), [](Scalar x, Scalar y) { return x + y; }), {a, b},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& ps = self.node()->parents;
        return std::vector<Var<Scalar>>{sum_to(g, ps[0].shape()), sum_to(g, ps[1].shape())};
      },
      "add");
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  return make_node<Scalar>(
      binary_map(a.value(), b.value(), [](Scalar x, Scalar y) { return x - y; }), {a, b},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& ps = self.node()->parents;
        return std::vector<Var<Scalar>>{sum_to(g, ps[0].shape()), neg(sum_to(g, ps[1].shape()))};
      },
      "sub");
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  return make_node<Scalar>(
      binary_map(a.value(), b.value(), [](Scalar x, Scalar y) { return x * y; }), {a, b},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& ps = self.node()->parents;
        std::vector<Var<Scalar>> out(2);
        if (ps[0].requires_grad()) out[0] = sum_to(mul(g, ps[1]), ps[0].shape());
        if (ps[1].requires_grad()) out[1] = sum_to(mul(g, ps[0]), ps[1].shape());
        return out;
      },
      "mul");
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  return make_node<Scalar>(
      binary_map(a.value(), b.value(), [](Scalar x, Scalar y) { return x / y; }), {a, b},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& ps = self.node()->parents;
        std::vector<Var<Scalar>> out(2);
        if (ps[0].requires_grad()) out[0] = sum_to(div(g, ps[1]), ps[0].shape());
        if (ps[1].requires_grad()) out[1] = sum_to(neg(div(mul(g, self), ps[1])), ps[1].shape());
        return out;
      },
      "div");
}

template <typename Scalar>
Var<Scalar> neg(const Var<Scalar>& x) {
  Tensor<Scalar> v(x.shape());
  v.array() = -x.value().array();
  return make_node<Scalar>(
      std::move(v), {x},
      [](const Var<Scalar>&, const Var<Scalar>& g) { return std::vector<Var<Scalar>>{neg(g)}; }, "neg");
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  Tensor<Scalar> v(x.shape());
  v.array() = x.value().array() * factor;
  return make_node<Scalar>(
      std::move(v), {x},
      [factor](const Var<Scalar>&, const Var<Scalar>& g) { return std::vector<Var<Scalar>>{scale(g, factor)}; },
      "scale");
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& x, Scalar offset) {
  Tensor<Scalar> v(x.shape());
  v.array() = x.value().array() + offset;
  return make_node<Scalar>(
      std::move(v), {x}, [](const Var<Scalar>&, const Var<Scalar>& g) { return std::vector<Var<Scalar>>{g}; },
      "add_scalar");
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  return make_node<Scalar>(
      x.value().reshaped(shape), {x},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        return std::vector<Var<Scalar>>{reshape(g, self.node()->parents[0].shape())};
      },
      "reshape");
}

template <typename Scalar>
Var<Scalar> permute(const Var<Scalar>& x, const std::vector<int>& axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size())
    throw ShapeError("permute: " + std::to_string(axes.size()) + " axes for shape " + shape_str(in));
  std::vector<int> inverse(axes.size(), -1);
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    const int a = normalize_axis(axes[i], in.size());
    if (inverse[a] != -1) throw ShapeError("permute: repeated axis " + std::to_string(a));
    inverse[a] = static_cast<int>(i);
    out_shape[i] = in[a];
  }
  const auto in_strides = strides_of(in);
  std::vector<Index> src(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) src[i] = in_strides[normalize_axis(axes[i], in.size())];
  Tensor<Scalar> v(out_shape);
  const std::vector<Index> zero(in.size(), 0);
  const Scalar* px = x.value().data();
  Scalar* po = v.data();
  for_each_broadcast(out_shape, src, zero, [&](Index i, Index ix, Index) { po[i] = px[ix]; });
  return make_node<Scalar>(
      std::move(v), {x},
      [inverse](const Var<Scalar>&, const Var<Scalar>& g) { return std::vector<Var<Scalar>>{permute(g, inverse)}; },
      "permute");
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x) {
  if (x.shape().size() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x, const std::vector<int>& axes, bool keepdim) {
  Shape kept = x.shape();
  for (int a : axes) kept[normalize_axis(a, kept.size())] = 1;
  Var<Scalar> s = sum_to(x, kept);
  if (keepdim) return s;
  Shape squeezed;
  std::vector<bool> drop(kept.size(), false);
  for (int a : axes) drop[normalize_axis(a, kept.size())] = true;
  for (std::size_t i = 0; i < kept.size(); ++i)
    if (!drop[i]) squeezed.push_back(kept[i]);
  return reshape(s, squeezed);
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x, const std::vector<int>& axes, bool keepdim) {
  Index count = 1;
  for (int a : axes) count *= x.shape()[normalize_axis(a, x.shape().size())];
  return scale(sum(x, axes, keepdim), Scalar(1) / static_cast<Scalar>(count));
}

template <typename Scalar>
Var<Scalar> sum_all(const Var<Scalar>& x) {
  return sum_to(x, Shape{});
}

template <typename Scalar>
Var<Scalar> mean_all(const Var<Scalar>& x) {
  return scale(sum_all(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul shape mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  Tensor<Scalar> v(Shape{sa[0], sb[1]});
  MatMap<Scalar>(v.data(), sa[0], sb[1]).noalias() =
      ConstMatMap<Scalar>(a.value().data(), sa[0], sa[1]) * ConstMatMap<Scalar>(b.value().data(), sb[0], sb[1]);
  return make_node<Scalar>(
      std::move(v), {a, b},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& ps = self.node()->parents;
        std::vector<Var<Scalar>> out(2);
        if (ps[0].requires_grad()) out[0] = matmul(g, transpose(ps[1]));
        if (ps[1].requires_grad()) out[1] = matmul(transpose(ps[0]), g);
        return out;
      },
      "matmul");
}

template <typename Scalar>
Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
    throw ShapeError("bmm shape mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  const Index batch = sa[0], n = sa[1], k = sa[2], m = sb[2];
  Tensor<Scalar> v(Shape{batch, n, m});
  for (Index i = 0; i < batch; ++i)
    MatMap<Scalar>(v.data() + i * n * m, n, m).noalias() =
        ConstMatMap<Scalar>(a.value().data() + i * n * k, n, k) * ConstMatMap<Scalar>(b.value().data() + i * k * m, k, m);
  return make_node<Scalar>(
      std::move(v), {a, b},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& ps = self.node()->parents;
        std::vector<Var<Scalar>> out(2);
        if (ps[0].requires_grad()) out[0] = bmm(g, permute(ps[1], {0, 2, 1}));
        if (ps[1].requires_grad()) out[1] = bmm(permute(ps[0], {0, 2, 1}), g);
        return out;
      },
      "bmm");
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> v(x.shape());
  v.array() = x.value().array().max(Scalar(0));
  return make_node<Scalar>(
      std::move(v), {x},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& xv = self.node()->parents[0].value();
        Tensor<Scalar> mask(xv.shape());
        mask.array() = (xv.array() > Scalar(0)).template cast<Scalar>();
        return std::vector<Var<Scalar>>{mul(g, Var<Scalar>::constant(std::move(mask)))};
      },
      "relu");
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& x) {
  Tensor<Scalar> v(x.shape());
  v.array() = x.value().array().exp();
  return make_node<Scalar>(
      std::move(v), {x},
      [](const Var<Scalar>& self, const Var<Scalar>& g) { return std::vector<Var<Scalar>>{mul(g, self)}; }, "exp");
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& x) {
  require_finite(x.value(), "log");
  Tensor<Scalar> v(x.shape());
  v.array() = x.value().array().log();
  return make_node<Scalar>(
      std::move(v), {x},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        return std::vector<Var<Scalar>>{div(g, self.node()->parents[0])};
      },
      "log");
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& x) {
  Tensor<Scalar> v(x.shape());
  v.array() = x.value().array().sqrt();
  return make_node<Scalar>(
      std::move(v), {x},
      [](const Var<Scalar>& self, const Var<Scalar>& g) {
        return std::vector<Var<Scalar>>{div(scale(g, Scalar(0.5)), self)};
      },
      "sqrt");
}

template <typename Scalar>
Var<Scalar> pow(const Var<Scalar>& x, Scalar exponent) {
  Tensor<Scalar> v(x.shape());
  v.array() = x.value().array().pow(exponent);
  return make_node<Scalar>(
      std::move(v), {x},
      [exponent](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& xp = self.node()->parents[0];
        return std::vector<Var<Scalar>>{mul(g, scale(pow(xp, exponent - Scalar(1)), exponent))};
      },
      "pow");
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& x) {
  return mul(x, x);
}

template <typename Scalar>
Var<Scalar> clamp_min(const Var<Scalar>& x, Scalar lo) {
  Tensor<Scalar> v(x.shape());
  v.array() = x.value().array().max(lo);
  return make_node<Scalar>(
      std::move(v), {x},
      [lo](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& xv = self.node()->parents[0].value();
        Tensor<Scalar> mask(xv.shape());
        mask.array() = (xv.array() > lo).template cast<Scalar>();
        return std::vector<Var<Scalar>>{mul(g, Var<Scalar>::constant(std::move(mask)))};
      },
      "clamp_min");
}

// Convolution adjoints, kept private: each is differentiable in terms of the others.
template <typename Scalar>
Var<Scalar> conv2d_input_adjoint(const Var<Scalar>& gy, const Var<Scalar>& w, const Shape& x_shape, Index pad);
template <typename Scalar>
Var<Scalar> conv2d_weight_adjoint(const Var<Scalar>& x, const Var<Scalar>& gy, const Shape& w_shape, Index pad);

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, Index padding) {
  return make_node<Scalar>(
      conv_forward_value(x.value(), w.value(), padding), {x, w},
      [padding](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& ps = self.node()->parents;
        std::vector<Var<Scalar>> out(2);
        if (ps[0].requires_grad()) out[0] = conv2d_input_adjoint(g, ps[1], ps[0].shape(), padding);
        if (ps[1].requires_grad()) out[1] = conv2d_weight_adjoint(ps[0], g, ps[1].shape(), padding);
        return out;
      },
      "conv2d");
}

template <typename Scalar>
Var<Scalar> conv2d_input_adjoint(const Var<Scalar>& gy, const Var<Scalar>& w, const Shape& x_shape, Index pad) {
  return make_node<Scalar>(
      conv_input_grad_value(gy.value(), w.value(), x_shape, pad), {gy, w},
      [pad](const Var<Scalar>& self, const Var<Scalar>& gz) {
        const auto& ps = self.node()->parents;
        std::vector<Var<Scalar>> out(2);
        if (ps[0].requires_grad()) out[0] = conv2d(gz, ps[1], pad);
        if (ps[1].requires_grad()) out[1] = conv2d_weight_adjoint(gz, ps[0], ps[1].shape(), pad);
        return out;
      },
      "conv2d_input_adjoint");
}

template <typename Scalar>
Var<Scalar> conv2d_weight_adjoint(const Var<Scalar>& x, const Var<Scalar>& gy, const Shape& w_shape, Index pad) {
  return make_node<Scalar>(
      conv_weight_grad_value(x.value(), gy.value(), w_shape, pad), {x, gy},
      [pad](const Var<Scalar>& self, const Var<Scalar>& gz) {
        const auto& ps = self.node()->parents;
        std::vector<Var<Scalar>> out(2);
        if (ps[0].requires_grad()) out[0] = conv2d_input_adjoint(ps[1], gz, ps[0].shape(), pad);
        if (ps[1].requires_grad()) out[1] = conv2d(ps[0], gz, pad);
        return out;
      },
      "conv2d_weight_adjoint");
}

template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& x, std::shared_ptr<const std::vector<Index>> index, const Shape& out_shape) {
  if (numel(out_shape) != static_cast<Index>(index->size()))
    throw ShapeError("gather: " + std::to_string(index->size()) + " indices for shape " + shape_str(out_shape));
  Tensor<Scalar> v(out_shape);
  const Scalar* px = x.value().data();
  const Index n = x.size();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const Index j = (*index)[i];
    if (j < 0 || j >= n) throw ShapeError("gather: index " + std::to_string(j) + " out of range");
    v[static_cast<Index>(i)] = px[j];
  }
  return make_node<Scalar>(
      std::move(v), {x},
      [index](const Var<Scalar>& self, const Var<Scalar>& g) {
        return std::vector<Var<Scalar>>{scatter_add(g, index, self.node()->parents[0].shape())};
      },
      "gather");
}

template <typename Scalar>
Var<Scalar> scatter_add(const Var<Scalar>& g, std::shared_ptr<const std::vector<Index>> index, const Shape& out_shape) {
  if (g.size() != static_cast<Index>(index->size()))
    throw ShapeError("scatter_add: " + std::to_string(index->size()) + " indices for " + shape_str(g.shape()));
  Tensor<Scalar> v = Tensor<Scalar>::zeros(out_shape);
  const Scalar* pg = g.value().data();
  for (std::size_t i = 0; i < index->size(); ++i) v[(*index)[i]] += pg[i];
  return make_node<Scalar>(
      std::move(v), {g},
      [index](const Var<Scalar>& self, const Var<Scalar>& gz) {
        return std::vector<Var<Scalar>>{gather(gz, index, self.node()->parents[0].shape())};
      },
      "scatter_add");
}

template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& x, Index kernel) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("max_pool2d expects NCHW, got " + shape_str(s));
  const Index ho = s[2] / kernel, wo = s[3] / kernel;
  if (ho == 0 || wo == 0) throw ShapeError("max_pool2d: input " + shape_str(s) + " smaller than kernel");
  auto index = std::make_shared<std::vector<Index>>();
  index->reserve(static_cast<std::size_t>(s[0] * s[1] * ho * wo));
  const Scalar* px = x.value().data();
  for (Index nc = 0; nc < s[0] * s[1]; ++nc) {
    const Index base = nc * s[2] * s[3];
    for (Index i = 0; i < ho; ++i)
      for (Index j = 0; j < wo; ++j) {
        Index best = base + (i * kernel) * s[3] + j * kernel;
        for (Index a = 0; a < kernel; ++a)
          for (Index b = 0; b < kernel; ++b) {
            const Index at = base + (i * kernel + a) * s[3] + j * kernel + b;
            if (px[at] > px[best]) best = at;
          }
        index->push_back(best);
      }
  }
  return gather<Scalar>(x, std::move(index), Shape{s[0], s[1], ho, wo});
}

template <typename Scalar>
Var<Scalar> rows(const Var<Scalar>& x, Index start, Index count) {
  const Shape& s = x.shape();
  if (s.empty() || start < 0 || count <= 0 || start + count > s[0])
    throw ShapeError("rows(" + std::to_string(start) + ", " + std::to_string(count) + ") out of range for " + shape_str(s));
  Shape out = s;
  out[0] = count;
  const Index stride = numel(s) / s[0];
  Tensor<Scalar> v(out);
  v.array() = x.value().array().segment(start * stride, count * stride);
  return make_node<Scalar>(
      std::move(v), {x},
      [start](const Var<Scalar>& self, const Var<Scalar>& g) {
        return std::vector<Var<Scalar>>{pad_rows(g, start, self.node()->parents[0].shape()[0])};
      },
      "rows");
}

template <typename Scalar>
Var<Scalar> pad_rows(const Var<Scalar>& x, Index start, Index total) {
  const Shape& s = x.shape();
  if (s.empty() || start < 0 || start + s[0] > total)
    throw ShapeError("pad_rows out of range for " + shape_str(s));
  Shape out = s;
  out[0] = total;
  const Index stride = numel(s) / s[0];
  Tensor<Scalar> v = Tensor<Scalar>::zeros(out);
  v.array().segment(start * stride, x.size()) = x.value().array();
  return make_node<Scalar>(
      std::move(v), {x},
      [start](const Var<Scalar>& self, const Var<Scalar>& g) {
        return std::vector<Var<Scalar>>{rows(g, start, self.node()->parents[0].shape()[0])};
      },
      "pad_rows");
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape out = parts[0].shape();
  if (out.empty()) throw ShapeError("concat needs rank >= 1");
  Index total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != out.size() || !std::equal(s.begin() + 1, s.end(), out.begin() + 1))
      throw ShapeError("concat shape mismatch: " + shape_str(out) + " vs " + shape_str(s));
    total += s[0];
  }
  out[0] = total;
  Tensor<Scalar> v(out);
  Index offset = 0;
  std::vector<Index> starts;
  for (const auto& p : parts) {
    starts.push_back(offset);
    v.array().segment(offset, p.size()) = p.value().array();
    offset += p.size();
  }
  const Index stride = numel(out) / total;
  return make_node<Scalar>(
      std::move(v), parts,
      [starts, stride](const Var<Scalar>& self, const Var<Scalar>& g) {
        const auto& ps = self.node()->parents;
        std::vector<Var<Scalar>> out(ps.size());
        for (std::size_t i = 0; i < ps.size(); ++i)
          if (ps[i].requires_grad()) out[i] = rows(g, starts[i] / stride, ps[i].shape()[0]);
        return out;
      },
      "concat");
}

// ---------------------------------------------------------------------------
// Composites

namespace {
template <typename Scalar>
Var<Scalar> max_along(const Var<Scalar>& x, int axis) {
  // Shift for numerical stability; treated as a constant.
  const Shape& s = x.shape();
  Shape kept = s;
  kept[axis] = 1;
  Tensor<Scalar> m(kept, -std::numeric_limits<Scalar>::infinity());
  const auto so = aligned_strides(kept, s);
  const std::vector<Index> zero(s.size(), 0);
  const Scalar* px = x.value().data();
  Scalar* pm = m.data();
  for_each_broadcast(s, so, zero, [&](Index i, Index io, Index) { pm[io] = std::max(pm[io], px[i]); });
  return Var<Scalar>::constant(std::move(m));
}
}  // namespace

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, int axis) {
  require_finite(x.value(), "softmax");
  axis = normalize_axis(axis, x.shape().size());
  Var<Scalar> e = exp(sub(x, max_along(x, axis)));
  return div(e, sum(e, {axis}, true));
}

template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& x, int axis) {
  require_finite(x.value(), "log_softmax");
  axis = normalize_axis(axis, x.shape().size());
  Var<Scalar> z = sub(x, max_along(x, axis));
  return sub(z, log(sum(exp(z), {axis}, true)));
}

namespace {
std::shared_ptr<const std::vector<Index>> label_index(const Shape& s, std::span<const int> labels) {
  if (s.size() != 2 || s[0] != static_cast<Index>(labels.size()))
    throw ShapeError("expected (" + std::to_string(labels.size()) + ", classes) scores, got " + shape_str(s));
  auto idx = std::make_shared<std::vector<Index>>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= s[1])
      throw DataError("label " + std::to_string(labels[i]) + " outside " + std::to_string(s[1]) + " classes");
    (*idx)[i] = static_cast<Index>(i) * s[1] + labels[i];
  }
  return idx;
}
}  // namespace

template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  auto idx = label_index(logits.shape(), labels);
  Var<Scalar> picked = gather(log_softmax(logits, 1), idx, Shape{static_cast<Index>(labels.size())});
  return neg(mean_all(picked));
}

template <typename Scalar>
Var<Scalar> nll_from_probs(const Var<Scalar>& probs, std::span<const int> labels) {
  auto idx = label_index(probs.shape(), labels);
  Var<Scalar> picked = gather(probs, idx, Shape{static_cast<Index>(labels.size())});
  return neg(mean_all(log(picked)));
}

template <typename Scalar>
Var<Scalar> squared_euclidean(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
    throw ShapeError("squared_euclidean shape mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
  Var<Scalar> diff = sub(reshape(a, {sa[0], 1, sa[1]}), reshape(b, {1, sb[0], sb[1]}));
  return sum(square(diff), {2});
}

template <typename Scalar>
Var<Scalar> l2_normalize(const Var<Scalar>& x, int axis) {
  axis = normalize_axis(axis, x.shape().size());
  const Scalar floor2 = static_cast<Scalar>(kNormClamp * kNormClamp);
  // sqrt(max(|x|^2, c^2)) == max(|x|, c) with a finite derivative at zero.
  Var<Scalar> norm = sqrt(clamp_min(sum(square(x), {axis}, true), floor2));
  return div(x, norm);
}

template <typename Scalar>
Var<Scalar> cosine_similarity(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
    throw ShapeError("cosine_similarity shape mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
  return matmul(l2_normalize(a, 1), transpose(l2_normalize(b, 1)));
}

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       const std::vector<int>& axes, Scalar eps) {
  Var<Scalar> centered = sub(x, mean(x, axes, true));
  Var<Scalar> var = mean(square(centered), axes, true);
  Var<Scalar> normed = mul(centered, pow(add_scalar(var, eps), Scalar(-0.5)));
  return add(mul(normed, gamma), beta);
}

// ---------------------------------------------------------------------------

#define EPIFT_INSTANTIATE_AUTODIFF(S)                                                                  \
  template struct Node<S>;                                                                           \
  template class Var<S>;                                                                             \
  template struct Gradients<S>;                                                                      \
  template Var<S> make_node<S>(Tensor<S>, std::vector<Var<S>>, typename Node<S>::Backward, const char*); \
  template Gradients<S> grad<S>(const Var<S>&, std::span<const Var<S>>, GradOptions);               \
  template Var<S> detach<S>(const Var<S>&);                                                          \
  template Var<S> add<S>(const Var<S>&, const Var<S>&);                                              \
  template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                              \
  template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                              \
  template Var<S> div<S>(const Var<S>&, const Var<S>&);                                              \
  template Var<S> neg<S>(const Var<S>&);                                                             \
  template Var<S> scale<S>(const Var<S>&, S);                                                        \
  template Var<S> add_scalar<S>(const Var<S>&, S);                                                   \
  template Var<S> broadcast_to<S>(const Var<S>&, const Shape&);                                      \
  template Var<S> sum_to<S>(const Var<S>&, const Shape&);                                            \
  template Var<S> reshape<S>(const Var<S>&, const Shape&);                                           \
  template Var<S> permute<S>(const Var<S>&, const std::vector<int>&);                                \
  template Var<S> transpose<S>(const Var<S>&);                                                       \
  template Var<S> sum<S>(const Var<S>&, const std::vector<int>&, bool);                              \
  template Var<S> mean<S>(const Var<S>&, const std::vector<int>&, bool);                             \
  template Var<S> sum_all<S>(const Var<S>&);                                                         \
  template Var<S> mean_all<S>(const Var<S>&);                                                        \
  template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                           \
  template Var<S> bmm<S>(const Var<S>&, const Var<S>&);                                              \
  template Var<S> relu<S>(const Var<S>&);                                                            \
  template Var<S> exp<S>(const Var<S>&);                                                             \
  template Var<S> log<S>(const Var<S>&);                                                             \
  template Var<S> sqrt<S>(const Var<S>&);                                                            \
  template Var<S> pow<S>(const Var<S>&, S);                                                          \
  template Var<S> square<S>(const Var<S>&);                                                          \
  template Var<S> clamp_min<S>(const Var<S>&, S);                                                    \
  template Var<S> conv2d<S>(const Var<S>&, const Var<S>&, Index);                                    \
  template Var<S> max_pool2d<S>(const Var<S>&, Index);                                               \
  template Var<S> gather<S>(const Var<S>&, std::shared_ptr<const std::vector<Index>>, const Shape&); \
  template Var<S> scatter_add<S>(const Var<S>&, std::shared_ptr<const std::vector<Index>>, const Shape&); \
  template Var<S> concat<S>(const std::vector<Var<S>>&);                                             \
  template Var<S> rows<S>(const Var<S>&, Index, Index);                                              \
  template Var<S> pad_rows<S>(const Var<S>&, Index, Index);                                          \
  template Var<S> softmax<S>(const Var<S>&, int);                                                    \
  template Var<S> log_softmax<S>(const Var<S>&, int);                                                \
  template Var<S> cross_entropy<S>(const Var<S>&, std::span<const int>);                             \
  template Var<S> nll_from_probs<S>(const Var<S>&, std::span<const int>);                            \
  template Var<S> squared_euclidean<S>(const Var<S>&, const Var<S>&);                                \
  template Var<S> cosine_similarity<S>(const Var<S>&, const Var<S>&);                                \
  template Var<S> l2_normalize<S>(const Var<S>&, int);                                               \
  template Var<S> batch_norm<S>(const Var<S>&, const Var<S>&, const Var<S>&, const std::vector<int>&, S);

EPIFT_INSTANTIATE_AUTODIFF(float)
EPIFT_INSTANTIATE_AUTODIFF(double)

}  // namespace epift
