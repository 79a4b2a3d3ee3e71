#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "epift/tensor.hpp"

namespace epift {

template <typename Scalar>
class Var;

template <typename Scalar>
struct Node {
  using Backward = std::function<std::vector<Var<Scalar>>(const Var<Scalar>& self, const Var<Scalar>& grad)>;

  Tensor<Scalar> value;
  std::vector<Var<Scalar>> parents;
  // Returns one gradient per parent, built from differentiable ops so a
  // backward pass can itself be differentiated. Null entries mean "no
  // contribution".
  Backward backward;
  bool requires_grad = false;
  const char* op = "leaf";

  ~Node();
};

// Handle onto a node of the computation graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodeType = Node<Scalar>;
  using value_type = Scalar;

  Var() = default;
  explicit Var(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  // Trainable leaf.
  static Var param(Tensor<Scalar> value);
  static Var constant(Tensor<Scalar> value);

  const Tensor<Scalar>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  const char* op() const { return node_->op; }
  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<NodeType> node_;
};

// Gradient recording is per thread. Ops executed while disabled produce
// constants.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds a result node. Records parents and the backward rule only when
// recording is on and some parent requires grad.
template <typename Scalar>
Var<Scalar> make_node(Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                      typename Node<Scalar>::Backward backward, const char* op);

struct GradOptions {
  // Keep the backward pass on the graph so its results can be differentiated.
  bool create_graph = false;
};

template <typename Scalar>
struct Gradients {
  std::vector<Var<Scalar>> grads;
  // unreachable[i] is set when wrt[i] does not influence the output; its
  // gradient is then an explicit zero tensor.
  std::vector<bool> unreachable;

  bool any_unreachable() const;
  std::vector<Tensor<Scalar>> tensors() const;
};

// Reverse-mode gradient of a scalar output with respect to each node in wrt.
template <typename Scalar>
Gradients<Scalar> grad(const Var<Scalar>& output, std::span<const Var<Scalar>> wrt, GradOptions options = {});

// ---------------------------------------------------------------------------
// Elementary ops. Binary elementwise ops broadcast with numpy rules.

template <typename Scalar> Var<Scalar> detach(const Var<Scalar>& x);

template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> neg(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& x, Scalar factor);
template <typename Scalar> Var<Scalar> add_scalar(const Var<Scalar>& x, Scalar offset);

template <typename Scalar> Var<Scalar> broadcast_to(const Var<Scalar>& x, const Shape& shape);
// Sums broadcast axes away so the result has the given (broadcast-compatible) shape.
template <typename Scalar> Var<Scalar> sum_to(const Var<Scalar>& x, const Shape& shape);
template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& x, const Shape& shape);
template <typename Scalar> Var<Scalar> permute(const Var<Scalar>& x, const std::vector<int>& axes);
template <typename Scalar> Var<Scalar> transpose(const Var<Scalar>& x);  // 2-D

template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& x, const std::vector<int>& axes, bool keepdim = false);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& x, const std::vector<int>& axes, bool keepdim = false);
template <typename Scalar> Var<Scalar> sum_all(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> mean_all(const Var<Scalar>& x);

template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);  // (n,k)x(k,m)
template <typename Scalar> Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b);     // (b,n,k)x(b,k,m)

template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> exp(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> log(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> sqrt(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> pow(const Var<Scalar>& x, Scalar exponent);
template <typename Scalar> Var<Scalar> square(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> clamp_min(const Var<Scalar>& x, Scalar lo);

// Stride-1 2-D convolution, NCHW input and OIHW weight, symmetric zero padding.
template <typename Scalar> Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, Index padding = 0);
// Non-overlapping k x k max pooling (floor on odd extents).
template <typename Scalar> Var<Scalar> max_pool2d(const Var<Scalar>& x, Index kernel = 2);

// out.flat[i] = x.flat[index[i]]
template <typename Scalar> Var<Scalar> gather(const Var<Scalar>& x, std::shared_ptr<const std::vector<Index>> index, const Shape& out_shape);
// Adjoint of gather: out.flat[index[i]] += g.flat[i]
template <typename Scalar> Var<Scalar> scatter_add(const Var<Scalar>& g, std::shared_ptr<const std::vector<Index>> index, const Shape& out_shape);

// Axis-0 concatenation and slicing.
template <typename Scalar> Var<Scalar> concat(const std::vector<Var<Scalar>>& parts);
template <typename Scalar> Var<Scalar> rows(const Var<Scalar>& x, Index start, Index count);
template <typename Scalar> Var<Scalar> pad_rows(const Var<Scalar>& x, Index start, Index total);

// ---------------------------------------------------------------------------
// Composites. Gradients follow from the primitives above.

template <typename Scalar> Var<Scalar> softmax(const Var<Scalar>& x, int axis);
template <typename Scalar> Var<Scalar> log_softmax(const Var<Scalar>& x, int axis);
// Mean cross-entropy of row-wise logits (n, k) against integer labels.
template <typename Scalar> Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels);
// Mean negative log-likelihood of row-wise probabilities (n, k).
template <typename Scalar> Var<Scalar> nll_from_probs(const Var<Scalar>& probs, std::span<const int> labels);
// (n,d) x (m,d) -> (n,m) squared euclidean distances.
template <typename Scalar> Var<Scalar> squared_euclidean(const Var<Scalar>& a, const Var<Scalar>& b);
// (n,d) x (m,d) -> (n,m) cosine similarities; each norm clamped at 1e-12.
template <typename Scalar> Var<Scalar> cosine_similarity(const Var<Scalar>& a, const Var<Scalar>& b);
// Divides each vector along `axis` by its (clamped) L2 norm.
template <typename Scalar> Var<Scalar> l2_normalize(const Var<Scalar>& x, int axis);
// Normalization with statistics of the current batch over `axes`; gamma and
// beta are broadcast against x.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       const std::vector<int>& axes, Scalar eps = Scalar(1e-5));

inline constexpr double kNormClamp = 1e-12;

template <typename Scalar> Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar> Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar> Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <typename Scalar> Var<Scalar> operator/(const Var<Scalar>& a, const Var<Scalar>& b) { return div(a, b); }
template <typename Scalar> Var<Scalar> operator-(const Var<Scalar>& x) { return neg(x); }

}  // namespace epift
