#pragma once

#include <span>
#include <vector>

#include "epift/autodiff.hpp"

namespace epift {

enum class MetaOrder { first, second };

// Parameters after one or more differentiable SGD steps, together with the
// initial parameters they were derived from.
template <typename Scalar>
struct Unrolled {
  std::vector<Var<Scalar>> initial;
  std::vector<Var<Scalar>> adapted;
  // True when every step kept its backward pass on the graph.
  bool create_graph = true;
};

template <typename Scalar>
Unrolled<Scalar> unroll_start(std::vector<Var<Scalar>> params);

// adapted <- adapted - alpha * d(inner_loss)/d(adapted)
template <typename Scalar>
void unroll_sgd_step(Unrolled<Scalar>& state, const Var<Scalar>& inner_loss, Scalar alpha, bool create_graph);

// Gradient of the outer loss with respect to the initial parameters. The
// second-order result differentiates through the inner gradients; the
// first-order one treats them as constants, which makes d(adapted)/d(initial)
// the identity.
template <typename Scalar>
std::vector<Tensor<Scalar>> unrolled_adapt_grad(const Var<Scalar>& outer_loss, const Unrolled<Scalar>& state,
                                                MetaOrder order);

}  // namespace epift
