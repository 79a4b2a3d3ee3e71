#include "epift/unroll.hpp"

namespace epift {

template <typename Scalar>
Unrolled<Scalar> unroll_start(std::vector<Var<Scalar>> params) {
  Unrolled<Scalar> s;
  s.initial = params;
  s.adapted = std::move(params);
  return s;
}

template <typename Scalar>
void unroll_sgd_step(Unrolled<Scalar>& state, const Var<Scalar>& inner_loss, Scalar alpha, bool create_graph) {
  auto g = grad(inner_loss, std::span<const Var<Scalar>>(state.adapted), GradOptions{create_graph});
  EnableGradGuard recording;
  for (std::size_t i = 0; i < state.adapted.size(); ++i)
    state.adapted[i] = sub(state.adapted[i], scale(g.grads[i], alpha));
  state.create_graph = state.create_graph && create_graph;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> unrolled_adapt_grad(const Var<Scalar>& outer_loss, const Unrolled<Scalar>& state,
                                                MetaOrder order) {
  if (order == MetaOrder::second) {
    if (!state.create_graph)
      throw ConfigError("second-order meta-gradient requested but the inner steps were built without create_graph");
    return grad(outer_loss, std::span<const Var<Scalar>>(state.initial)).tensors();
  }
  return grad(outer_loss, std::span<const Var<Scalar>>(state.adapted)).tensors();
}

template Unrolled<float> unroll_start<float>(std::vector<Var<float>>);
template Unrolled<double> unroll_start<double>(std::vector<Var<double>>);
template void unroll_sgd_step<float>(Unrolled<float>&, const Var<float>&, float, bool);
template void unroll_sgd_step<double>(Unrolled<double>&, const Var<double>&, double, bool);
template std::vector<Tensor<float>> unrolled_adapt_grad<float>(const Var<float>&, const Unrolled<float>&, MetaOrder);
template std::vector<Tensor<double>> unrolled_adapt_grad<double>(const Var<double>&, const Unrolled<double>&, MetaOrder);

}  // namespace epift
