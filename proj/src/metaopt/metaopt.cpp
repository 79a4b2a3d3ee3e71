#include "epift/metaopt.hpp"

#include <cmath>
#include <sstream>

namespace epift {

const char* to_string(MetaAlgo a) { return a == MetaAlgo::maml ? "maml" : "mc"; }
const char* to_string(CurvatureMode m) { return m == CurvatureMode::diagonal ? "diagonal" : "factored"; }
const char* to_string(OuterOptimizer o) { return o == OuterOptimizer::sgd ? "sgd" : "adam"; }

MetaAlgo parse_meta(const std::string& text) {
  if (text == "maml") return MetaAlgo::maml;
  if (text == "mc") return MetaAlgo::mc;
  throw ConfigError("unknown meta algorithm '" + text + "' (expected maml or mc)");
}

CurvatureMode parse_curvature(const std::string& text) {
  if (text == "diagonal") return CurvatureMode::diagonal;
  if (text == "factored") return CurvatureMode::factored;
  throw ConfigError("unknown curvature mode '" + text + "' (expected diagonal or factored)");
}

OuterOptimizer parse_optimizer(const std::string& text) {
  if (text == "sgd") return OuterOptimizer::sgd;
  if (text == "adam") return OuterOptimizer::adam;
  throw ConfigError("unknown optimizer '" + text + "' (expected sgd or adam)");
}

namespace {

Shape factored_view(const Shape& s) {
  if (s.empty()) return {1};
  if (s.size() <= 2) return s;
  Index rest = 1;
  for (std::size_t i = 2; i < s.size(); ++i) rest *= s[i];
  return {s[0], s[1], rest};
}

template <typename Scalar>
Tensor<Scalar> identity(Index n) {
  Tensor<Scalar> t = Tensor<Scalar>::zeros({n, n});
  for (Index i = 0; i < n; ++i) t[i * n + i] = Scalar(1);
  return t;
}

}  // namespace

template <typename Scalar>
CurvatureSet<Scalar>::CurvatureSet(const ParamSet<Scalar>& params, CurvatureMode mode, Index max_factor_extent,
                                   bool trainable)
    : mode_(mode) {
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    Block b;
    b.param = e.name;
    if (mode == CurvatureMode::diagonal) {
      b.view = e.var.shape();
      b.factors.push_back({tensors_.size(), false});
      tensors_.add(e.name, Tensor<Scalar>::ones(e.var.shape()), trainable);
    } else {
      b.view = factored_view(e.var.shape());
      for (std::size_t i = 0; i < b.view.size(); ++i) {
        const Index d = b.view[i];
        const bool full = d <= max_factor_extent;
        b.factors.push_back({tensors_.size(), full});
        tensors_.add(e.name + "/mode" + std::to_string(i), full ? identity<Scalar>(d) : Tensor<Scalar>::ones({d}),
                     trainable);
      }
    }
    blocks_.push_back(std::move(b));
  }
}

template <typename Scalar>
Var<Scalar> CurvatureSet<Scalar>::apply(const std::string& param, const Var<Scalar>& g) const {
  const Block* block = nullptr;
  for (const auto& b : blocks_)
    if (b.param == param) {
      block = &b;
      break;
    }
  if (!block) return g;
  const auto& entries = tensors_.entries();
  if (mode_ == CurvatureMode::diagonal) return mul(g, entries[block->factors[0].entry].var);

  const Shape original = g.shape();
  const Shape& view = block->view;
  Var<Scalar> x = reshape(g, view);
  for (std::size_t i = 0; i < view.size(); ++i) {
    Index before = 1, after = 1;
    for (std::size_t j = 0; j < i; ++j) before *= view[j];
    for (std::size_t j = i + 1; j < view.size(); ++j) after *= view[j];
    const Index d = view[i];
    const Var<Scalar>& f = entries[block->factors[i].entry].var;
    auto x3 = reshape(x, {before, d, after});
    if (block->factors[i].full) {
      auto moved = reshape(permute(x3, {1, 0, 2}), {d, before * after});
      x3 = permute(reshape(matmul(f, moved), {d, before, after}), {1, 0, 2});
    } else {
      x3 = mul(x3, reshape(f, {1, d, 1}));
    }
    x = reshape(x3, view);
  }
  return reshape(x, original);
}

template <typename Scalar>
CurvatureSet<Scalar> CurvatureSet<Scalar>::clone() const {
  CurvatureSet out;
  out.mode_ = mode_;
  out.tensors_ = tensors_.clone();
  out.blocks_ = blocks_;
  return out;
}

template <typename Scalar>
Adapted<Scalar> inner_adapt(const ParamSet<Scalar>& params, const CurvatureSet<Scalar>* curvature,
                            const std::vector<PseudoEpisode>& pseudo, const MetaConfig& cfg, bool record) {
  if (cfg.rounds < 0) throw ConfigError("rounds must be >= 0");
  if (cfg.alpha < 0) throw ConfigError("inner learning rate must be >= 0");
  Adapted<Scalar> out;
  out.params = params;
  if (pseudo.empty()) return out;
  const bool second = record && cfg.order == MetaOrder::second;
  const auto names = params.trainable_names();
  const Scalar alpha = static_cast<Scalar>(cfg.alpha);
  for (int r = 0; r < cfg.rounds; ++r)
    for (std::size_t e = 0; e < pseudo.size(); ++e) {
      EnableGradGuard recording;
      const TaskView view = view_of(pseudo[e]);
      auto fail = [&](const std::string& detail) {
        std::ostringstream msg;
        msg << detail << " at round " << r << ", pseudo-episode " << e;
        return NumericError(msg.str());
      };
      std::optional<EpisodeResult<Scalar>> res;
      try {
        res = episode_loss(out.params, cfg.backbone, cfg.head, view, false);
      } catch (const NumericError& err) {
        throw fail(std::string("inner loss: ") + err.what());
      }
      const double loss = static_cast<double>(res->loss.value().item());
      out.steps.push_back({r, static_cast<int>(e), loss});
      if (!std::isfinite(loss)) throw fail("non-finite inner loss " + std::to_string(loss));
      const auto vars = out.params.trainable_vars();
      auto g = grad(res->loss, std::span<const Var<Scalar>>(vars), GradOptions{second});
      std::optional<NoGradGuard> frozen;
      if (!record) frozen.emplace();
      for (std::size_t i = 0; i < names.size(); ++i) {
        Var<Scalar> step = curvature ? curvature->apply(names[i], g.grads[i]) : g.grads[i];
        Var<Scalar> next = sub(vars[i], scale(step, alpha));
        if (!record) next = Var<Scalar>::param(next.value());
        out.params.set(names[i], std::move(next));
      }
    }
  return out;
}

template <typename Scalar>
Learner<Scalar> init_learner(const MetaConfig& cfg, std::uint64_t seed) {
  if (cfg.head.head == Head::can && cfg.backbone.layout != EmbeddingLayout::map)
    throw ConfigError("the cross-attention head needs a feature-map backbone layout");
  std::mt19937_64 rng(seed);
  Learner<Scalar> l;
  init_backbone(l.params, cfg.backbone, rng);
  init_head(l.params, cfg.head, cfg.backbone, static_cast<int>(cfg.train_classes.size()), rng);
  if (cfg.algo == MetaAlgo::mc) l.curvature = CurvatureSet<Scalar>(l.params, cfg.curvature, 256, cfg.learn_curvature);
  l.optimizer.kind = cfg.optimizer;
  return l;
}

namespace {

template <typename Scalar>
void apply_update(ParamSet<Scalar>& set, const std::string& prefix, const std::vector<Tensor<Scalar>>& grads,
                  std::size_t offset, OptimizerState<Scalar>& opt, double lr) {
  const auto names = set.trainable_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor<Scalar>& g = grads[offset + i];
    Tensor<Scalar> value = set.get(names[i]).value();
    if (opt.kind == OuterOptimizer::sgd) {
      value.array() -= static_cast<Scalar>(lr) * g.array();
    } else {
      const std::string key = prefix + names[i];
      auto& m = opt.m.try_emplace(key, Tensor<Scalar>::zeros(g.shape())).first->second;
      auto& v = opt.v.try_emplace(key, Tensor<Scalar>::zeros(g.shape())).first->second;
      const Scalar b1 = static_cast<Scalar>(opt.beta1), b2 = static_cast<Scalar>(opt.beta2);
      m.array() = b1 * m.array() + (1 - b1) * g.array();
      v.array() = b2 * v.array() + (1 - b2) * g.array().square();
      const double c1 = 1 - std::pow(opt.beta1, static_cast<double>(opt.step));
      const double c2 = 1 - std::pow(opt.beta2, static_cast<double>(opt.step));
      const Scalar step = static_cast<Scalar>(lr * std::sqrt(c2) / c1);
      value.array() -= step * m.array() / (v.array().sqrt() + static_cast<Scalar>(opt.eps));
    }
    set.set(names[i], Var<Scalar>::param(std::move(value)));
  }
}

}  // namespace

template <typename Scalar>
MetaStepResult meta_step(Learner<Scalar>& learner, const Episode& episode, const MetaConfig& cfg, std::uint64_t seed) {
  if (episode.query.empty()) throw DataError("meta step needs a non-empty query set");
  const bool mc = cfg.algo == MetaAlgo::mc && !learner.curvature.empty();
  SplitStats stats;
  const auto pseudo = make_pseudo_episodes(cfg.scheme, episode.support, cfg.augmenter ? &*cfg.augmenter : nullptr,
                                           seed, &stats);
  MetaStepResult out;
  out.augment_failures = stats.augment_failures;

  EnableGradGuard recording;
  auto adapted = inner_adapt(learner.params, mc ? &learner.curvature : nullptr, pseudo, cfg, true);
  out.inner_steps = static_cast<int>(adapted.steps.size());
  TaskView view = view_of(episode);
  const bool global = cfg.head.head == Head::can;
  if (global) attach_global_labels(view, episode, cfg.train_classes);
  auto outer = episode_loss(adapted.params, cfg.backbone, cfg.head, view, global);
  out.meta_loss = static_cast<double>(outer.loss.value().item());
  out.query_accuracy = outer.accuracy();
  if (!std::isfinite(out.meta_loss))
    throw NumericError("non-finite meta loss " + std::to_string(out.meta_loss) + " after " +
                       std::to_string(out.inner_steps) + " inner steps");

  std::vector<Var<Scalar>> wrt = learner.params.trainable_vars();
  const std::size_t n_params = wrt.size();
  if (mc)
    for (const auto& v : learner.curvature.tensors().trainable_vars()) wrt.push_back(v);
  auto grads = grad(outer.loss, std::span<const Var<Scalar>>(wrt)).tensors();
  // release the unrolled graph before touching the parameters
  outer = {};
  adapted = {};

  double sq = 0.0;
  for (const auto& g : grads) sq += g.array().template cast<double>().square().sum();
  out.grad_norm = std::sqrt(sq);
  if (!std::isfinite(out.grad_norm)) throw NumericError("non-finite meta-gradient");
  if (cfg.clip_norm > 0 && out.grad_norm > cfg.clip_norm) {
    const Scalar f = static_cast<Scalar>(cfg.clip_norm / out.grad_norm);
    for (auto& g : grads) g.array() *= f;
  }

  ++learner.optimizer.step;
  apply_update(learner.params, "", grads, 0, learner.optimizer, cfg.beta);
  if (mc) apply_update(learner.curvature.tensors(), "curvature/", grads, n_params, learner.optimizer, cfg.beta);
  return out;
}

template <typename Scalar>
FinetuneRecord episode_finetune_eval(const Learner<Scalar>& learner, const Episode& episode, const MetaConfig& cfg,
                                     std::uint64_t seed) {
  const ParamSet<Scalar> params = learner.params.clone();
  const bool mc = cfg.algo == MetaAlgo::mc && !learner.curvature.empty();
  const CurvatureSet<Scalar> curvature = mc ? learner.curvature.clone() : CurvatureSet<Scalar>();
  const TaskView view = view_of(episode);

  FinetuneRecord rec;
  {
    NoGradGuard off;
    auto before = episode_loss(params, cfg.backbone, cfg.head, view, false);
    rec.acc_before = before.accuracy();
    rec.loss_before = static_cast<double>(before.loss.value().item());
  }
  SplitStats stats;
  const auto pseudo = make_pseudo_episodes(cfg.scheme, episode.support, cfg.augmenter ? &*cfg.augmenter : nullptr,
                                           seed, &stats);
  rec.augment_failures = stats.augment_failures;
  auto adapted = inner_adapt(params, mc ? &curvature : nullptr, pseudo, cfg, false);
  {
    NoGradGuard off;
    auto after = episode_loss(adapted.params, cfg.backbone, cfg.head, view, false);
    rec.acc_after = after.accuracy();
    rec.loss_after = static_cast<double>(after.loss.value().item());
  }
  return rec;
}

template <typename Scalar>
void store_learner(Checkpoint& ckpt, const Learner<Scalar>& learner) {
  store_params(ckpt, learner.params);
  store_params(ckpt, learner.curvature.tensors(), "curvature/");
}

template <typename Scalar>
void restore_learner(const Checkpoint& ckpt, Learner<Scalar>& learner) {
  restore_params(ckpt, learner.params);
  restore_params(ckpt, learner.curvature.tensors(), "curvature/");
}

#define EPIFT_INSTANTIATE_METAOPT(S)                                                                          \
  template class CurvatureSet<S>;                                                                             \
  template Adapted<S> inner_adapt<S>(const ParamSet<S>&, const CurvatureSet<S>*,                              \
                                     const std::vector<PseudoEpisode>&, const MetaConfig&, bool);             \
  template Learner<S> init_learner<S>(const MetaConfig&, std::uint64_t);                                      \
  template MetaStepResult meta_step<S>(Learner<S>&, const Episode&, const MetaConfig&, std::uint64_t);        \
  template FinetuneRecord episode_finetune_eval<S>(const Learner<S>&, const Episode&, const MetaConfig&,      \
                                                   std::uint64_t);                                            \
  template void store_learner<S>(Checkpoint&, const Learner<S>&);                                             \
  template void restore_learner<S>(const Checkpoint&, Learner<S>&);

EPIFT_INSTANTIATE_METAOPT(float)
EPIFT_INSTANTIATE_METAOPT(double)

}  // namespace epift
