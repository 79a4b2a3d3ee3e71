#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "epift/checkpoint.hpp"
#include "epift/episodes.hpp"
#include "epift/learners.hpp"
#include "epift/nn.hpp"
#include "epift/unroll.hpp"

namespace epift {

enum class MetaAlgo { maml, mc };
enum class CurvatureMode { diagonal, factored };
enum class OuterOptimizer { sgd, adam };

const char* to_string(MetaAlgo a);
const char* to_string(CurvatureMode m);
const char* to_string(OuterOptimizer o);
MetaAlgo parse_meta(const std::string& text);
CurvatureMode parse_curvature(const std::string& text);
OuterOptimizer parse_optimizer(const std::string& text);

// Learnable gradient transform, one block per trainable parameter.
//
// diagonal: a tensor of the parameter's shape, applied elementwise.
// factored: one square matrix per tensor mode, applied as successive mode
// products. Tensors of rank > 2 are viewed as (d0, d1, rest). Modes longer
// than max_factor_extent keep a per-index scale instead of a full matrix.
template <typename Scalar>
class CurvatureSet {
 public:
  CurvatureSet() = default;
  CurvatureSet(const ParamSet<Scalar>& params, CurvatureMode mode, Index max_factor_extent = 256,
               bool trainable = true);

  CurvatureMode mode() const { return mode_; }
  const ParamSet<Scalar>& tensors() const { return tensors_; }
  ParamSet<Scalar>& tensors() { return tensors_; }
  bool empty() const { return blocks_.empty(); }

  // Transforms the gradient of the named parameter; parameters without a
  // block pass through unchanged.
  Var<Scalar> apply(const std::string& param, const Var<Scalar>& g) const;

  CurvatureSet clone() const;
  std::uint64_t checksum() const { return tensors_.checksum(); }

 private:
  struct Factor {
    std::size_t entry;  // index into tensors_
    bool full;          // matrix (true) or per-index scale
  };
  struct Block {
    std::string param;
    Shape view;  // factored view of the parameter
    std::vector<Factor> factors;
  };
  CurvatureMode mode_ = CurvatureMode::diagonal;
  ParamSet<Scalar> tensors_;
  std::vector<Block> blocks_;
};

struct MetaConfig {
  BackboneSpec backbone;
  HeadConfig head;
  Scheme scheme = Scheme::adft;
  MetaAlgo algo = MetaAlgo::mc;
  CurvatureMode curvature = CurvatureMode::diagonal;
  bool learn_curvature = true;  // false keeps M at its identity init
  double alpha = 0.2;
  double beta = 1e-3;
  int rounds = 8;
  MetaOrder order = MetaOrder::second;
  OuterOptimizer optimizer = OuterOptimizer::sgd;
  double clip_norm = 0.0;  // <= 0 disables clipping
  std::optional<Augmenter> augmenter;
  std::vector<int> train_classes;  // global ids, in classifier order (CAN)
};

struct InnerStep {
  int round = 0;
  int episode = 0;
  double loss = 0.0;
};

template <typename Scalar>
struct Adapted {
  ParamSet<Scalar> params;
  std::vector<InnerStep> steps;
  std::size_t augment_failures = 0;
};

// Runs `rounds` passes over the pseudo-episodes, one curvature-transformed
// SGD update each. With record set the updates stay on the graph (inner
// gradients are differentiated only for second order); otherwise every
// update yields fresh leaves and nothing is retained.
template <typename Scalar>
Adapted<Scalar> inner_adapt(const ParamSet<Scalar>& params, const CurvatureSet<Scalar>* curvature,
                            const std::vector<PseudoEpisode>& pseudo, const MetaConfig& cfg, bool record);

template <typename Scalar>
struct OptimizerState {
  OuterOptimizer kind = OuterOptimizer::sgd;
  long step = 0;
  std::map<std::string, Tensor<Scalar>> m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct MetaStepResult {
  double meta_loss = 0.0;
  double query_accuracy = 0.0;
  double grad_norm = 0.0;  // before clipping
  int inner_steps = 0;
  std::size_t augment_failures = 0;
};

template <typename Scalar>
struct Learner {
  ParamSet<Scalar> params;
  CurvatureSet<Scalar> curvature;  // empty for MAML
  OptimizerState<Scalar> optimizer;
};

template <typename Scalar>
Learner<Scalar> init_learner(const MetaConfig& cfg, std::uint64_t seed);

// One outer update on a single episode. `seed` drives ADFT augmentation.
template <typename Scalar>
MetaStepResult meta_step(Learner<Scalar>& learner, const Episode& episode, const MetaConfig& cfg, std::uint64_t seed);

struct FinetuneRecord {
  double acc_before = 0.0;
  double acc_after = 0.0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::size_t augment_failures = 0;
};

// Query accuracy before and after episode-specific fine-tuning on
// pseudo-episodes built from the support set. Works on clones, so the
// learner is untouched.
template <typename Scalar>
FinetuneRecord episode_finetune_eval(const Learner<Scalar>& learner, const Episode& episode, const MetaConfig& cfg,
                                     std::uint64_t seed);

template <typename Scalar>
void store_learner(Checkpoint& ckpt, const Learner<Scalar>& learner);
template <typename Scalar>
void restore_learner(const Checkpoint& ckpt, Learner<Scalar>& learner);

}  // namespace epift
