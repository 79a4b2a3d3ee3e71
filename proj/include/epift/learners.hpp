#pragma once

#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "epift/autodiff.hpp"
#include "epift/episodes.hpp"
#include "epift/nn.hpp"

namespace epift {

enum class Head { pn, mn, can };
enum class Distance { squared_euclidean, euclidean };

const char* to_string(Head h);
Head parse_head(const std::string& text);

struct HeadConfig {
  Head head = Head::pn;
  Distance distance = Distance::squared_euclidean;
  double tau = 0.1;     // CAN attention temperature
  double lambda = 1.0;  // CAN global-loss weight
};

// The layout a head needs from the backbone.
EmbeddingLayout layout_for(Head h);

// support_emb: (K, N, ...) -> (K, ...), mean over shots.
template <typename Scalar>
Var<Scalar> pn_prototypes(const Var<Scalar>& support_emb);

// query (Q, d), prototypes (K, d) -> (Q, K) negative distances.
template <typename Scalar>
Var<Scalar> pn_logits(const Var<Scalar>& query, const Var<Scalar>& prototypes, Distance distance);

template <typename Scalar>
Var<Scalar> pn_classify(const Var<Scalar>& query, const Var<Scalar>& prototypes, Distance distance);

// query (Q, d), support (S, d), labels in 0..way-1 -> (Q, way) class
// distributions: softmax over support of cosine similarity, summed per class.
template <typename Scalar>
Var<Scalar> mn_classify(const Var<Scalar>& query, const Var<Scalar>& support, std::span<const int> labels, int way);

// prototypes (K, c, h, w), queries (Q, c, h, w) -> R (Q, K, m, m) with
// R[q, k, i, p] = cos(prototype k at position i, query q at position p).
// Laid out as (channel, spatial), R is the query correlation map and its
// transpose over the last two axes is the class correlation map.
template <typename Scalar>
Var<Scalar> can_correlation(const Var<Scalar>& prototypes, const Var<Scalar>& queries);

// Rx (B, m, m) in (channel, spatial) layout; w1 (m, m1), w2 (m1, m).
// Returns (B, m): softmax over spatial positions i of (w . r_i) / tau, where
// w = relu(mean_spatial(Rx) w1) w2.
template <typename Scalar>
Var<Scalar> can_attention(const Var<Scalar>& rx, const Var<Scalar>& w1, const Var<Scalar>& w2, double tau);

// feature (..., c, m) scaled by (1 + A) with A (..., 1, m) broadcast over c.
template <typename Scalar>
Var<Scalar> can_apply_attention(const Var<Scalar>& feature, const Var<Scalar>& attention);

template <typename Scalar>
struct CanScores {
  Var<Scalar> logits;             // (Q, K)
  Var<Scalar> class_attention;    // (Q, K, h, w)
  Var<Scalar> query_attention;    // (Q, K, h, w)
};

// prototypes (K, c, h, w), queries (Q, c, h, w).
template <typename Scalar>
CanScores<Scalar> can_scores(const ParamSet<Scalar>& params, const Var<Scalar>& prototypes,
                             const Var<Scalar>& queries, const HeadConfig& cfg);

// Adds head parameters: CAN fusion weights and the global classifier.
template <typename Scalar>
void init_head(ParamSet<Scalar>& params, const HeadConfig& cfg, const BackboneSpec& spec, int n_train_classes,
               std::mt19937_64& rng);

// A labelled task in feature space: support ordered [class][shot].
struct TaskView {
  int way = 0;
  int shot = 0;
  std::vector<const Tensor<float>*> support;
  std::vector<const Tensor<float>*> query;
  std::vector<int> query_labels;  // 0..way-1
  std::vector<int> query_global;  // training-class index per query, or -1
};

TaskView view_of(const Episode& e);
TaskView view_of(const PseudoEpisode& pe);

// Maps each query's global class id to its index in train_classes (-1 when
// absent).
void attach_global_labels(TaskView& view, const Episode& e, const std::vector<int>& train_classes);

template <typename Scalar>
struct EpisodeResult {
  Var<Scalar> loss;
  Var<Scalar> logits;  // (Q, K); for MN these are log-probabilities
  std::vector<int> predictions;
  int correct = 0;
  double accuracy() const { return predictions.empty() ? 0.0 : double(correct) / double(predictions.size()); }
};

// Embeds support and query in one batch so normalization statistics cover the
// whole task, then applies the configured head. The CAN global term is added
// only when with_global is set and lambda != 0.
template <typename Scalar>
EpisodeResult<Scalar> episode_loss(const ParamSet<Scalar>& params, const BackboneSpec& spec, const HeadConfig& cfg,
                                   const TaskView& task, bool with_global);

// Row-major h x w grid, one CSV line per row.
void write_attention_csv(std::ostream& out, const Tensor<double>& grid);

}  // namespace epift
