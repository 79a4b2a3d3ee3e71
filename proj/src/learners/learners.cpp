#include "epift/learners.hpp"

#include <algorithm>
#include <iomanip>
#include <limits>

namespace epift {

const char* to_string(Head h) {
  switch (h) {
    case Head::pn: return "pn";
    case Head::mn: return "mn";
    case Head::can: return "can";
  }
  return "?";
}

Head parse_head(const std::string& text) {
  if (text == "pn") return Head::pn;
  if (text == "mn") return Head::mn;
  if (text == "can") return Head::can;
  throw ConfigError("unknown head '" + text + "' (expected pn, mn or can)");
}

EmbeddingLayout layout_for(Head h) { return h == Head::can ? EmbeddingLayout::map : EmbeddingLayout::flat; }

template <typename Scalar>
Var<Scalar> pn_prototypes(const Var<Scalar>& support_emb) {
  if (support_emb.shape().size() < 3) throw ShapeError("prototypes need (K, N, ...) embeddings, got " +
                                                       shape_str(support_emb.shape()));
  return mean(support_emb, {1});
}

template <typename Scalar>
Var<Scalar> pn_logits(const Var<Scalar>& query, const Var<Scalar>& prototypes, Distance distance) {
  auto d2 = squared_euclidean(query, prototypes);
  if (distance == Distance::euclidean) return neg(sqrt(clamp_min(d2, Scalar(1e-12))));
  return neg(d2);
}

template <typename Scalar>
Var<Scalar> pn_classify(const Var<Scalar>& query, const Var<Scalar>& prototypes, Distance distance) {
  return softmax(pn_logits(query, prototypes, distance), 1);
}

template <typename Scalar>
Var<Scalar> mn_classify(const Var<Scalar>& query, const Var<Scalar>& support, std::span<const int> labels, int way) {
  const Index s = support.shape()[0];
  if (static_cast<Index>(labels.size()) != s)
    throw ShapeError("matching network got " + std::to_string(labels.size()) + " labels for " + std::to_string(s) +
                     " support embeddings");
  Tensor<Scalar> onehot = Tensor<Scalar>::zeros({s, way});
  for (Index i = 0; i < s; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= way) throw DataError("support label " + std::to_string(y) + " outside 0.." + std::to_string(way - 1));
    onehot[i * way + y] = Scalar(1);
  }
  // softmax of negative cosine distance equals softmax of the similarity
  auto attention = softmax(cosine_similarity(query, support), 1);
  return matmul(attention, Var<Scalar>::constant(std::move(onehot)));
}

template <typename Scalar>
Var<Scalar> can_correlation(const Var<Scalar>& prototypes, const Var<Scalar>& queries) {
  const Shape& ps = prototypes.shape();
  const Shape& qs = queries.shape();
  if (ps.size() != 4 || qs.size() != 4 || ps[1] != qs[1] || ps[2] != qs[2] || ps[3] != qs[3])
    throw ShapeError("correlation needs (K,c,h,w) and (Q,c,h,w) maps, got " + shape_str(ps) + " and " + shape_str(qs));
  const Index K = ps[0], Q = qs[0], c = ps[1], m = ps[2] * ps[3];
  auto p = l2_normalize(reshape(prototypes, {K, c, m}), 1);
  auto q = l2_normalize(reshape(queries, {Q, c, m}), 1);
  auto pm = reshape(permute(p, {0, 2, 1}), {K * m, c});
  auto qm = reshape(permute(q, {1, 0, 2}), {c, Q * m});
  auto r = reshape(matmul(pm, qm), {K, m, Q, m});
  return permute(r, {2, 0, 1, 3});
}

template <typename Scalar>
Var<Scalar> can_attention(const Var<Scalar>& rx, const Var<Scalar>& w1, const Var<Scalar>& w2, double tau) {
  if (!(tau > 0)) throw ConfigError("attention temperature must be positive, got " + std::to_string(tau));
  const Shape& s = rx.shape();
  if (s.size() != 3 || s[1] != s[2]) throw ShapeError("attention expects (B, m, m) correlations, got " + shape_str(s));
  const Index b = s[0], m = s[1];
  if (w1.shape().size() != 2 || w1.shape()[0] != m || w2.shape().size() != 2 || w2.shape()[1] != m ||
      w2.shape()[0] != w1.shape()[1])
    throw ShapeError("fusion weights " + shape_str(w1.shape()) + " and " + shape_str(w2.shape()) +
                     " do not fit m = " + std::to_string(m));
  auto gap = mean(rx, {2});
  auto kernel = matmul(relu(matmul(gap, w1)), w2);
  auto fused = bmm(reshape(kernel, {b, 1, m}), rx);
  return reshape(softmax(scale(fused, static_cast<Scalar>(1.0 / tau)), 2), {b, m});
}

template <typename Scalar>
Var<Scalar> can_apply_attention(const Var<Scalar>& feature, const Var<Scalar>& attention) {
  return mul(feature, add_scalar(attention, Scalar(1)));
}

template <typename Scalar>
CanScores<Scalar> can_scores(const ParamSet<Scalar>& params, const Var<Scalar>& prototypes,
                             const Var<Scalar>& queries, const HeadConfig& cfg) {
  const Shape& ps = prototypes.shape();
  const Index K = ps[0], Q = queries.shape()[0], c = ps[1], h = ps[2], w = ps[3], m = h * w;
  auto r = can_correlation(prototypes, queries);
  auto rq = reshape(r, {Q * K, m, m});
  auto rc = reshape(permute(r, {0, 1, 3, 2}), {Q * K, m, m});
  const auto& w1 = params.get("head/fusion/w1");
  const auto& w2 = params.get("head/fusion/w2");
  auto aq = can_attention(rq, w1, w2, cfg.tau);
  auto ac = can_attention(rc, w1, w2, cfg.tau);
  auto pa = can_apply_attention(reshape(prototypes, {1, K, c, m}), reshape(ac, {Q, K, 1, m}));
  auto qa = can_apply_attention(reshape(queries, {Q, 1, c, m}), reshape(aq, {Q, K, 1, m}));
  auto d2 = sum(square(sub(pa, qa)), {2, 3});
  CanScores<Scalar> out;
  out.logits = cfg.distance == Distance::euclidean ? neg(sqrt(clamp_min(d2, Scalar(1e-12)))) : neg(d2);
  out.class_attention = reshape(ac, {Q, K, h, w});
  out.query_attention = reshape(aq, {Q, K, h, w});
  return out;
}

template <typename Scalar>
void init_head(ParamSet<Scalar>& params, const HeadConfig& cfg, const BackboneSpec& spec, int n_train_classes,
               std::mt19937_64& rng) {
  if (cfg.head != Head::can) return;
  const Shape map = spec.map_shape();
  const Index m = map[1] * map[2];
  const Index hidden = std::max<Index>(1, m / 2);
  params.add("head/fusion/w1", truncated_normal<Scalar>({m, hidden}, 0.02, rng));
  params.add("head/fusion/w2", truncated_normal<Scalar>({hidden, m}, 0.02, rng));
  init_global_classifier(params, spec.flat_size(), n_train_classes, rng);
}

TaskView view_of(const Episode& e) {
  TaskView v;
  v.way = e.way;
  v.shot = e.shot;
  for (const auto& row : e.support)
    for (const auto& s : row) v.support.push_back(s.features.get());
  for (const auto& s : e.query) v.query.push_back(s.features.get());
  v.query_labels = e.query_labels;
  return v;
}

TaskView view_of(const PseudoEpisode& pe) {
  TaskView v;
  v.way = static_cast<int>(pe.support.size());
  v.shot = v.way ? static_cast<int>(pe.support[0].size()) : 0;
  for (const auto& row : pe.support)
    for (const auto& s : row) v.support.push_back(s.features.get());
  for (int k = 0; k < v.way; ++k) {
    v.query.push_back(pe.query[static_cast<std::size_t>(k)].features.get());
    v.query_labels.push_back(k);
  }
  return v;
}

void attach_global_labels(TaskView& view, const Episode& e, const std::vector<int>& train_classes) {
  view.query_global.clear();
  for (const auto& s : e.query) {
    auto it = std::find(train_classes.begin(), train_classes.end(), s.class_id);
    view.query_global.push_back(it == train_classes.end() ? -1 : static_cast<int>(it - train_classes.begin()));
  }
}

namespace {

template <typename Scalar>
void score(EpisodeResult<Scalar>& out, const std::vector<int>& labels) {
  const Tensor<Scalar>& l = out.logits.value();
  const Index q = l.dim(0), k = l.dim(1);
  out.predictions.clear();
  out.correct = 0;
  for (Index i = 0; i < q; ++i) {
    Index best = 0;
    for (Index j = 1; j < k; ++j)
      if (l[i * k + j] > l[i * k + best]) best = j;
    out.predictions.push_back(static_cast<int>(best));
    if (best == labels[static_cast<std::size_t>(i)]) ++out.correct;
  }
}

}  // namespace

template <typename Scalar>
EpisodeResult<Scalar> episode_loss(const ParamSet<Scalar>& params, const BackboneSpec& spec, const HeadConfig& cfg,
                                   const TaskView& task, bool with_global) {
  const Index K = task.way, N = task.shot;
  const Index ns = static_cast<Index>(task.support.size()), nq = static_cast<Index>(task.query.size());
  if (K < 1 || N < 1 || ns != K * N) throw ShapeError("support holds " + std::to_string(ns) + " samples, expected " +
                                                      std::to_string(K) + "x" + std::to_string(N));
  if (nq == 0 || static_cast<Index>(task.query_labels.size()) != nq) throw ShapeError("query labels do not match queries");
  for (int y : task.query_labels)
    if (y < 0 || y >= K) throw DataError("query label " + std::to_string(y) + " is outside the episode's " +
                                         std::to_string(K) + " classes");

  std::vector<const Tensor<float>*> all = task.support;
  all.insert(all.end(), task.query.begin(), task.query.end());
  auto emb = embed(params, spec, Var<Scalar>::constant(stack_batch<Scalar>(all, spec)));
  auto sup = rows(emb, 0, ns);
  auto qry = rows(emb, ns, nq);

  EpisodeResult<Scalar> out;
  if (cfg.head == Head::can) {
    if (emb.shape().size() != 4) throw ShapeError("CAN needs feature maps; backbone produced " + shape_str(emb.shape()));
    Shape grid = sup.shape();
    grid.insert(grid.begin() + 1, N);
    grid[0] = K;
    auto protos = pn_prototypes(reshape(sup, grid));
    out.logits = can_scores(params, protos, qry, cfg).logits;
    out.loss = cross_entropy(out.logits, task.query_labels);
    if (with_global && cfg.lambda != 0.0) {
      if (static_cast<Index>(task.query_global.size()) != nq)
        throw DataError("global loss needs a training-class label for every query");
      for (int g : task.query_global)
        if (g < 0) throw DataError("query class is not part of the training split");
      const int classes = static_cast<int>(params.get("global/weight").shape()[1]);
      auto global = cross_entropy(global_classifier(params, qry, classes), task.query_global);
      out.loss = add(out.loss, scale(global, static_cast<Scalar>(cfg.lambda)));
    }
  } else {
    const Index d = emb.size() / (ns + nq);
    auto sflat = reshape(sup, {ns, d});
    auto qflat = reshape(qry, {nq, d});
    if (cfg.head == Head::pn) {
      auto protos = pn_prototypes(reshape(sflat, {K, N, d}));
      out.logits = pn_logits(qflat, protos, cfg.distance);
      out.loss = cross_entropy(out.logits, task.query_labels);
    } else {
      std::vector<int> labels;
      for (int k = 0; k < K; ++k)
        for (int j = 0; j < N; ++j) labels.push_back(k);
      auto probs = mn_classify(qflat, sflat, labels, static_cast<int>(K));
      out.logits = log(probs);
      out.loss = nll_from_probs(probs, task.query_labels);
    }
  }
  score(out, task.query_labels);
  return out;
}

void write_attention_csv(std::ostream& out, const Tensor<double>& grid) {
  if (grid.rank() != 2) throw ShapeError("attention grid must be h x w, got " + shape_str(grid.shape()));
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Index r = 0; r < grid.dim(0); ++r) {
    for (Index c = 0; c < grid.dim(1); ++c) out << (c ? "," : "") << grid[r * grid.dim(1) + c];
    out << '\n';
  }
}

#define EPIFT_INSTANTIATE_LEARNERS(S)                                                                         \
  template Var<S> pn_prototypes<S>(const Var<S>&);                                                            \
  template Var<S> pn_logits<S>(const Var<S>&, const Var<S>&, Distance);                                       \
  template Var<S> pn_classify<S>(const Var<S>&, const Var<S>&, Distance);                                     \
  template Var<S> mn_classify<S>(const Var<S>&, const Var<S>&, std::span<const int>, int);                    \
  template Var<S> can_correlation<S>(const Var<S>&, const Var<S>&);                                           \
  template Var<S> can_attention<S>(const Var<S>&, const Var<S>&, const Var<S>&, double);                      \
  template Var<S> can_apply_attention<S>(const Var<S>&, const Var<S>&);                                       \
  template CanScores<S> can_scores<S>(const ParamSet<S>&, const Var<S>&, const Var<S>&, const HeadConfig&);   \
  template void init_head<S>(ParamSet<S>&, const HeadConfig&, const BackboneSpec&, int, std::mt19937_64&);    \
  template EpisodeResult<S> episode_loss<S>(const ParamSet<S>&, const BackboneSpec&, const HeadConfig&,       \
                                            const TaskView&, bool);

EPIFT_INSTANTIATE_LEARNERS(float)
EPIFT_INSTANTIATE_LEARNERS(double)

}  // namespace epift
