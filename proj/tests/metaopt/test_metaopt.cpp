#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "epift/metaopt.hpp"
#include "support/oracles.hpp"

using namespace epift;
using epift::testing::central_difference;
using epift::testing::random_tensor;
using epift::testing::relative_error;

namespace {

// Gaussian blobs around one random mean image per class.
struct Blobs {
  std::vector<Tensor<float>> means;
  double noise = 0.5;
  Index bins = 16, frames = 16;

  Blobs(int classes, std::uint64_t seed, double noise_ = 0.5) : noise(noise_) {
    std::mt19937_64 rng(seed);
    for (int k = 0; k < classes; ++k) means.push_back(random_tensor<float>({bins, frames}, rng));
  }

  Sample draw(int k, std::mt19937_64& rng, int serial) const {
    std::normal_distribution<double> n(0.0, noise);
    auto t = std::make_shared<Tensor<float>>(means[static_cast<std::size_t>(k)]);
    for (Index i = 0; i < t->size(); ++i) (*t)[i] += static_cast<float>(n(rng));
    Sample s;
    s.features = t;
    s.class_id = k;
    s.source_id = "k" + std::to_string(k) + "_" + std::to_string(serial);
    return s;
  }

  Episode episode(const std::vector<int>& classes, int shot, int queries, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    Episode e;
    e.way = static_cast<int>(classes.size());
    e.shot = shot;
    e.classes = classes;
    int serial = 0;
    for (int c : classes) {
      e.support.emplace_back();
      for (int j = 0; j < shot; ++j) e.support.back().push_back(draw(c, rng, serial++));
    }
    for (std::size_t r = 0; r < classes.size(); ++r)
      for (int i = 0; i < queries; ++i) {
        e.query.push_back(draw(classes[r], rng, serial++));
        e.query_labels.push_back(static_cast<int>(r));
      }
    return e;
  }
};

MetaConfig small_config(Head head = Head::pn) {
  MetaConfig cfg;
  cfg.head.head = head;
  cfg.backbone = BackboneSpec::conv4(16, 16, {4, 4, 4, 4});
  if (head == Head::can) cfg.backbone.layout = EmbeddingLayout::map;
  cfg.alpha = 0.1;
  cfg.beta = 1e-2;
  cfg.rounds = 2;
  cfg.scheme = Scheme::rdft;
  cfg.train_classes = {0, 1, 2, 3, 4, 5};
  return cfg;
}

template <typename S>
bool same_values(const ParamSet<S>& a, const ParamSet<S>& b) {
  if (a.entries().size() != b.entries().size()) return false;
  for (std::size_t i = 0; i < a.entries().size(); ++i)
    if (!(a.entries()[i].var.value().array() == b.entries()[i].var.value().array()).all()) return false;
  return true;
}

template <typename S>
double max_abs_diff(const ParamSet<S>& a, const ParamSet<S>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.entries().size(); ++i)
    m = std::max(m, static_cast<double>(
                        (a.entries()[i].var.value().array() - b.entries()[i].var.value().array()).abs().maxCoeff()));
  return m;
}

}  // namespace

TEST_CASE("fresh curvature is the identity") {
  std::mt19937_64 rng(1);
  auto spec = BackboneSpec::conv4(16, 16, {4, 4, 4, 4});
  ParamSet<float> p;
  init_backbone(p, spec, rng);
  p.add("scalar", Tensor<float>::scalar(2.0f));
  for (auto mode : {CurvatureMode::diagonal, CurvatureMode::factored})
    for (Index cap : {Index(256), Index(2)}) {
      CurvatureSet<float> m(p, mode, cap);
      for (const auto& e : p.entries()) {
        auto g = Var<float>::constant(random_tensor<float>(e.var.shape(), rng, -5, 5));
        auto out = m.apply(e.name, g).value();
        REQUIRE(out.shape() == e.var.shape());
        CHECK((out.array() == g.value().array()).all());
      }
    }
  CurvatureSet<float> f(p, CurvatureMode::factored);
  // (4, 1, 9) view of the first conv weight
  CHECK(f.tensors().get("backbone/stage0/conv/weight/mode0").shape() == Shape{4, 4});
  CHECK(f.tensors().get("backbone/stage0/conv/weight/mode2").shape() == Shape{9, 9});
  CHECK(f.tensors().get("scalar/mode0").shape() == Shape{1, 1});
  CurvatureSet<float> capped(p, CurvatureMode::factored, 4);
  CHECK(capped.tensors().get("backbone/stage0/conv/weight/mode2").shape() == Shape{9});
}

TEST_CASE("factored curvature applies one matrix per mode") {
  ParamSet<double> p;
  p.add("w", Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
  CurvatureSet<double> m(p, CurvatureMode::factored);
  m.tensors().set("w/mode0", Var<double>::param(Tensor<double>({2, 2}, {0, 1, 1, 0})));
  m.tensors().set("w/mode1", Var<double>::param(Tensor<double>({3, 3}, {2, 0, 0, 0, 1, 0, 0, 0, 1})));
  // M0 G M1^T: swap rows, double the first column
  auto out = m.apply("w", Var<double>::constant(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}))).value();
  const std::vector<double> want = {8, 5, 6, 2, 2, 3};
  CHECK(std::vector<double>(out.data(), out.data() + 6) == want);
}

TEST_CASE("diagonal curvature scales the step") {
  ParamSet<double> p;
  p.add("theta", Tensor<double>::scalar(1.5));
  CurvatureSet<double> m(p, CurvatureMode::diagonal);
  m.tensors().set("theta", Var<double>::param(Tensor<double>::scalar(2.0)));
  auto step = m.apply("theta", Var<double>::constant(Tensor<double>::scalar(3.0)));
  const double next = sub(p.get("theta"), scale(step, 0.1)).value().item();
  CHECK(next == doctest::Approx(1.5 - 0.6).epsilon(1e-15));
}

TEST_CASE("inner adaptation") {
  Blobs data(6, 2);
  auto cfg = small_config();
  auto learner = init_learner<double>(cfg, 3);
  auto ep = data.episode({0, 1, 2}, 3, 2, 4);
  auto pseudo = make_pseudo_episodes(Scheme::rdft, ep.support, nullptr, 5);

  SUBCASE("identity curvature bit-matches plain SGD") {
    for (auto mode : {CurvatureMode::diagonal, CurvatureMode::factored}) {
      CurvatureSet<double> m(learner.params, mode);
      auto a = inner_adapt(learner.params, &m, pseudo, cfg, false);
      auto b = inner_adapt<double>(learner.params, nullptr, pseudo, cfg, false);
      CHECK(a.steps.size() == static_cast<std::size_t>(cfg.rounds) * pseudo.size());
      CHECK(same_values(a.params, b.params));
    }
  }
  SUBCASE("alpha zero leaves parameters unchanged") {
    auto c = cfg;
    c.alpha = 0.0;
    auto a = inner_adapt<double>(learner.params, &learner.curvature, pseudo, c, false);
    CHECK(same_values(a.params, learner.params));
  }
  SUBCASE("one update is theta - alpha M g") {
    auto c = cfg;
    c.rounds = 1;
    const std::vector<PseudoEpisode> one = {pseudo[0]};
    CurvatureSet<double> m(learner.params, CurvatureMode::diagonal);
    for (auto& e : m.tensors().entries()) e.var = Var<double>::param(Tensor<double>(e.var.shape(), 2.0));
    auto a = inner_adapt(learner.params, &m, one, c, false);
    auto loss = episode_loss(learner.params, c.backbone, c.head, view_of(one[0]), false).loss;
    auto g = grad(loss, std::span<const Var<double>>(learner.params.vars())).tensors();
    for (std::size_t i = 0; i < g.size(); ++i) {
      Tensor<double> want = learner.params.entries()[i].var.value();
      want.array() -= c.alpha * 2.0 * g[i].array();
      CHECK((a.params.entries()[i].var.value().array() - want.array()).abs().maxCoeff() <= 1e-15);
    }
  }
  SUBCASE("non-finite loss aborts with diagnostics") {
    auto bad = learner.params.clone();
    auto w = bad.get("backbone/stage3/norm/gamma").value();
    w[0] = std::numeric_limits<double>::quiet_NaN();
    bad.set("backbone/stage3/norm/gamma", Var<double>::param(w));
    try {
      inner_adapt<double>(bad, nullptr, pseudo, cfg, false);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      const std::string msg = e.what();
      INFO(msg);
      CHECK(msg.find("round 0") != std::string::npos);
      CHECK(msg.find("pseudo-episode 0") != std::string::npos);
    }
  }
}

TEST_CASE("meta-gradient through one inner step matches finite differences") {
  Blobs data(4, 6);
  auto cfg = small_config();
  cfg.scheme = Scheme::idft;  // N = 2 gives a single pseudo-episode
  cfg.rounds = 1;
  cfg.alpha = 0.3;
  cfg.backbone = BackboneSpec::conv4(16, 16, {2, 2, 2, 2});
  auto learner = init_learner<double>(cfg, 7);
  std::mt19937_64 rng(8);
  for (auto& e : learner.params.entries())
    if (e.name.find("conv/weight") != std::string::npos)
      e.var = Var<double>::param(random_tensor<double>(e.var.shape(), rng));
  learner.curvature = CurvatureSet<double>(learner.params, CurvatureMode::diagonal);
  for (auto& e : learner.curvature.tensors().entries())
    e.var = Var<double>::param(random_tensor<double>(e.var.shape(), rng, 0.5, 1.5));
  auto ep = data.episode({0, 1}, 2, 2, 9);
  auto pseudo = make_pseudo_episodes(cfg.scheme, ep.support, nullptr, 0);
  REQUIRE(pseudo.size() == 1);

  const std::size_t n_params = learner.params.entries().size();
  auto meta_loss = [&](const std::vector<Tensor<double>>& in) {
    ParamSet<double> p = learner.params.clone();
    CurvatureSet<double> m = learner.curvature.clone();
    for (std::size_t i = 0; i < n_params; ++i) p.entries()[i].var = Var<double>::param(in[i]);
    for (std::size_t i = n_params; i < in.size(); ++i) m.tensors().entries()[i - n_params].var = Var<double>::param(in[i]);
    auto a = inner_adapt(p, &m, pseudo, cfg, false);
    NoGradGuard off;
    return episode_loss(a.params, cfg.backbone, cfg.head, view_of(ep), false).loss.value().item();
  };

  for (auto order : {MetaOrder::second, MetaOrder::first}) {
    cfg.order = order;
    auto a = inner_adapt(learner.params, &learner.curvature, pseudo, cfg, true);
    auto loss = episode_loss(a.params, cfg.backbone, cfg.head, view_of(ep), false).loss;
    std::vector<Var<double>> wrt = learner.params.vars();
    for (const auto& v : learner.curvature.tensors().vars()) wrt.push_back(v);
    auto g = grad(loss, std::span<const Var<double>>(wrt)).tensors();
    std::vector<Tensor<double>> values;
    for (const auto& v : wrt) values.push_back(v.value());
    auto fd = central_difference(meta_loss, values, 1e-5);
    const double err = relative_error(g, fd);
    if (order == MetaOrder::second)
      CHECK(err <= 1e-4);
    else
      CHECK(err > 1e-4);  // dropping the Hessian term is visible
  }
}

TEST_CASE("meta step contracts") {
  Blobs data(6, 10);
  auto cfg = small_config();
  auto ep = data.episode({0, 1, 2}, 3, 2, 11);

  SUBCASE("beta zero leaves theta and M unchanged") {
    cfg.beta = 0.0;
    auto l = init_learner<double>(cfg, 12);
    const auto pt = l.params.checksum(), mt = l.curvature.checksum();
    auto r = meta_step(l, ep, cfg, 13);
    CHECK(r.inner_steps == cfg.rounds * 3);
    CHECK(l.params.checksum() == pt);
    CHECK(l.curvature.checksum() == mt);
  }
  SUBCASE("scheme none is plain episodic training") {
    cfg.scheme = Scheme::none;
    auto l = init_learner<double>(cfg, 12);
    auto before = l.params.clone();
    auto loss = episode_loss(l.params, cfg.backbone, cfg.head, view_of(ep), false).loss;
    auto g = grad(loss, std::span<const Var<double>>(l.params.vars())).tensors();
    auto r = meta_step(l, ep, cfg, 13);
    CHECK(r.inner_steps == 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      Tensor<double> want = before.entries()[i].var.value();
      want.array() -= cfg.beta * g[i].array();
      CHECK((l.params.entries()[i].var.value().array() - want.array()).abs().maxCoeff() <= 1e-15);
    }
  }
  SUBCASE("single-shot episodes cannot be split") {
    auto one = data.episode({0, 1, 2}, 1, 2, 14);
    auto l = init_learner<double>(cfg, 12);
    CHECK_THROWS_AS(meta_step(l, one, cfg, 1), ConfigError);
    cfg.scheme = Scheme::none;
    CHECK_NOTHROW(meta_step(l, one, cfg, 1));
  }
  SUBCASE("empty query is rejected") {
    auto l = init_learner<double>(cfg, 12);
    auto e = ep;
    e.query.clear();
    e.query_labels.clear();
    CHECK_THROWS_AS(meta_step(l, e, cfg, 1), DataError);
  }
  SUBCASE("curvature moves under MC and clipping bounds the step") {
    for (auto mode : {CurvatureMode::diagonal, CurvatureMode::factored}) {
      cfg.curvature = mode;
      auto l = init_learner<double>(cfg, 12);
      const auto mt = l.curvature.checksum();
      meta_step(l, ep, cfg, 13);
      CHECK(l.curvature.checksum() != mt);
    }
    cfg.curvature = CurvatureMode::diagonal;
    cfg.clip_norm = 1e-3;
    auto l = init_learner<double>(cfg, 12);
    auto before = l.params.clone();
    auto before_m = l.curvature.clone();
    auto r = meta_step(l, ep, cfg, 13);
    REQUIRE(r.grad_norm > cfg.clip_norm);
    double sq = 0;
    for (std::size_t i = 0; i < before.entries().size(); ++i)
      sq += (l.params.entries()[i].var.value().array() - before.entries()[i].var.value().array()).square().sum();
    for (std::size_t i = 0; i < before_m.tensors().entries().size(); ++i)
      sq += (l.curvature.tensors().entries()[i].var.value().array() -
             before_m.tensors().entries()[i].var.value().array())
                .square()
                .sum();
    CHECK(std::sqrt(sq) == doctest::Approx(cfg.beta * cfg.clip_norm).epsilon(1e-9));
  }
  SUBCASE("CAN meta step uses global labels") {
    auto c = small_config(Head::can);
    auto l = init_learner<double>(c, 12);
    auto r = meta_step(l, ep, c, 13);
    CHECK(std::isfinite(r.meta_loss));
    c.backbone.layout = EmbeddingLayout::flat;
    CHECK_THROWS_AS(init_learner<double>(c, 12), ConfigError);
  }
}

TEST_CASE("MC with identity curvature follows MAML") {
  Blobs data(6, 20);
  auto mc = small_config();
  mc.learn_curvature = false;
  auto maml = mc;
  maml.algo = MetaAlgo::maml;
  auto a = init_learner<double>(mc, 21);
  auto b = init_learner<double>(maml, 21);
  REQUIRE(b.curvature.empty());
  for (int step = 0; step < 5; ++step) {
    auto ep = data.episode({step % 6, (step + 1) % 6, (step + 3) % 6}, 3, 2, 100 + static_cast<std::uint64_t>(step));
    meta_step(a, ep, mc, static_cast<std::uint64_t>(step));
    meta_step(b, ep, maml, static_cast<std::uint64_t>(step));
  }
  CHECK(max_abs_diff(a.params, b.params) <= 1e-5);
}

TEST_CASE("fine-tuning evaluation is isolated") {
  Blobs data(6, 30);
  auto cfg = small_config();
  cfg.rounds = 1;
  auto l = init_learner<float>(cfg, 31);
  std::mt19937_64 warm(5);
  for (int i = 0; i < 3; ++i) meta_step(l, data.episode({0, 1, 2}, 3, 2, warm()), cfg, warm());
  const auto pt = l.params.checksum(), mt = l.curvature.checksum();

  std::vector<Episode> eps;
  for (int i = 0; i < 100; ++i) eps.push_back(data.episode({i % 6, (i + 2) % 6, (i + 4) % 6}, 2, 2, 1000 + i));
  std::vector<FinetuneRecord> fwd, rev(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) fwd.push_back(episode_finetune_eval(l, eps[i], cfg, i));
  CHECK(l.params.checksum() == pt);
  CHECK(l.curvature.checksum() == mt);
  for (std::size_t i = eps.size(); i-- > 0;) rev[i] = episode_finetune_eval(l, eps[i], cfg, i);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    CHECK(fwd[i].acc_before == rev[i].acc_before);
    CHECK(fwd[i].acc_after == rev[i].acc_after);
    CHECK(fwd[i].loss_after == rev[i].loss_after);
  }

  auto zero = cfg;
  zero.rounds = 0;
  auto r = episode_finetune_eval(l, eps[0], zero, 0);
  CHECK(r.acc_after == r.acc_before);
  CHECK(r.loss_after == r.loss_before);
}

TEST_CASE("meta training is deterministic") {
  Blobs data(6, 40);
  auto cfg = small_config();
  std::vector<double> runs[2];
  for (auto& run : runs) {
    auto l = init_learner<float>(cfg, 41);
    for (int i = 0; i < 4; ++i)
      run.push_back(meta_step(l, data.episode({i % 6, (i + 1) % 6, (i + 2) % 6}, 3, 2, 50 + i), cfg, i).meta_loss);
  }
  CHECK(runs[0] == runs[1]);
}

TEST_CASE("first and second order both reduce the meta-loss") {
  Blobs data(6, 60, 0.8);
  for (auto order : {MetaOrder::second, MetaOrder::first}) {
    auto cfg = small_config();
    cfg.order = order;
    cfg.rounds = 1;
    cfg.optimizer = OuterOptimizer::adam;
    cfg.alpha = 1e-3;  // conv weights start at sigma 0.02, so BN gradients are large
    cfg.beta = 3e-3;
    auto l = init_learner<float>(cfg, 61);
    std::mt19937_64 rng(62);
    std::vector<double> losses;
    for (int step = 0; step < 200; ++step) {
      std::vector<int> classes(6);
      std::iota(classes.begin(), classes.end(), 0);
      std::shuffle(classes.begin(), classes.end(), rng);
      classes.resize(3);
      losses.push_back(meta_step(l, data.episode(classes, 2, 4, rng()), cfg, rng()).meta_loss);
    }
    auto avg = [&](int from) { return std::accumulate(losses.begin() + from, losses.begin() + from + 40, 0.0) / 40; };
    INFO("order " << std::string(order == MetaOrder::second ? "second" : "first"));
    INFO("windows " << avg(0) << " " << avg(80) << " " << avg(160));
    CHECK(avg(160) < avg(0));
    CHECK(avg(160) < avg(80));
  }
}

TEST_CASE("fine-tuning rarely hurts on learnable episodes") {
  // Support clusters sit away from the class means the backbone has seen; a
  // few inner steps pull the prototypes toward them.
  Blobs data(5, 70, 0.3);
  auto cfg = small_config();
  cfg.rounds = 2;
  cfg.alpha = 0.05;
  auto l = init_learner<float>(cfg, 71);
  int ok = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto ep = data.episode({trial % 5, (trial + 1) % 5, (trial + 3) % 5}, 3, 3, 7000 + trial);
    auto r = episode_finetune_eval(l, ep, cfg, trial);
    ok += r.acc_after >= r.acc_before;
  }
  CHECK(ok >= 160);
}

TEST_CASE("learner checkpoints carry curvature") {
  auto cfg = small_config();
  cfg.curvature = CurvatureMode::factored;
  auto l = init_learner<double>(cfg, 80);
  for (auto& e : l.curvature.tensors().entries()) e.var.value();
  std::mt19937_64 rng(81);
  auto& first = l.curvature.tensors().entries()[0];
  first.var = Var<double>::param(random_tensor<double>(first.var.shape(), rng));
  Checkpoint ck;
  store_learner(ck, l);
  CHECK(ck.contains("curvature/" + first.name));
  auto back = Checkpoint::parse(ck.serialize());
  auto fresh = init_learner<double>(cfg, 99);
  restore_learner(back, fresh);
  CHECK(fresh.params.checksum() == l.params.checksum());
  CHECK(fresh.curvature.checksum() == l.curvature.checksum());
}
