#include <doctest.h>

#include <cstring>

#include "epift/checkpoint.hpp"
#include "epift/nn.hpp"
#include "support/oracles.hpp"

using namespace epift;
using epift::testing::central_difference;
using epift::testing::random_tensor;
using epift::testing::relative_error;

namespace {

// Shape propagation computed independently of BackboneSpec: pad-1 3x3 convs
// keep the extent, each 2x2 pool floors it by half.
Index expected_flat(Index bins, Index frames, Index channels) {
  for (int i = 0; i < 4; ++i) {
    bins = bins / 2;
    frames = frames / 2;
  }
  return channels * bins * frames;
}

template <typename S>
ParamSet<S> make_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet<S> p;
  init_backbone(p, spec, rng);
  return p;
}

}  // namespace

TEST_CASE("conv4 flat embedding length follows shape propagation") {
  const auto spec = BackboneSpec::conv4(128, 64);
  CHECK(spec.flat_size() == 2048);
  CHECK(spec.flat_size() == expected_flat(128, 64, 64));
  auto p = make_backbone<float>(spec, 1);
  std::mt19937_64 rng(2);
  auto x = Var<float>::constant(random_tensor<float>({2, 1, 128, 64}, rng));
  auto e = embed(p, spec, x);
  CHECK(e.shape() == Shape{2, 2048});
}

TEST_CASE("odd extents floor at every pool") {
  for (auto [b, f] : {std::pair<Index, Index>{37, 21}, {16, 16}, {31, 17}}) {
    auto spec = BackboneSpec::conv4(b, f, {4, 4, 4, 4});
    auto p = make_backbone<double>(spec, 3);
    std::mt19937_64 rng(4);
    auto e = embed(p, spec, Var<double>::constant(random_tensor<double>({3, 1, b, f}, rng)));
    CHECK(e.shape()[1] == expected_flat(b, f, 4));
  }
  CHECK_THROWS_AS(BackboneSpec::conv4(8, 64).map_shape(), ShapeError);
}

TEST_CASE("zeroed final layer gives zero embeddings") {
  for (auto spec : {BackboneSpec::conv4(32, 16, {4, 4, 4, 4}), BackboneSpec::resnet12_lite(32, 16, {4, 4, 6, 8})}) {
    auto p = make_backbone<double>(spec, 5);
    // The last normalization's affine output is the final linear map; with
    // gamma = beta = 0 every later op (relu, add of zeroed shortcut, pool)
    // keeps zeros.
    for (auto& e : p.entries())
      if (e.name.rfind("backbone/stage3/", 0) == 0 && (e.name.find("/gamma") != std::string::npos ||
                                                        e.name.find("/beta") != std::string::npos))
        e.var = Var<double>::param(Tensor<double>::zeros(e.var.shape()));
    std::mt19937_64 rng(6);
    auto e = embed(p, spec, Var<double>::constant(random_tensor<double>({3, 1, 32, 16}, rng, -5, 5)));
    CHECK(e.value().array().abs().maxCoeff() == 0.0);
  }
}

TEST_CASE("identical inputs embed identically and embed keeps no state") {
  auto spec = BackboneSpec::conv4(32, 16, {8, 8, 8, 8});
  auto p = make_backbone<float>(spec, 7);
  std::mt19937_64 rng(8);
  auto one = random_tensor<float>({1, 1, 32, 16}, rng);
  auto other = random_tensor<float>({1, 1, 32, 16}, rng);
  Tensor<float> batch({4, 1, 32, 16});
  batch.array() << one.array(), one.array(), other.array(), one.array();
  auto e = embed(p, spec, Var<float>::constant(batch)).value();
  const Index d = spec.flat_size();
  CHECK((e.array().segment(0, d) == e.array().segment(d, d)).all());
  CHECK((e.array().segment(0, d) == e.array().segment(3 * d, d)).all());
  auto again = embed(p, spec, Var<float>::constant(batch)).value();
  CHECK((again.array() == e.array()).all());
}

TEST_CASE("resnet12-lite exposes the map layout with the same contract") {
  auto spec = BackboneSpec::resnet12_lite(32, 16, {4, 6, 8, 10});
  CHECK(spec.layout == EmbeddingLayout::map);
  CHECK(spec.map_shape() == Shape{10, 2, 1});
  auto p = make_backbone<float>(spec, 9);
  std::mt19937_64 rng(10);
  auto e = embed(p, spec, Var<float>::constant(random_tensor<float>({2, 1, 32, 16}, rng)));
  CHECK(e.shape() == Shape{2, 10, 2, 1});
  CHECK(BackboneSpec::resnet12_lite(128, 64).widths == std::vector<Index>{32, 64, 128, 256});
  CHECK_THROWS_AS(embed(p, spec, Var<float>::constant(Tensor<float>({2, 1, 32, 15}))), ShapeError);
}

TEST_CASE("parameter set order, uniqueness, clone isolation and checksum") {
  auto spec = BackboneSpec::conv4(32, 16, {4, 4, 4, 4});
  auto p = make_backbone<float>(spec, 11);
  REQUIRE(p.size() == 12);
  CHECK(p.entries()[0].name == "backbone/stage0/conv/weight");
  CHECK(p.entries()[1].name == "backbone/stage0/norm/gamma");
  CHECK_THROWS_AS(p.add("backbone/stage0/norm/gamma", Tensor<float>({1})), ConfigError);

  auto c = p.clone();
  CHECK(c.checksum() == p.checksum());
  for (std::size_t i = 0; i < p.size(); ++i)
    CHECK(c.entries()[i].var.value().data() != p.entries()[i].var.value().data());
  const auto before = p.checksum();
  c.set("backbone/stage0/norm/beta", Var<float>::param(Tensor<float>({1, 4, 1, 1}, 0.5f)));
  CHECK(p.checksum() == before);
  CHECK(c.checksum() != before);
  CHECK_THROWS_AS(c.set("backbone/stage0/norm/beta", Var<float>::param(Tensor<float>({4}))), ShapeError);
}

TEST_CASE("initial weights follow a truncated normal with sigma 0.02") {
  std::mt19937_64 rng(12);
  auto t = truncated_normal<double>({20000}, 0.02, rng);
  CHECK(t.array().abs().maxCoeff() <= 0.04);
  const double mean = t.array().mean();
  const double sd = std::sqrt((t.array() - mean).square().mean());
  CHECK(std::abs(mean) < 1e-3);
  // stddev of N(0,1) truncated at +-2 is 0.8796
  CHECK(sd == doctest::Approx(0.02 * 0.8796).epsilon(0.03));
}

TEST_CASE("global classifier contract") {
  ParamSet<double> p;
  std::mt19937_64 rng(13);
  init_global_classifier(p, 6, 4, rng);
  auto x = Var<double>::constant(random_tensor<double>({1, 6}, rng));
  CHECK(global_classifier(p, x, 4).shape() == Shape{1, 4});
  CHECK_THROWS_AS(global_classifier(p, x, 5), ConfigError);
  ParamSet<double> tiny;
  CHECK_THROWS_AS(init_global_classifier(tiny, 6, 1, rng), ConfigError);

  p.set("global/weight", Var<double>::param(Tensor<double>::zeros({6, 4})));
  auto probs = softmax(global_classifier(p, x, 4), 1).value();
  for (Index k = 0; k < 4; ++k) CHECK(probs[k] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("global classifier cross-entropy gradient matches finite differences") {
  std::mt19937_64 rng(14);
  const auto x = random_tensor<double>({5, 6}, rng);
  const std::vector<int> labels = {0, 2, 1, 2, 0};
  auto w0 = random_tensor<double>({6, 3}, rng);
  auto b0 = random_tensor<double>({3}, rng);
  auto loss_of = [&](const Tensor<double>& w, const Tensor<double>& b, ParamSet<double>& p) {
    p = ParamSet<double>();
    p.add("global/weight", w);
    p.add("global/bias", b);
    return cross_entropy(global_classifier(p, Var<double>::constant(x), 3), labels);
  };
  ParamSet<double> p;
  auto loss = loss_of(w0, b0, p);
  auto g = grad(loss, std::span<const Var<double>>(p.vars())).tensors();
  auto fd = central_difference(
      [&](const std::vector<Tensor<double>>& in) {
        ParamSet<double> q;
        return loss_of(in[0], in[1], q).value().item();
      },
      {w0, b0}, 1e-5);
  CHECK(relative_error(g, fd) <= 1e-4);
}

TEST_CASE("frames are center-cropped or right-padded") {
  Tensor<float> f({2, 5}, {0, 1, 2, 3, 4, 10, 11, 12, 13, 14});
  auto crop = fit_frames(f, 3);
  CHECK(std::vector<float>(crop.data(), crop.data() + 6) == std::vector<float>{1, 2, 3, 11, 12, 13});
  auto pad = fit_frames(f, 7);
  CHECK(std::vector<float>(pad.data(), pad.data() + 14) ==
        std::vector<float>{0, 1, 2, 3, 4, 0, 0, 10, 11, 12, 13, 14, 0, 0});
  auto spec = BackboneSpec::conv4(2, 7, {1, 1, 1, 1});
  auto batch = stack_batch<double>({&f, &f}, spec);
  CHECK(batch.shape() == Shape{2, 1, 2, 7});
  CHECK(batch[7 + 14] == 10.0);
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(15);
  Checkpoint ck;
  ck.set_meta("head", "pn");
  ck.set_meta("note", "two words");
  auto a = random_tensor<float>({3, 4}, rng, -1e3, 1e3);
  a[0] = 1.17549435e-38f;  // smallest normal
  a[1] = -0.0f;
  auto b = random_tensor<double>({2, 1, 3}, rng);
  b[0] = 0.1;
  ck.add("backbone/w", a);
  ck.add("curvature/backbone/w", b);
  ck.add("s", Tensor<float>::scalar(3.5f));

  const std::string bytes = ck.serialize();
  CHECK(bytes.rfind("epift-checkpoint 1\n@head pn\n@note two words\nbackbone/w 3x4 f32 0\n", 0) == 0);
  CHECK(bytes.find("curvature/backbone/w 2x1x3 f64 48\ns scalar f32 96\nend\n") != std::string::npos);
  auto back = Checkpoint::parse(bytes);
  CHECK(back.serialize() == bytes);
  CHECK(back.meta("note") == "two words");
  auto a2 = back.get<float>("backbone/w");
  auto b2 = back.get<double>("curvature/backbone/w");
  CHECK(std::memcmp(a2.data(), a.data(), sizeof(float) * 12) == 0);
  CHECK(std::memcmp(b2.data(), b.data(), sizeof(double) * 6) == 0);
  CHECK(back.get<float>("s").item() == 3.5f);

  // little-endian payload: 3.5f is 0x40600000
  const std::string tail = bytes.substr(bytes.size() - 4);
  CHECK(tail == std::string("\x00\x00\x60\x40", 4));
}

TEST_CASE("parameter sets survive a file round trip") {
  auto spec = BackboneSpec::conv4(32, 16, {4, 4, 4, 4});
  auto p = make_backbone<float>(spec, 16);
  Checkpoint ck;
  store_params(ck, p);
  const auto path = std::filesystem::temp_directory_path() / "epift_nn_roundtrip.ckpt";
  ck.save(path);
  auto q = make_backbone<float>(spec, 99);
  CHECK(q.checksum() != p.checksum());
  restore_params(Checkpoint::load(path), q);
  CHECK(q.checksum() == p.checksum());
  std::filesystem::remove(path);

  auto wider = make_backbone<float>(BackboneSpec::conv4(32, 16, {4, 4, 4, 5}), 1);
  CHECK_THROWS_AS(restore_params(ck, wider), ConfigError);
  CHECK_THROWS_AS(Checkpoint::load("/nonexistent/dir/x.ckpt"), IoError);
}

TEST_CASE("malformed checkpoints report a byte offset") {
  Checkpoint ck;
  ck.add("w", Tensor<float>({2}, 1.0f));
  const std::string good = ck.serialize();
  auto offset_of = [](const std::string& bytes) -> long long {
    try {
      Checkpoint::parse(bytes);
    } catch (const ParseError& e) {
      return e.offset();
    }
    return -1;
  };
  CHECK(offset_of("nope\n") == 0);
  CHECK(offset_of(good.substr(0, good.size() - 1)) >= 0);
  CHECK(offset_of(good + "x") == static_cast<long long>(good.size()));
  std::string bad_dtype = good;
  bad_dtype.replace(bad_dtype.find("f32"), 3, "i16");
  CHECK(offset_of(bad_dtype) == static_cast<long long>(good.find("w ")));
  CHECK(offset_of("epift-checkpoint 1\nw 0x2 f32 0\nend\n") > 0);
}
