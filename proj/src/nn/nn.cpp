#include "epift/nn.hpp"

#include <cstring>

namespace epift {

template <typename Scalar>
void ParamSet<Scalar>::add(std::string name, Tensor<Scalar> value, bool trainable) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  entries_.push_back({std::move(name), Var<Scalar>::param(std::move(value)), trainable});
}

template <typename Scalar>
bool ParamSet<Scalar>::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

template <typename Scalar>
const Var<Scalar>& ParamSet<Scalar>::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.var;
  throw ConfigError("unknown parameter: " + name);
}

template <typename Scalar>
void ParamSet<Scalar>::set(const std::string& name, Var<Scalar> var) {
  for (auto& e : entries_)
    if (e.name == name) {
      if (e.var.shape() != var.shape())
        throw ShapeError("parameter " + name + " expects shape " + shape_str(e.var.shape()) + ", got " +
                         shape_str(var.shape()));
      e.var = std::move(var);
      return;
    }
  throw ConfigError("unknown parameter: " + name);
}

template <typename Scalar>
std::vector<Var<Scalar>> ParamSet<Scalar>::vars() const {
  std::vector<Var<Scalar>> v;
  for (const auto& e : entries_) v.push_back(e.var);
  return v;
}

template <typename Scalar>
std::vector<Var<Scalar>> ParamSet<Scalar>::trainable_vars() const {
  std::vector<Var<Scalar>> v;
  for (const auto& e : entries_)
    if (e.trainable) v.push_back(e.var);
  return v;
}

template <typename Scalar>
std::vector<std::string> ParamSet<Scalar>::trainable_names() const {
  std::vector<std::string> v;
  for (const auto& e : entries_)
    if (e.trainable) v.push_back(e.name);
  return v;
}

template <typename Scalar>
ParamSet<Scalar> ParamSet<Scalar>::clone() const {
  ParamSet out;
  for (const auto& e : entries_) {
    Tensor<Scalar> copy = e.var.value();
    out.entries_.push_back({e.name, Var<Scalar>::param(std::move(copy)), e.trainable});
  }
  return out;
}

template <typename Scalar>
std::uint64_t ParamSet<Scalar>::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& e : entries_) {
    mix(e.name.data(), e.name.size());
    for (Index d : e.var.shape()) mix(&d, sizeof d);
    mix(e.var.value().data(), sizeof(Scalar) * static_cast<std::size_t>(e.var.size()));
  }
  return h;
}

const char* to_string(BackboneKind kind) {
  return kind == BackboneKind::conv4 ? "conv4" : "resnet12-lite";
}

BackboneKind parse_backbone(const std::string& text) {
  if (text == "conv4") return BackboneKind::conv4;
  if (text == "resnet12-lite") return BackboneKind::resnet12_lite;
  throw ConfigError("unknown backbone '" + text + "' (expected conv4 or resnet12-lite)");
}

BackboneSpec BackboneSpec::conv4(Index mel_bins, Index frames, std::vector<Index> widths) {
  return BackboneSpec{BackboneKind::conv4, mel_bins, frames, std::move(widths), EmbeddingLayout::flat};
}

BackboneSpec BackboneSpec::resnet12_lite(Index mel_bins, Index frames, std::vector<Index> widths) {
  return BackboneSpec{BackboneKind::resnet12_lite, mel_bins, frames, std::move(widths), EmbeddingLayout::map};
}

Shape BackboneSpec::map_shape() const {
  if (widths.size() != 4) throw ConfigError("backbones have exactly 4 stages, got " + std::to_string(widths.size()));
  Index h = mel_bins, w = frames;
  for (int i = 0; i < 4; ++i) {
    h /= 2;
    w /= 2;
  }
  if (h < 1 || w < 1)
    throw ShapeError("input " + std::to_string(mel_bins) + "x" + std::to_string(frames) +
                     " is too small for four 2x2 poolings");
  return {widths.back(), h, w};
}

template <typename Scalar>
Tensor<Scalar> truncated_normal(const Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) {
    double z;
    do z = n(rng);
    while (std::abs(z) > 2.0);
    t[i] = static_cast<Scalar>(z * stddev);
  }
  return t;
}

namespace {

constexpr double kInitStd = 0.02;

template <typename Scalar>
void add_conv(ParamSet<Scalar>& p, const std::string& prefix, Index in, Index out, Index k, std::mt19937_64& rng) {
  p.add(prefix + "/weight", truncated_normal<Scalar>({out, in, k, k}, kInitStd, rng));
}

template <typename Scalar>
void add_norm(ParamSet<Scalar>& p, const std::string& prefix, Index channels) {
  p.add(prefix + "/gamma", Tensor<Scalar>::ones({1, channels, 1, 1}));
  p.add(prefix + "/beta", Tensor<Scalar>::zeros({1, channels, 1, 1}));
}

template <typename Scalar>
Var<Scalar> conv_norm(const ParamSet<Scalar>& p, const std::string& prefix, const Var<Scalar>& x, Index pad) {
  auto y = conv2d(x, p.get(prefix + "/conv/weight"), pad);
  return batch_norm(y, p.get(prefix + "/norm/gamma"), p.get(prefix + "/norm/beta"), {0, 2, 3});
}

}  // namespace

template <typename Scalar>
void init_backbone(ParamSet<Scalar>& params, const BackboneSpec& spec, std::mt19937_64& rng) {
  spec.map_shape();  // validates geometry
  Index in = 1;
  for (std::size_t s = 0; s < spec.widths.size(); ++s) {
    const Index out = spec.widths[s];
    const std::string stage = "backbone/stage" + std::to_string(s);
    if (spec.kind == BackboneKind::conv4) {
      add_conv(params, stage + "/conv", in, out, 3, rng);
      add_norm(params, stage + "/norm", out);
    } else {
      for (int j = 0; j < 3; ++j) {
        const std::string layer = stage + "/layer" + std::to_string(j);
        add_conv(params, layer + "/conv", j == 0 ? in : out, out, 3, rng);
        add_norm(params, layer + "/norm", out);
      }
      add_conv(params, stage + "/shortcut/conv", in, out, 1, rng);
      add_norm(params, stage + "/shortcut/norm", out);
    }
    in = out;
  }
}

template <typename Scalar>
Var<Scalar> embed(const ParamSet<Scalar>& params, const BackboneSpec& spec, const Var<Scalar>& batch) {
  const Shape& s = batch.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != spec.mel_bins || s[3] != spec.frames)
    throw ShapeError("embed expects (B, 1, " + std::to_string(spec.mel_bins) + ", " + std::to_string(spec.frames) +
                     "), got " + shape_str(s));
  Var<Scalar> x = batch;
  for (std::size_t st = 0; st < spec.widths.size(); ++st) {
    const std::string stage = "backbone/stage" + std::to_string(st);
    if (spec.kind == BackboneKind::conv4) {
      x = relu(conv_norm(params, stage, x, 1));
    } else {
      Var<Scalar> h = x;
      for (int j = 0; j < 3; ++j) {
        h = conv_norm(params, stage + "/layer" + std::to_string(j), h, 1);
        if (j < 2) h = relu(h);
      }
      x = relu(add(h, conv_norm(params, stage + "/shortcut", x, 0)));
    }
    x = max_pool2d(x, 2);
  }
  if (spec.layout == EmbeddingLayout::flat) return reshape(x, {s[0], spec.flat_size()});
  return x;
}

template <typename Scalar>
void init_global_classifier(ParamSet<Scalar>& params, Index in_features, int n_train_classes, std::mt19937_64& rng) {
  if (n_train_classes < 2) throw ConfigError("global classifier needs at least 2 training classes");
  params.add("global/weight", truncated_normal<Scalar>({in_features, n_train_classes}, kInitStd, rng));
  params.add("global/bias", Tensor<Scalar>::zeros({n_train_classes}));
}

template <typename Scalar>
Var<Scalar> global_classifier(const ParamSet<Scalar>& params, const Var<Scalar>& embeddings, int n_train_classes) {
  const auto& w = params.get("global/weight");
  if (w.shape()[1] != n_train_classes)
    throw ConfigError("global classifier was built for " + std::to_string(w.shape()[1]) + " training classes, not " +
                      std::to_string(n_train_classes));
  const Index batch = embeddings.shape()[0];
  auto flat = reshape(embeddings, {batch, embeddings.size() / batch});
  if (flat.shape()[1] != w.shape()[0])
    throw ShapeError("global classifier expects " + std::to_string(w.shape()[0]) + " features, got " +
                     shape_str(embeddings.shape()));
  return add(matmul(flat, w), params.get("global/bias"));
}

Tensor<float> fit_frames(const Tensor<float>& features, Index frames) {
  if (features.rank() != 2) throw ShapeError("expected (bins, frames) features, got " + shape_str(features.shape()));
  const Index bins = features.dim(0), have = features.dim(1);
  if (have == frames) return features;
  Tensor<float> out = Tensor<float>::zeros({bins, frames});
  const Index offset = have > frames ? (have - frames) / 2 : 0;
  const Index count = std::min(have, frames);
  for (Index b = 0; b < bins; ++b)
    for (Index t = 0; t < count; ++t) out[b * frames + t] = features[b * have + offset + t];
  return out;
}

template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<const Tensor<float>*>& features, const BackboneSpec& spec) {
  const Index n = static_cast<Index>(features.size());
  if (n == 0) throw ShapeError("empty batch");
  Tensor<Scalar> out(Shape{n, 1, spec.mel_bins, spec.frames});
  const Index area = spec.mel_bins * spec.frames;
  for (Index i = 0; i < n; ++i) {
    const Tensor<float>& f = *features[static_cast<std::size_t>(i)];
    if (f.rank() != 2 || f.dim(0) != spec.mel_bins)
      throw ShapeError("sample features " + shape_str(f.shape()) + " do not have " + std::to_string(spec.mel_bins) +
                       " mel bins");
    const Tensor<float> fitted = fit_frames(f, spec.frames);
    out.array().segment(i * area, area) = fitted.array().template cast<Scalar>();
  }
  return out;
}

template class ParamSet<float>;
template class ParamSet<double>;
template Tensor<float> truncated_normal<float>(const Shape&, double, std::mt19937_64&);
template Tensor<double> truncated_normal<double>(const Shape&, double, std::mt19937_64&);
template void init_backbone<float>(ParamSet<float>&, const BackboneSpec&, std::mt19937_64&);
template void init_backbone<double>(ParamSet<double>&, const BackboneSpec&, std::mt19937_64&);
template Var<float> embed<float>(const ParamSet<float>&, const BackboneSpec&, const Var<float>&);
template Var<double> embed<double>(const ParamSet<double>&, const BackboneSpec&, const Var<double>&);
template void init_global_classifier<float>(ParamSet<float>&, Index, int, std::mt19937_64&);
template void init_global_classifier<double>(ParamSet<double>&, Index, int, std::mt19937_64&);
template Var<float> global_classifier<float>(const ParamSet<float>&, const Var<float>&, int);
template Var<double> global_classifier<double>(const ParamSet<double>&, const Var<double>&, int);
template Tensor<float> stack_batch<float>(const std::vector<const Tensor<float>*>&, const BackboneSpec&);
template Tensor<double> stack_batch<double>(const std::vector<const Tensor<float>*>&, const BackboneSpec&);

}  // namespace epift
