#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "epift/autodiff.hpp"

namespace epift {

// Named learnable tensors in declaration order.
template <typename Scalar>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Var<Scalar> var;
    bool trainable = true;
  };

  void add(std::string name, Tensor<Scalar> value, bool trainable = true);
  bool contains(const std::string& name) const;
  const Var<Scalar>& get(const std::string& name) const;
  // Replaces the variable bound to an existing name (used for adapted copies).
  void set(const std::string& name, Var<Scalar> var);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::vector<Var<Scalar>> vars() const;
  std::vector<Var<Scalar>> trainable_vars() const;
  std::vector<std::string> trainable_names() const;

  // Fresh leaves holding copies of the current values; shares no storage.
  ParamSet clone() const;
  // FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<Entry> entries_;
};

enum class BackboneKind { conv4, resnet12_lite };
enum class EmbeddingLayout { flat, map };

const char* to_string(BackboneKind kind);
BackboneKind parse_backbone(const std::string& text);

struct BackboneSpec {
  BackboneKind kind = BackboneKind::conv4;
  Index mel_bins = 128;
  Index frames = 64;
  std::vector<Index> widths = {64, 64, 64, 64};
  EmbeddingLayout layout = EmbeddingLayout::flat;

  static BackboneSpec conv4(Index mel_bins, Index frames, std::vector<Index> widths = {64, 64, 64, 64});
  static BackboneSpec resnet12_lite(Index mel_bins, Index frames, std::vector<Index> widths = {32, 64, 128, 256});

  // (channels, height, width) of one embedding map. Each stage halves both
  // spatial extents with floor division.
  Shape map_shape() const;
  Index flat_size() const { return numel(map_shape()); }
};

// Truncated normal (|z| <= 2) scaled by stddev.
template <typename Scalar>
Tensor<Scalar> truncated_normal(const Shape& shape, double stddev, std::mt19937_64& rng);

template <typename Scalar>
void init_backbone(ParamSet<Scalar>& params, const BackboneSpec& spec, std::mt19937_64& rng);

// batch: (B, 1, mel_bins, frames). Returns (B, d) for the flat layout or
// (B, c, h, w) for the map layout.
template <typename Scalar>
Var<Scalar> embed(const ParamSet<Scalar>& params, const BackboneSpec& spec, const Var<Scalar>& batch);

template <typename Scalar>
void init_global_classifier(ParamSet<Scalar>& params, Index in_features, int n_train_classes, std::mt19937_64& rng);

// Fully connected layer over flattened embeddings -> (B, n_train_classes).
template <typename Scalar>
Var<Scalar> global_classifier(const ParamSet<Scalar>& params, const Var<Scalar>& embeddings, int n_train_classes);

// Center-crops or right-pads (with zeros) a (bins, frames) feature map.
Tensor<float> fit_frames(const Tensor<float>& features, Index frames);

// Stacks (bins, frames) feature maps into a (B, 1, bins, frames) batch.
template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<const Tensor<float>*>& features, const BackboneSpec& spec);

}  // namespace epift
