#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "epift/nn.hpp"
#include "epift/tensor.hpp"

namespace epift {

enum class DType { f32, f64 };

const char* to_string(DType d);

// On-disk layout:
//
//   epift-checkpoint 1
//   @key value            (zero or more metadata lines)
//   name shape dtype byte-offset
//   ...
//   end
//   <raw little-endian arrays, in manifest order>
//
// shape is written as extents joined by 'x' ("scalar" for rank 0); the byte
// offset is relative to the first byte after the "end" line.
class Checkpoint {
 public:
  struct Entry {
    std::string name;
    DType dtype = DType::f32;
    Tensor<double> values;  // exact copy; f32 entries round-trip losslessly
  };

  void set_meta(const std::string& key, const std::string& value);
  bool has_meta(const std::string& key) const;
  const std::string& meta(const std::string& key) const;
  const std::vector<std::pair<std::string, std::string>>& metadata() const { return meta_; }

  template <typename Scalar>
  void add(const std::string& name, const Tensor<Scalar>& t);
  bool contains(const std::string& name) const;
  const Entry& entry(const std::string& name) const;
  template <typename Scalar>
  Tensor<Scalar> get(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }

  std::string serialize() const;
  static Checkpoint parse(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, std::string>> meta_;
  std::vector<Entry> entries_;
};

// Stores every parameter under prefix + name.
template <typename Scalar>
void store_params(Checkpoint& ckpt, const ParamSet<Scalar>& params, const std::string& prefix = "");

// Overwrites values of an existing ParamSet from the checkpoint. Missing
// names or mismatched shapes raise ConfigError.
template <typename Scalar>
void restore_params(const Checkpoint& ckpt, ParamSet<Scalar>& params, const std::string& prefix = "");

}  // namespace epift
