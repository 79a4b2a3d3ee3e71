#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "epift/tensor.hpp"
#include "epift/waveform.hpp"

namespace epift {

struct Sample {
  std::shared_ptr<const Tensor<float>> features;  // (mel bins, frames)
  int class_id = 0;
  std::string source_id;
  // Kept when the sample came from audio so ADFT can augment the waveform.
  std::shared_ptr<const Waveform> waveform;
  bool augmented = false;
};

using SampleGrid = std::vector<std::vector<Sample>>;  // [class][shot]

struct Episode {
  int way = 0;
  int shot = 0;
  std::vector<int> classes;  // global class id of each support row
  SampleGrid support;
  std::vector<Sample> query;
  std::vector<int> query_labels;  // row index into `classes`
};

enum class Scheme { none, rdft, idft, adft };

const char* to_string(Scheme s);
Scheme parse_scheme(const std::string& text);

struct PseudoEpisode {
  SampleGrid support;         // [K][N']
  std::vector<Sample> query;  // query[k] belongs to class k
  Scheme origin = Scheme::none;
  int index = 0;
  // Parent column of every pseudo-support column; for ADFT the last entry is
  // the replicated column.
  std::vector<int> support_columns;
  int query_column = 0;
};

// Groups sample indices by class id, classes in ascending id order.
struct SamplePool {
  std::vector<Sample> samples;

  std::vector<int> class_ids() const;
  std::vector<std::size_t> indices_of(int class_id) const;
};

// K classes uniformly without replacement, then N + q samples per class
// without replacement: the first N form the support column order.
Episode sample_episode(const SamplePool& pool, int way, int shot, int queries_per_class, std::mt19937_64& rng);

// Throws ConfigError when shot < 2.
std::vector<PseudoEpisode> rdft_split(const SampleGrid& support);
std::vector<PseudoEpisode> idft_split(const SampleGrid& support);

// Transforms a replicated sample; throwing marks the sample as failed and the
// raw copy is used instead.
using Augmenter = std::function<Sample(const Sample&, std::mt19937_64&)>;

struct SplitStats {
  std::size_t augment_failures = 0;
};

// Episode j: query column j, support = the other N-1 columns plus a copy of
// column (j-1 mod N). Each copy gets its own generator seeded from
// (seed, j, k) so the result does not depend on evaluation order.
std::vector<PseudoEpisode> adft_split(const SampleGrid& support, const Augmenter* augmenter, std::uint64_t seed,
                                      SplitStats* stats = nullptr);

std::vector<PseudoEpisode> make_pseudo_episodes(Scheme scheme, const SampleGrid& support,
                                                const Augmenter* augmenter, std::uint64_t seed,
                                                SplitStats* stats = nullptr);

// splitmix64 finalizer over (a, b); used for per-episode and per-sample seeds.
std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b);

// Lines `episode-id,role,class-id,shot-index,source-id`. Query shot-index is
// the position among that class's queries.
void write_episode_manifest(std::ostream& out, const std::string& episode_id, const Episode& episode);

}  // namespace epift
