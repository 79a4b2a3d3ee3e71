#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "epift/episodes.hpp"
#include "epift/metaopt.hpp"

namespace epift {

struct EvalRecord {
  std::size_t episode_id = 0;
  std::uint64_t seed = 0;
  double acc_before = 0.0;
  double acc_after = 0.0;
  std::string scheme;  // not persisted in the CSV; the summary carries it
};

struct Summary {
  std::string scheme;
  std::size_t episodes = 0;
  double mean_before = 0.0, ci_before = 0.0;
  double mean_after = 0.0, ci_after = 0.0;
  // acc_after - acc_before per episode
  double mean_gain = 0.0, ci_gain = 0.0;
};

struct MeanCi {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single value
  double ci = 0.0;  // 1.96 sd / sqrt(n)
};

// Summation runs in the given order; callers sort first when they need
// order independence.
MeanCi mean_ci(const std::vector<double>& xs);

// Records are ordered by episode id before aggregating, so any permutation
// of the same records gives the same bits.
Summary summarize(std::vector<EvalRecord> records, const std::string& scheme = "");

// Builds the episode for a derived seed.
using EpisodeSource = std::function<Episode(std::uint64_t seed)>;

struct SuiteOptions {
  std::size_t episodes = 1000;
  std::uint64_t run_seed = 0;
  unsigned threads = 0;  // 0: hardware concurrency
};

// Episode i uses seed derive_seed(run_seed, i) both to build the episode and
// to drive augmentation during fine-tuning.
template <typename Scalar>
std::vector<EvalRecord> evaluate_suite(const Learner<Scalar>& learner, const MetaConfig& cfg,
                                       const EpisodeSource& source, const SuiteOptions& opts);

// Draws way/shot/queries episodes from a pool with a seeded generator.
EpisodeSource pool_source(const SamplePool& pool, int way, int shot, int queries);

struct GainReport {
  double baseline = 0.0;
  double variant = 0.0;
  double gain = 0.0;        // variant.mean_after - baseline.mean_after
  bool ci_overlap = false;  // [mean +- ci] intervals intersect
  std::string formatted;    // "+3.63%"
};

GainReport compare_runs(const Summary& baseline, const Summary& variant);

// Signed percentage with two decimals.
std::string format_gain(double gain);

// Per-episode variant.acc_after - baseline.acc_after over matching episodes.
// Runs must list the same episode ids and seeds.
MeanCi paired_gain(const std::vector<EvalRecord>& baseline, const std::vector<EvalRecord>& variant);

// CSV header: episode_id,seed,acc_before,acc_after. Doubles are written with
// enough digits to read back bit-identically.
void write_records_csv(std::ostream& out, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> read_records_csv(std::istream& in);
void write_records_csv(const std::string& path, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> read_records_csv(const std::string& path);

std::string summary_json(const Summary& s);
Summary parse_summary_json(const std::string& text);

struct TableRow {
  std::string method;
  Summary summary;
};

// "Method | w/o FT | w/ FT | Gain" with percentages and CI half-widths.
std::string render_table(const std::vector<TableRow>& rows);

}  // namespace epift
