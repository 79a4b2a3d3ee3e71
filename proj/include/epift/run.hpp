#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "epift/audio.hpp"
#include "epift/augment.hpp"
#include "epift/checkpoint.hpp"
#include "epift/dataset.hpp"
#include "epift/evalharness.hpp"
#include "epift/metaopt.hpp"

namespace epift {

// Everything a run needs. Numeric fields left at 0 (or alpha < 0, empty
// augment) take the dataset's defaults when the config is resolved.
struct RunConfig {
  // "synthetic" or "manifest"
  std::string dataset = "synthetic";
  std::string manifest;
  std::string preset = "environmental";
  std::string cache_dir;  // manifest datasets; default <output_dir>/cache

  // synthetic harmonic-tone task
  int synth_train_classes = 20;
  int synth_val_classes = 0;
  int synth_test_classes = 8;
  int synth_per_class = 30;
  int synth_harmonics = 6;
  double synth_fmin = 110.0;
  double synth_fmax = 880.0;
  double synth_jitter_cents = 80.0;
  double synth_jitter_db = 10.0;
  double synth_noise_db = -10.0;
  double synth_clip_seconds = 0.5;

  int mel_bins = 0, mel_window = 0, mel_hop = 0, mel_fft = 0;

  int way = 0, shot = 0, queries = 5;
  std::string head = "pn";
  std::string distance = "squared_euclidean";
  double tau = 0.1;
  double lambda = 1.0;
  std::string backbone = "conv4";
  int width = 0;  // conv4: every stage; resnet12-lite: w, 2w, 4w, 8w

  std::string scheme = "adft";
  std::string augment;  // empty: the dataset default
  std::string meta = "mc";
  std::string curvature = "diagonal";
  double alpha = -1.0;
  double beta = 1e-3;
  int rounds = 8;
  bool second_order = true;
  std::string optimizer = "adam";
  double clip_norm = 0.0;

  int train_episodes = 2000;
  int eval_episodes = 1000;
  std::string select = "auto";  // auto, last, train_ma
  std::uint64_t seed = 0;       // initialization, episodes, augmentation
  std::uint64_t data_seed = 0;  // synthetic classes and split assignment
  int threads = 0;
  std::string output_dir;
};

// Key names match the struct fields. Throws ConfigError naming the key.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();
std::string config_key_help(const std::string& key);

// Flat `key = value` lines; '#' starts a comment.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config");
void apply_config_file(RunConfig& cfg, const std::string& path);

// Fills dataset defaults. Idempotent.
RunConfig resolve(RunConfig cfg);

// Field-level checks on a resolved config; throws ConfigError.
void validate(const RunConfig& cfg);

// Ordered key/value view of every field, for manifests and checkpoints.
std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg);
std::string config_text(const RunConfig& cfg);

MelConfig mel_config(const RunConfig& cfg);

struct RunData {
  SamplePool train, val, test;
  std::map<std::string, Split> splits;  // class name -> split
  std::map<int, std::string> class_names;
  Index mel_bins = 0;
  Index frames = 0;
};

// Builds or loads the pools. Waveforms are kept when ADFT augments.
RunData load_data(const RunConfig& cfg);

// Everything the optimizer sees, derived from a resolved config.
MetaConfig meta_config(const RunConfig& cfg, const RunData& data, AugmentStats* stats = nullptr);

struct TrainLogRow {
  int step = 0;
  MetaStepResult result;
};

struct TrainResult {
  Learner<float> learner;
  std::vector<TrainLogRow> log;
  int selected_step = 0;  // 0 means the initial model
  double selected_score = 0.0;
  std::size_t augment_failures = 0;
};

// Meta-trains for cfg.train_episodes. `progress` (may be null) receives
// a line every `every` steps.
TrainResult train(const RunConfig& cfg, const RunData& data, std::ostream* progress = nullptr, int every = 100);

// Writes checkpoint.ckpt, run_manifest.json and loss_log.csv into dir.
void write_training_outputs(const std::filesystem::path& dir, const RunConfig& cfg, const RunData& data,
                            const TrainResult& result);

Checkpoint make_checkpoint(const RunConfig& cfg, const Learner<float>& learner);

// Rebuilds the learner; config keys that shape the model must match the
// checkpoint's, otherwise ConfigError.
Learner<float> load_learner(const Checkpoint& ckpt, const RunConfig& cfg, const RunData& data);

struct EvalOutputs {
  std::vector<EvalRecord> records;
  Summary summary;
};

// Test-split evaluation with run seed cfg.seed.
EvalOutputs evaluate(const RunConfig& cfg, const RunData& data, const Learner<float>& learner);

void write_eval_outputs(const std::filesystem::path& dir, const EvalOutputs& out, bool table,
                        const std::string& method);

// EPIFT_OUTPUT_DIR, else ./runs.
std::string default_output_dir();

}  // namespace epift
