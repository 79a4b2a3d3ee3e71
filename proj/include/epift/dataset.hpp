#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "epift/audio.hpp"
#include "epift/episodes.hpp"

namespace epift {

enum class Split { train, val, test };
const char* to_string(Split s);
Split parse_split(const std::string& text);

struct Preset {
  std::string name;
  int train = 0, val = 0, test = 0;  // class counts
  int way = 5;
  int shot = 5;
  double alpha = 0.2;
  std::string augment;        // augmenter used for ADFT replicas
  double clip_seconds = 0.0;  // 0 keeps the native length
  double sample_rate = 16000.0;
};

// environmental, speech, music
Preset preset_by_name(const std::string& name);

struct ManifestRow {
  std::string filepath;
  std::string class_name;
  std::string split;  // may be empty; assigned from the preset then
};

// CSV `filepath,class-name,split`; a header row with those names is skipped.
// Relative paths resolve against base_dir.
std::vector<ManifestRow> read_manifest(std::istream& in, const std::string& base_dir = "");
std::vector<ManifestRow> read_manifest_file(const std::string& path);

// Sorted class names shuffled under `seed`, then cut into train/val/test.
// With fewer classes than the preset asks for, the train split absorbs the
// shortfall; more classes than requested is a ConfigError.
std::map<std::string, Split> assign_splits(const std::vector<std::string>& class_names, const Preset& preset,
                                           std::uint64_t seed);

// Uses the manifest's split column when every row has one, else
// assign_splits. Throws ConfigError if a class appears in two splits.
std::map<std::string, Split> resolve_splits(const std::vector<ManifestRow>& rows, const Preset& preset,
                                            std::uint64_t seed);

// Class ids are positions in the sorted list of class names.
std::map<std::string, int> class_index(const std::vector<ManifestRow>& rows);

// resample -> optional fix_duration -> the waveform fed to log_mel.
Waveform preprocess(const Waveform& raw, const Preset& preset);

struct PrepareReport {
  std::map<Split, int> classes_per_split;
  std::map<Split, int> files_per_split;
  std::vector<std::pair<std::string, std::string>> errors;  // (path, message)
  int written = 0;
  int unchanged = 0;
};

// Featurizes every row into `cache_dir` (one checkpoint-format file per
// sample). Files whose content and settings hash matches the cached entry
// are left alone. Unreadable files are reported and skipped.
PrepareReport prepare_dataset(const std::vector<ManifestRow>& rows, const Preset& preset, const MelConfig& mel,
                              const std::string& cache_dir, std::uint64_t seed, int threads = 0);

std::string cache_file_name(const std::string& filepath);

// Loads cached features of one split. With keep_waveforms the preprocessed
// waveform is reloaded from the source file as well (ADFT augmentation).
SamplePool load_split(const std::vector<ManifestRow>& rows, const std::map<std::string, Split>& splits, Split which,
                      const Preset& preset, const std::string& cache_dir, bool keep_waveforms);

void write_split_assignment(std::ostream& out, const std::map<std::string, Split>& splits);

}  // namespace epift
