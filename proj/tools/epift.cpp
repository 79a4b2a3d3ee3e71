// Command-line front end: train, evaluate, dataset prepare, augment preview.

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>

#include "epift/augment.hpp"
#include "epift/checkpoint.hpp"
#include "epift/dataset.hpp"
#include "epift/error.hpp"
#include "epift/run.hpp"
#include "epift/version.hpp"

namespace fs = std::filesystem;
using namespace epift;

namespace {

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

// One optional string per config key; applied after the config file.
struct Overrides {
  std::map<std::string, std::optional<std::string>> values;

  void attach(CLI::App* app) {
    for (const auto& key : config_keys()) {
      auto& slot = values[key];
      app->add_option(flag_name(key), slot, config_key_help(key))->group("Run configuration");
    }
  }
  void apply(RunConfig& cfg) const {
    for (const auto& key : config_keys()) {
      const auto& v = values.at(key);
      if (v) set_config_value(cfg, key, *v);
    }
  }
  bool given(const std::string& key) const { return values.at(key).has_value(); }
};

std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string method_name(const RunConfig& cfg) {
  std::string m = upper(cfg.meta) + "-" + upper(cfg.head);
  if (cfg.scheme != "none") m += "-" + upper(cfg.scheme);
  return m;
}

int cmd_train(const std::string& config_file, const Overrides& ov) {
  RunConfig cfg;
  if (!config_file.empty()) apply_config_file(cfg, config_file);
  ov.apply(cfg);
  cfg = resolve(cfg);
  validate(cfg);
  std::cout << "loading data" << std::endl;
  const RunData data = load_data(cfg);
  std::cout << "train " << data.train.samples.size() << " samples, test " << data.test.samples.size()
            << " samples, features " << data.mel_bins << "x" << data.frames << std::endl;
  const auto result = train(cfg, data, &std::cout);
  write_training_outputs(cfg.output_dir, cfg, data, result);
  std::cout << "selected step " << result.selected_step << " (" << cfg.select << ")\n"
            << "wrote " << (fs::path(cfg.output_dir) / "checkpoint.ckpt").string() << std::endl;
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& config_file, bool table, const Overrides& ov) {
  const Checkpoint ckpt = Checkpoint::load(checkpoint);
  RunConfig cfg;
  // start from the training configuration, then the file, then flags
  for (const auto& [k, v] : ckpt.metadata())
    if (k.rfind("config/", 0) == 0) set_config_value(cfg, k.substr(7), v);
  if (!config_file.empty()) apply_config_file(cfg, config_file);
  ov.apply(cfg);
  if (!ov.given("output_dir") && cfg.output_dir.empty())
    cfg.output_dir = (fs::path(checkpoint).parent_path() / ("eval-" + cfg.scheme)).string();
  cfg = resolve(cfg);
  validate(cfg);
  const RunData data = load_data(cfg);
  const Learner<float> learner = load_learner(ckpt, cfg, data);
  const EvalOutputs out = evaluate(cfg, data, learner);
  write_eval_outputs(cfg.output_dir, out, table, method_name(cfg));
  const auto& s = out.summary;
  std::cout << "episodes " << s.episodes << "  before " << s.mean_before << " +- " << s.ci_before << "  after "
            << s.mean_after << " +- " << s.ci_after << "  gain " << format_gain(s.mean_gain) << '\n';
  if (table) std::cout << render_table({{method_name(cfg), s}});
  std::cout << "wrote " << cfg.output_dir << std::endl;
  return 0;
}

int cmd_prepare(const std::string& config_file, const Overrides& ov) {
  RunConfig cfg;
  cfg.dataset = "manifest";
  if (!config_file.empty()) apply_config_file(cfg, config_file);
  ov.apply(cfg);
  cfg.dataset = "manifest";
  if (cfg.manifest.empty()) throw UsageError("dataset prepare needs --manifest");
  cfg = resolve(cfg);
  const Preset preset = preset_by_name(cfg.preset);
  const auto rows = read_manifest_file(cfg.manifest);
  const auto report = prepare_dataset(rows, preset, mel_config(cfg), cfg.cache_dir, cfg.data_seed, cfg.threads);

  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto c = report.classes_per_split.count(s) ? report.classes_per_split.at(s) : 0;
    const auto f = report.files_per_split.count(s) ? report.files_per_split.at(s) : 0;
    std::cout << to_string(s) << ": " << c << " classes, " << f << " files\n";
  }
  std::cout << "written " << report.written << ", unchanged " << report.unchanged << ", errors "
            << report.errors.size() << '\n';

  const fs::path dir = cfg.cache_dir;
  std::ofstream splits(dir / "splits.csv", std::ios::binary);
  write_split_assignment(splits, resolve_splits(rows, preset, cfg.data_seed));
  std::ofstream errors(dir / "prepare_errors.csv", std::ios::binary);
  errors << "filepath,message\n";
  for (const auto& [path, msg] : report.errors) {
    errors << '"' << path << "\",\"" << msg << "\"\n";
    std::cerr << "error: " << path << ": " << msg << '\n';
  }
  if (!splits || !errors) throw IoError("cannot write reports into " + dir.string());
  return 0;
}

int cmd_preview(const std::string& input, const std::string& output, const std::string& kind_text,
                std::uint64_t seed, double tone) {
  Waveform w;
  if (!input.empty()) {
    w = load_wav(input);
  } else {
    w.sample_rate = 16000;
    w.samples.resize(16000);
    for (std::size_t i = 0; i < w.samples.size(); ++i)
      w.samples[i] = static_cast<float>(0.5 * std::sin(2 * std::numbers::pi * tone * static_cast<double>(i) / 16000));
  }
  const AugmentKind kind = parse_augment(kind_text);
  std::mt19937_64 rng(seed);
  AugmentStats stats;
  AugmentKind chosen = kind;
  const Waveform out =
      kind == AugmentKind::random ? random_augment(w, rng, &chosen, &stats) : apply_augment(kind, w, rng, &stats);
  write_wav(output, out);
  std::vector<float> diff(w.samples.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = out.samples[i] - w.samples[i];
  const double in_rms = rms(w.samples), d_rms = rms(diff);
  std::cout << "augmentation " << to_string(chosen) << "\n"
            << "input rms " << in_rms << ", output rms " << rms(out.samples) << "\n";
  if (chosen == AugmentKind::noise && d_rms > 0) std::cout << "snr " << 20 * std::log10(in_rms / d_rms) << " dB\n";
  if (stats.silent_inputs) std::cout << "input is silent, left unchanged\n";
  std::cout << "wrote " << output << std::endl;
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ParseError*>(&e) || dynamic_cast<const DataError*>(&e))
    return 4;
  if (dynamic_cast<const Error*>(&e)) return 2;
  return 1;
}

const char* category(int code) {
  switch (code) {
    case 2: return "configuration error";
    case 3: return "numeric failure";
    case 4: return "i/o error";
    default: return "error";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Episode-specific fine-tuning for few-shot audio classification"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::string config_file;
  Overrides train_ov, eval_ov, prep_ov;

  auto* train_cmd = app.add_subcommand("train", "meta-train a learner");
  train_cmd->add_option("--config", config_file, "key = value file");
  train_ov.attach(train_cmd);

  std::string checkpoint;
  bool table = false;
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on test episodes");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint.ckpt from train")->required();
  eval_cmd->add_option("--config", config_file, "key = value file");
  eval_cmd->add_flag("--table", table, "print the w/o FT | w/ FT | Gain table");
  eval_ov.attach(eval_cmd);

  auto* dataset_cmd = app.add_subcommand("dataset", "dataset tools");
  dataset_cmd->require_subcommand(1);
  auto* prep_cmd = dataset_cmd->add_subcommand("prepare", "featurize a manifest into the cache");
  prep_cmd->add_option("--config", config_file, "key = value file");
  prep_ov.attach(prep_cmd);

  std::string input, output = "preview.wav", kind = "random";
  std::uint64_t seed = 0;
  double tone = 440.0;
  auto* aug_cmd = app.add_subcommand("augment", "augmentation tools");
  aug_cmd->require_subcommand(1);
  auto* preview_cmd = aug_cmd->add_subcommand("preview", "augment one clip and write it out");
  preview_cmd->add_option("--input", input, "WAV file (default: a synthetic tone)");
  preview_cmd->add_option("--tone", tone, "tone frequency when no input is given");
  preview_cmd->add_option("--output", output, "output WAV");
  preview_cmd->add_option("--kind", kind, "noise, equalizer, pitch or random");
  preview_cmd->add_option("--seed", seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(config_file, train_ov);
    if (*eval_cmd) return cmd_evaluate(checkpoint, config_file, table, eval_ov);
    if (*prep_cmd) return cmd_prepare(config_file, prep_ov);
    if (*preview_cmd) return cmd_preview(input, output, kind, seed, tone);
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    std::cerr << category(code) << ": " << e.what() << std::endl;
    return code;
  }
  return 0;
}
