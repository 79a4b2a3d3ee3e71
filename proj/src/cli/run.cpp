#include "epift/run.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "epift/augment.hpp"
#include "epift/checkpoint.hpp"
#include "epift/error.hpp"
#include "epift/version.hpp"

namespace epift {

namespace {

std::string shortest(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T v{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ConfigError(key + ": expected an integer, got '" + text + "'");
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v))
    throw ConfigError(key + ": expected a finite number, got '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

struct Field {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field field(const char* name, T RunConfig::*member, const char* help) {
  Field f;
  f.name = name;
  f.help = help;
  const std::string key = name;
  if constexpr (std::is_same_v<T, std::string>) {
    f.set = [member](RunConfig& c, const std::string& v) { c.*member = v; };
    f.get = [member](const RunConfig& c) { return c.*member; };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.set = [member, key](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); };
    f.get = [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); };
  } else if constexpr (std::is_same_v<T, double>) {
    f.set = [member, key](RunConfig& c, const std::string& v) { c.*member = parse_real(key, v); };
    f.get = [member](const RunConfig& c) { return shortest(c.*member); };
  } else {
    f.set = [member, key](RunConfig& c, const std::string& v) { c.*member = parse_integer<T>(key, v); };
    f.get = [member](const RunConfig& c) { return std::to_string(c.*member); };
  }
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      field("dataset", &RunConfig::dataset, "synthetic or manifest"),
      field("manifest", &RunConfig::manifest, "CSV of filepath,class-name[,split]"),
      field("preset", &RunConfig::preset, "environmental, speech or music"),
      field("cache_dir", &RunConfig::cache_dir, "feature cache (default <output_dir>/cache)"),
      field("synth_train_classes", &RunConfig::synth_train_classes, "synthetic training classes"),
      field("synth_val_classes", &RunConfig::synth_val_classes, "synthetic validation classes"),
      field("synth_test_classes", &RunConfig::synth_test_classes, "synthetic test classes"),
      field("synth_per_class", &RunConfig::synth_per_class, "clips per synthetic class"),
      field("synth_harmonics", &RunConfig::synth_harmonics, "harmonics per tone"),
      field("synth_fmin", &RunConfig::synth_fmin, "lowest fundamental, Hz"),
      field("synth_fmax", &RunConfig::synth_fmax, "highest fundamental, Hz"),
      field("synth_jitter_cents", &RunConfig::synth_jitter_cents, "fundamental jitter, +- cents"),
      field("synth_jitter_db", &RunConfig::synth_jitter_db, "harmonic amplitude jitter, +- dB"),
      field("synth_noise_db", &RunConfig::synth_noise_db, "white noise RMS, dB full scale"),
      field("synth_clip_seconds", &RunConfig::synth_clip_seconds, "clip length, seconds"),
      field("mel_bins", &RunConfig::mel_bins, "mel filters (0: dataset default)"),
      field("mel_window", &RunConfig::mel_window, "STFT window (0: dataset default)"),
      field("mel_hop", &RunConfig::mel_hop, "STFT hop (0: dataset default)"),
      field("mel_fft", &RunConfig::mel_fft, "FFT size (0: dataset default)"),
      field("way", &RunConfig::way, "classes per episode (0: preset)"),
      field("shot", &RunConfig::shot, "support samples per class (0: preset)"),
      field("queries", &RunConfig::queries, "query samples per class"),
      field("head", &RunConfig::head, "pn, mn or can"),
      field("distance", &RunConfig::distance, "squared_euclidean or euclidean (pn)"),
      field("tau", &RunConfig::tau, "attention temperature (can)"),
      field("lambda", &RunConfig::lambda, "global loss weight (can)"),
      field("backbone", &RunConfig::backbone, "conv4 or resnet12-lite"),
      field("width", &RunConfig::width, "channel width (0: dataset default)"),
      field("scheme", &RunConfig::scheme, "none, rdft, idft or adft"),
      field("augment", &RunConfig::augment, "none, noise, equalizer, pitch or random (adft only)"),
      field("meta", &RunConfig::meta, "maml or mc"),
      field("curvature", &RunConfig::curvature, "diagonal or factored (mc)"),
      field("alpha", &RunConfig::alpha, "inner learning rate (<0: dataset default)"),
      field("beta", &RunConfig::beta, "outer learning rate"),
      field("rounds", &RunConfig::rounds, "passes over the pseudo-episodes"),
      field("second_order", &RunConfig::second_order, "differentiate through inner gradients"),
      field("optimizer", &RunConfig::optimizer, "sgd or adam"),
      field("clip_norm", &RunConfig::clip_norm, "meta-gradient norm clip (0: off)"),
      field("train_episodes", &RunConfig::train_episodes, "meta-training episodes"),
      field("eval_episodes", &RunConfig::eval_episodes, "test episodes"),
      field("select", &RunConfig::select, "auto, last or train_ma"),
      field("seed", &RunConfig::seed, "run seed"),
      field("data_seed", &RunConfig::data_seed, "seed for synthetic classes and splits"),
      field("threads", &RunConfig::threads, "worker threads (0: all cores)"),
      field("output_dir", &RunConfig::output_dir, "run directory"),
  };
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.name == key) return f;
  throw ConfigError(key + ": unknown configuration key");
}

// Keys that do not change any result and stay out of checkpoints.
bool is_local_key(const std::string& key) { return key == "output_dir" || key == "cache_dir" || key == "threads"; }

// Keys that shape the stored model.
const char* const kModelKeys[] = {"head", "backbone", "width", "mel_bins", "meta", "curvature"};

template <typename F>
auto keyed(const char* key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

Distance parse_distance(const std::string& text) {
  if (text == "squared_euclidean") return Distance::squared_euclidean;
  if (text == "euclidean") return Distance::euclidean;
  throw ConfigError("unknown distance '" + text + "' (expected squared_euclidean or euclidean)");
}

bool synthetic(const RunConfig& cfg) { return cfg.dataset == "synthetic"; }

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_field(key).set(cfg, value);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.name);
  return keys;
}

std::string config_key_help(const std::string& key) { return find_field(key).help; }

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + " line " + std::to_string(n) + ": expected key = value, got '" + line + "'");
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path);
}

std::string default_output_dir() {
  const char* env = std::getenv("EPIFT_OUTPUT_DIR");
  return env && *env ? env : "runs";
}

RunConfig resolve(RunConfig cfg) {
  if (cfg.output_dir.empty()) cfg.output_dir = default_output_dir();
  if (synthetic(cfg)) {
    if (cfg.mel_bins == 0) cfg.mel_bins = 32;
    if (cfg.mel_window == 0) cfg.mel_window = 512;
    if (cfg.mel_hop == 0) cfg.mel_hop = 256;
    if (cfg.mel_fft == 0) cfg.mel_fft = 512;
    if (cfg.way == 0) cfg.way = 5;
    if (cfg.shot == 0) cfg.shot = 5;
    if (cfg.width == 0) cfg.width = 16;
    if (cfg.alpha < 0) cfg.alpha = 0.002;
    if (cfg.augment.empty()) cfg.augment = cfg.scheme == "adft" ? "noise" : "none";
  } else {
    const Preset p = keyed("preset", [&] { return preset_by_name(cfg.preset); });
    const MelConfig mel;
    if (cfg.mel_bins == 0) cfg.mel_bins = mel.bins;
    if (cfg.mel_window == 0) cfg.mel_window = mel.window;
    if (cfg.mel_hop == 0) cfg.mel_hop = mel.hop;
    if (cfg.mel_fft == 0) cfg.mel_fft = mel.fft;
    if (cfg.way == 0) cfg.way = p.way;
    if (cfg.shot == 0) cfg.shot = p.shot;
    if (cfg.width == 0) cfg.width = cfg.backbone == "resnet12-lite" ? 32 : 64;
    if (cfg.alpha < 0) cfg.alpha = p.alpha;
    if (cfg.augment.empty()) cfg.augment = cfg.scheme == "adft" ? p.augment : "none";
    if (cfg.cache_dir.empty()) cfg.cache_dir = (std::filesystem::path(cfg.output_dir) / "cache").string();
  }
  if (cfg.select == "auto") {
    const bool no_val = synthetic(cfg) ? cfg.synth_val_classes == 0 : preset_by_name(cfg.preset).val == 0;
    cfg.select = no_val ? "train_ma" : "last";
  }
  return cfg;
}

void validate(const RunConfig& cfg) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(cfg.dataset == "synthetic" || cfg.dataset == "manifest",
          "dataset: expected synthetic or manifest, got '" + cfg.dataset + "'");
  if (!synthetic(cfg)) {
    require(!cfg.manifest.empty(), "manifest: required when dataset = manifest");
    keyed("preset", [&] { return preset_by_name(cfg.preset); });
  }
  keyed("head", [&] { return parse_head(cfg.head); });
  keyed("distance", [&] { return parse_distance(cfg.distance); });
  keyed("backbone", [&] { return parse_backbone(cfg.backbone); });
  const Scheme scheme = keyed("scheme", [&] { return parse_scheme(cfg.scheme); });
  const AugmentKind aug = keyed("augment", [&] { return parse_augment(cfg.augment); });
  keyed("meta", [&] { return parse_meta(cfg.meta); });
  keyed("curvature", [&] { return parse_curvature(cfg.curvature); });
  keyed("optimizer", [&] { return parse_optimizer(cfg.optimizer); });

  require(cfg.way >= 2, "way: must be at least 2, got " + std::to_string(cfg.way));
  require(cfg.shot >= 1, "shot: must be at least 1, got " + std::to_string(cfg.shot));
  require(cfg.queries >= 1, "queries: must be at least 1, got " + std::to_string(cfg.queries));
  require(scheme == Scheme::none || cfg.shot >= 2,
          "shot: scheme " + cfg.scheme + " needs shot >= 2, got " + std::to_string(cfg.shot));
  require(aug == AugmentKind::none || scheme == Scheme::adft,
          "augment: augmentation only applies with scheme = adft (scheme is " + cfg.scheme + ")");
  require(cfg.alpha >= 0, "alpha: must be >= 0");
  require(cfg.beta >= 0, "beta: must be >= 0");
  require(cfg.rounds >= 0, "rounds: must be >= 0");
  require(cfg.clip_norm >= 0, "clip_norm: must be >= 0");
  require(cfg.tau > 0, "tau: must be > 0");
  require(cfg.lambda >= 0, "lambda: must be >= 0");
  require(cfg.width >= 1, "width: must be at least 1");
  require(cfg.train_episodes >= 0, "train_episodes: must be >= 0");
  require(cfg.eval_episodes >= 1, "eval_episodes: must be at least 1");
  require(cfg.threads >= 0, "threads: must be >= 0");
  require(cfg.select == "last" || cfg.select == "train_ma", "select: expected auto, last or train_ma");
  require(cfg.mel_bins >= 1 && cfg.mel_window >= 2 && cfg.mel_hop >= 1 && cfg.mel_fft >= cfg.mel_window,
          "mel_bins/mel_window/mel_hop/mel_fft: need positive sizes with fft >= window");
  if (synthetic(cfg)) {
    require(cfg.synth_train_classes >= cfg.way,
            "synth_train_classes: need at least way = " + std::to_string(cfg.way) + " classes");
    require(cfg.synth_test_classes >= cfg.way,
            "synth_test_classes: need at least way = " + std::to_string(cfg.way) + " classes");
    require(cfg.synth_val_classes >= 0, "synth_val_classes: must be >= 0");
    require(cfg.synth_per_class >= cfg.shot + cfg.queries,
            "synth_per_class: need at least shot + queries = " + std::to_string(cfg.shot + cfg.queries));
    require(cfg.synth_harmonics >= 1, "synth_harmonics: must be at least 1");
    require(cfg.synth_clip_seconds > 0, "synth_clip_seconds: must be > 0");
  }
}

std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.name, f.get(cfg));
  return out;
}

std::string config_text(const RunConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : config_entries(cfg)) s += k + " = " + v + "\n";
  return s;
}

MelConfig mel_config(const RunConfig& cfg) {
  MelConfig m;
  m.bins = cfg.mel_bins;
  m.window = cfg.mel_window;
  m.hop = cfg.mel_hop;
  m.fft = cfg.mel_fft;
  return m;
}

RunData load_data(const RunConfig& cfg) {
  RunData d;
  const MelConfig mel = mel_config(cfg);
  if (synthetic(cfg)) {
    const int total = cfg.synth_train_classes + cfg.synth_val_classes + cfg.synth_test_classes;
    std::mt19937_64 rng(derive_seed(cfg.data_seed, 1));
    auto spec = random_synth_spec(total, rng, cfg.synth_harmonics, cfg.synth_fmin, cfg.synth_fmax);
    spec.jitter_cents = cfg.synth_jitter_cents;
    spec.jitter_db = cfg.synth_jitter_db;
    spec.noise_floor_db = cfg.synth_noise_db;
    spec.clip_seconds = cfg.synth_clip_seconds;
    spec.validate();
    const bool keep = cfg.scheme == "adft" && cfg.augment != "none";
    auto pool = synth_dataset(spec, cfg.synth_per_class, rng, mel);
    for (auto& s : pool.samples) {
      if (!keep) s.waveform.reset();
      const int k = s.class_id;
      const Split split = k < cfg.synth_train_classes                           ? Split::train
                          : k < cfg.synth_train_classes + cfg.synth_val_classes ? Split::val
                                                                                 : Split::test;
      (split == Split::train ? d.train : split == Split::val ? d.val : d.test).samples.push_back(s);
    }
    for (int k = 0; k < total; ++k) {
      const std::string name = "tone" + std::to_string(k);
      d.class_names[k] = name;
      d.splits[name] = k < cfg.synth_train_classes                           ? Split::train
                       : k < cfg.synth_train_classes + cfg.synth_val_classes ? Split::val
                                                                              : Split::test;
    }
  } else {
    const Preset preset = preset_by_name(cfg.preset);
    const auto rows = read_manifest_file(cfg.manifest);
    const auto report = prepare_dataset(rows, preset, mel, cfg.cache_dir, cfg.data_seed, cfg.threads);
    if (!report.errors.empty())
      throw DataError(std::to_string(report.errors.size()) + " manifest file(s) failed to load, first: " +
                      report.errors.front().first + ": " + report.errors.front().second);
    d.splits = resolve_splits(rows, preset, cfg.data_seed);
    for (const auto& [name, id] : class_index(rows)) d.class_names[id] = name;
    const bool keep = cfg.scheme == "adft" && cfg.augment != "none";
    d.train = load_split(rows, d.splits, Split::train, preset, cfg.cache_dir, keep);
    d.val = load_split(rows, d.splits, Split::val, preset, cfg.cache_dir, false);
    d.test = load_split(rows, d.splits, Split::test, preset, cfg.cache_dir, keep);
  }
  const SamplePool& any = !d.train.samples.empty() ? d.train : d.test;
  if (any.samples.empty()) throw DataError("dataset has no samples");
  d.mel_bins = any.samples.front().features->dim(0);
  d.frames = any.samples.front().features->dim(1);
  return d;
}

MetaConfig meta_config(const RunConfig& cfg, const RunData& data, AugmentStats* stats) {
  MetaConfig m;
  const Index w = cfg.width;
  m.backbone = parse_backbone(cfg.backbone) == BackboneKind::conv4
                   ? BackboneSpec::conv4(data.mel_bins, data.frames, {w, w, w, w})
                   : BackboneSpec::resnet12_lite(data.mel_bins, data.frames, {w, 2 * w, 4 * w, 8 * w});
  m.head.head = parse_head(cfg.head);
  m.head.distance = parse_distance(cfg.distance);
  m.head.tau = cfg.tau;
  m.head.lambda = cfg.lambda;
  m.backbone.layout = layout_for(m.head.head);
  m.scheme = parse_scheme(cfg.scheme);
  m.algo = parse_meta(cfg.meta);
  m.curvature = parse_curvature(cfg.curvature);
  m.alpha = cfg.alpha;
  m.beta = cfg.beta;
  m.rounds = cfg.rounds;
  m.order = cfg.second_order ? MetaOrder::second : MetaOrder::first;
  m.optimizer = parse_optimizer(cfg.optimizer);
  m.clip_norm = cfg.clip_norm;
  const AugmentKind aug = parse_augment(cfg.augment);
  if (m.scheme == Scheme::adft && aug != AugmentKind::none) m.augmenter = make_augmenter(aug, mel_config(cfg), stats);
  m.train_classes = data.train.class_ids();
  return m;
}

TrainResult train(const RunConfig& cfg, const RunData& data, std::ostream* progress, int every) {
  AugmentStats stats;
  const MetaConfig mc = meta_config(cfg, data, &stats);
  TrainResult out{init_learner<float>(mc, derive_seed(cfg.seed, 2)), {}, 0, 0.0, 0};
  std::mt19937_64 rng(derive_seed(cfg.seed, 3));
  const std::uint64_t step_seeds = derive_seed(cfg.seed, 5);

  const bool moving = cfg.select == "train_ma";
  constexpr std::size_t window = 100;
  std::deque<double> recent;
  std::optional<Learner<float>> best;
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = 1; step <= cfg.train_episodes; ++step) {
    const Episode ep = sample_episode(data.train, cfg.way, cfg.shot, cfg.queries, rng);
    MetaStepResult r;
    try {
      r = meta_step(out.learner, ep, mc, derive_seed(step_seeds, static_cast<std::uint64_t>(step)));
    } catch (const NumericError& e) {
      throw NumericError("training step " + std::to_string(step) + ": " + e.what());
    }
    out.augment_failures += r.augment_failures;
    out.log.push_back({step, r});
    if (moving) {
      recent.push_back(r.query_accuracy);
      if (recent.size() > window) recent.pop_front();
      if (recent.size() == window) {
        double s = 0.0;
        for (double a : recent) s += a;
        const double ma = s / window;
        if (!best || ma > out.selected_score) {
          best = Learner<float>{out.learner.params.clone(), out.learner.curvature.clone(), {}};
          out.selected_step = step;
          out.selected_score = ma;
        }
      }
    }
    if (progress && (step % every == 0 || step == cfg.train_episodes)) {
      double loss = 0.0, acc = 0.0;
      const int n = std::min(every, step);
      for (int i = step - n; i < step; ++i) {
        loss += out.log[static_cast<std::size_t>(i)].result.meta_loss;
        acc += out.log[static_cast<std::size_t>(i)].result.query_accuracy;
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *progress << "step " << step << "/" << cfg.train_episodes << "  loss " << loss / n << "  acc " << acc / n
                << "  " << static_cast<long>(secs) << "s" << std::endl;
    }
  }
  if (best) {
    out.learner.params = std::move(best->params);
    out.learner.curvature = std::move(best->curvature);
  } else {
    // too short for a full window: keep the last model, score what we saw
    out.selected_step = cfg.train_episodes;
    if (!recent.empty()) {
      double s = 0.0;
      for (double a : recent) s += a;
      out.selected_score = s / static_cast<double>(recent.size());
    }
  }
  return out;
}

Checkpoint make_checkpoint(const RunConfig& cfg, const Learner<float>& learner) {
  Checkpoint ckpt;
  ckpt.set_meta("version", kVersion);
  for (const auto& [k, v] : config_entries(cfg))
    if (!is_local_key(k)) ckpt.set_meta("config/" + k, v);
  store_learner(ckpt, learner);
  return ckpt;
}

void write_training_outputs(const std::filesystem::path& dir, const RunConfig& cfg, const RunData& data,
                            const TrainResult& result) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  make_checkpoint(cfg, result.learner).save(dir / "checkpoint.ckpt");

  std::ofstream log(dir / "loss_log.csv", std::ios::binary);
  if (!log) throw IoError("cannot write " + (dir / "loss_log.csv").string());
  log << "step,meta_loss,query_accuracy,grad_norm,inner_steps,augment_failures\n";
  for (const auto& row : result.log)
    log << row.step << ',' << shortest(row.result.meta_loss) << ',' << shortest(row.result.query_accuracy) << ','
        << shortest(row.result.grad_norm) << ',' << row.result.inner_steps << ',' << row.result.augment_failures
        << '\n';

  nlohmann::ordered_json j;
  j["version"] = kVersion;
  j["seed"] = cfg.seed;
  nlohmann::ordered_json c;
  for (const auto& [k, v] : config_entries(cfg)) c[k] = v;
  j["config"] = c;
  j["selected_step"] = result.selected_step;
  j["selection"] = cfg.select;
  if (cfg.select == "train_ma") j["selected_train_accuracy"] = result.selected_score;
  j["augment_failures"] = result.augment_failures;
  j["features"] = {{"mel_bins", data.mel_bins}, {"frames", data.frames}};
  nlohmann::ordered_json splits;
  for (const auto& [name, split] : data.splits) splits[name] = to_string(split);
  j["splits"] = splits;
  nlohmann::ordered_json classes;
  for (const auto& [id, name] : data.class_names) classes[std::to_string(id)] = name;
  j["classes"] = classes;
  std::ofstream man(dir / "run_manifest.json", std::ios::binary);
  if (!man) throw IoError("cannot write " + (dir / "run_manifest.json").string());
  man << j.dump(2) << '\n';

  std::ofstream txt(dir / "config.txt", std::ios::binary);
  txt << config_text(cfg);
  if (!log || !man || !txt) throw IoError("write failed in " + dir.string());
}

Learner<float> load_learner(const Checkpoint& ckpt, const RunConfig& cfg, const RunData& data) {
  for (const char* key : kModelKeys) {
    const std::string meta = std::string("config/") + key;
    if (!ckpt.has_meta(meta)) continue;
    const std::string want = find_field(key).get(cfg);
    if (ckpt.meta(meta) != want)
      throw ConfigError(std::string(key) + ": checkpoint was trained with '" + ckpt.meta(meta) +
                        "' but the config asks for '" + want + "'");
  }
  const MetaConfig mc = meta_config(cfg, data);
  auto learner = init_learner<float>(mc, derive_seed(cfg.seed, 2));
  restore_learner(ckpt, learner);
  return learner;
}

EvalOutputs evaluate(const RunConfig& cfg, const RunData& data, const Learner<float>& learner) {
  AugmentStats stats;
  const MetaConfig mc = meta_config(cfg, data, &stats);
  SuiteOptions opts;
  opts.episodes = static_cast<std::size_t>(cfg.eval_episodes);
  opts.run_seed = cfg.seed;
  opts.threads = static_cast<unsigned>(cfg.threads);
  EvalOutputs out;
  out.records = evaluate_suite(learner, mc, pool_source(data.test, cfg.way, cfg.shot, cfg.queries), opts);
  out.summary = summarize(out.records, cfg.scheme);
  return out;
}

void write_eval_outputs(const std::filesystem::path& dir, const EvalOutputs& out, bool table,
                        const std::string& method) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_records_csv((dir / "records.csv").string(), out.records);
  std::ofstream js(dir / "summary.json", std::ios::binary);
  js << summary_json(out.summary);
  if (!js) throw IoError("cannot write " + (dir / "summary.json").string());
  if (table) {
    std::ofstream t(dir / "table.txt", std::ios::binary);
    t << render_table({{method, out.summary}});
    if (!t) throw IoError("cannot write " + (dir / "table.txt").string());
  }
}

}  // namespace epift
