#include "epift/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "epift/checkpoint.hpp"
#include "epift/error.hpp"

namespace fs = std::filesystem;

namespace epift {

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "val" || text == "validation") return Split::val;
  if (text == "test") return Split::test;
  throw ConfigError("unknown split '" + text + "' (expected train, val or test)");
}

Preset preset_by_name(const std::string& name) {
  Preset p;
  p.name = name;
  if (name == "environmental") {
    p.train = 35, p.val = 5, p.test = 10;
    p.augment = "pitch";
  } else if (name == "speech") {
    p.train = 25, p.val = 7, p.test = 8;
    p.alpha = 0.02;
    p.augment = "equalizer";
    p.clip_seconds = 1.0;
  } else if (name == "music") {
    p.train = 4, p.val = 0, p.test = 4;
    p.way = 3;
    p.augment = "equalizer";
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected environmental, speech or music)");
  }
  return p;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  return out;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

std::string settings_key(const Preset& p, const MelConfig& m) {
  std::ostringstream s;
  s << std::setprecision(17) << p.sample_rate << ';' << p.clip_seconds << ';' << m.bins << ';' << m.window << ';'
    << m.hop << ';' << m.fft << ';' << m.fmin << ';' << m.fmax << ';' << m.eps;
  return s.str();
}

std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<ManifestRow> read_manifest(std::istream& in, const std::string& base_dir) {
  std::vector<ManifestRow> rows;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (lineno == 1 && !f.empty() && f[0] == "filepath") continue;
    if (f.size() < 2 || f.size() > 3)
      throw ConfigError("manifest line " + std::to_string(lineno) + ": expected filepath,class-name,split");
    ManifestRow r{f[0], f[1], f.size() == 3 ? f[2] : ""};
    if (r.filepath.empty() || r.class_name.empty())
      throw ConfigError("manifest line " + std::to_string(lineno) + ": empty filepath or class name");
    if (!r.split.empty()) parse_split(r.split);
    if (!base_dir.empty() && fs::path(r.filepath).is_relative()) r.filepath = (fs::path(base_dir) / r.filepath).string();
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<ManifestRow> read_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  return read_manifest(in, fs::path(path).parent_path().string());
}

std::map<std::string, Split> assign_splits(const std::vector<std::string>& class_names, const Preset& preset,
                                           std::uint64_t seed) {
  std::vector<std::string> names(class_names);
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  const int n = static_cast<int>(names.size());
  const int want = preset.train + preset.val + preset.test;
  if (n > want)
    throw ConfigError("preset " + preset.name + " expects at most " + std::to_string(want) + " classes, manifest has " +
                      std::to_string(n));
  const int train = preset.train - (want - n);
  if (train < 1)
    throw ConfigError("preset " + preset.name + " needs at least " + std::to_string(preset.val + preset.test + 1) +
                      " classes, manifest has " + std::to_string(n));
  std::mt19937_64 rng(seed);
  for (int i = 0; i + 1 < n; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(names[static_cast<std::size_t>(i)], names[static_cast<std::size_t>(pick(rng))]);
  }
  std::map<std::string, Split> out;
  for (int i = 0; i < n; ++i)
    out[names[static_cast<std::size_t>(i)]] = i < train ? Split::train : i < train + preset.val ? Split::val : Split::test;
  return out;
}

std::map<std::string, Split> resolve_splits(const std::vector<ManifestRow>& rows, const Preset& preset,
                                            std::uint64_t seed) {
  const bool explicit_splits =
      !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const ManifestRow& r) { return !r.split.empty(); });
  if (!explicit_splits) {
    std::vector<std::string> names;
    for (const auto& r : rows) names.push_back(r.class_name);
    return assign_splits(names, preset, seed);
  }
  std::map<std::string, Split> out;
  for (const auto& r : rows) {
    const Split s = parse_split(r.split);
    auto [it, fresh] = out.emplace(r.class_name, s);
    if (!fresh && it->second != s)
      throw ConfigError("class '" + r.class_name + "' appears in both " + to_string(it->second) + " and " +
                        to_string(s));
  }
  return out;
}

std::map<std::string, int> class_index(const std::vector<ManifestRow>& rows) {
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.class_name);
  std::map<std::string, int> out;
  int i = 0;
  for (const auto& n : names) out[n] = i++;
  return out;
}

Waveform preprocess(const Waveform& raw, const Preset& preset) {
  Waveform w = resample(raw, preset.sample_rate);
  if (preset.clip_seconds > 0) w = fix_duration(w, preset.clip_seconds);
  return w;
}

std::string cache_file_name(const std::string& filepath) {
  return hex(fnv1a(filepath.data(), filepath.size())) + ".ckpt";
}

PrepareReport prepare_dataset(const std::vector<ManifestRow>& rows, const Preset& preset, const MelConfig& mel,
                              const std::string& cache_dir, std::uint64_t seed, int threads) {
  if (rows.empty()) throw UsageError("dataset manifest is empty");
  const auto splits = resolve_splits(rows, preset, seed);
  const auto ids = class_index(rows);
  std::error_code ec;
  fs::create_directories(cache_dir, ec);
  if (ec) throw IoError("cannot create cache directory " + cache_dir + ": " + ec.message());

  PrepareReport report;
  for (const auto& [name, s] : splits) ++report.classes_per_split[s];
  for (const auto& r : rows) ++report.files_per_split[splits.at(r.class_name)];

  const std::string settings = settings_key(preset, mel);
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < rows.size();) {
      const auto& r = rows[i];
      const fs::path out = fs::path(cache_dir) / cache_file_name(r.filepath);
      try {
        const auto bytes = read_bytes(r.filepath);
        std::uint64_t h = fnv1a(bytes.data(), bytes.size());
        h = fnv1a(settings.data(), settings.size(), h);
        const std::string key = hex(h);
        bool fresh = true;
        if (fs::exists(out)) {
          try {
            const auto old = Checkpoint::load(out);
            fresh = !(old.has_meta("content_hash") && old.meta("content_hash") == key);
          } catch (const Error&) {
          }
        }
        if (fresh) {
          const Waveform w = preprocess(
              parse_wav(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size())), preset);
          Checkpoint ck;
          ck.set_meta("source", r.filepath);
          ck.set_meta("class", r.class_name);
          ck.set_meta("content_hash", key);
          ck.add("features", log_mel(w, mel));
          ck.save(out);
        }
        std::lock_guard lock(mu);
        ++(fresh ? report.written : report.unchanged);
      } catch (const Error& e) {
        std::lock_guard lock(mu);
        report.errors.emplace_back(r.filepath, e.what());
      }
    }
  };
  const int n = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  std::sort(report.errors.begin(), report.errors.end());
  return report;
}

SamplePool load_split(const std::vector<ManifestRow>& rows, const std::map<std::string, Split>& splits, Split which,
                      const Preset& preset, const std::string& cache_dir, bool keep_waveforms) {
  const auto ids = class_index(rows);
  SamplePool pool;
  for (const auto& r : rows) {
    auto it = splits.find(r.class_name);
    if (it == splits.end() || it->second != which) continue;
    const fs::path path = fs::path(cache_dir) / cache_file_name(r.filepath);
    if (!fs::exists(path)) continue;  // failed during prepare
    const auto ck = Checkpoint::load(path);
    Sample s;
    s.features = std::make_shared<Tensor<float>>(ck.get<float>("features"));
    s.class_id = ids.at(r.class_name);
    s.source_id = r.filepath;
    if (keep_waveforms) s.waveform = std::make_shared<Waveform>(preprocess(load_wav(r.filepath), preset));
    pool.samples.push_back(std::move(s));
  }
  return pool;
}

void write_split_assignment(std::ostream& out, const std::map<std::string, Split>& splits) {
  for (const auto& [name, s] : splits) out << name << ',' << to_string(s) << '\n';
}

}  // namespace epift
