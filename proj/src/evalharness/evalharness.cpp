#include "epift/evalharness.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "epift/error.hpp"

namespace epift {

MeanCi mean_ci(const std::vector<double>& xs) {
  MeanCi r;
  if (xs.empty()) return r;
  const double n = static_cast<double>(xs.size());
  double sum = 0.0;
  for (double x : xs) sum += x;
  r.mean = sum / n;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / (n - 1.0));
  }
  r.ci = 1.96 * r.sd / std::sqrt(n);
  return r;
}

Summary summarize(std::vector<EvalRecord> records, const std::string& scheme) {
  std::sort(records.begin(), records.end(), [](const EvalRecord& a, const EvalRecord& b) {
    return a.episode_id < b.episode_id;
  });
  std::vector<double> before, after, gain;
  for (const auto& r : records) {
    before.push_back(r.acc_before);
    after.push_back(r.acc_after);
    gain.push_back(r.acc_after - r.acc_before);
  }
  Summary s;
  s.scheme = scheme.empty() && !records.empty() ? records.front().scheme : scheme;
  s.episodes = records.size();
  const auto b = mean_ci(before), a = mean_ci(after), g = mean_ci(gain);
  s.mean_before = b.mean;
  s.ci_before = b.ci;
  s.mean_after = a.mean;
  s.ci_after = a.ci;
  s.mean_gain = g.mean;
  s.ci_gain = g.ci;
  return s;
}

EpisodeSource pool_source(const SamplePool& pool, int way, int shot, int queries) {
  return [&pool, way, shot, queries](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sample_episode(pool, way, shot, queries, rng);
  };
}

template <typename Scalar>
std::vector<EvalRecord> evaluate_suite(const Learner<Scalar>& learner, const MetaConfig& cfg,
                                       const EpisodeSource& source, const SuiteOptions& opts) {
  if (opts.episodes == 0) throw UsageError("evaluation needs at least one episode");
  std::vector<EvalRecord> records(opts.episodes);
  unsigned threads = opts.threads ? opts.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, opts.episodes));
  const char* scheme = to_string(cfg.scheme);

  std::atomic<std::size_t> next{0};
  std::mutex fail_mu;
  std::exception_ptr failure;
  auto work = [&] {
    for (;;) {
      const std::size_t i = next++;
      if (i >= opts.episodes) return;
      {
        std::lock_guard lock(fail_mu);
        if (failure) return;
      }
      try {
        const std::uint64_t seed = derive_seed(opts.run_seed, i);
        const Episode ep = source(seed);
        const auto r = episode_finetune_eval(learner, ep, cfg, seed);
        records[i] = EvalRecord{i, seed, r.acc_before, r.acc_after, scheme};
      } catch (...) {
        std::lock_guard lock(fail_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return records;
}

template std::vector<EvalRecord> evaluate_suite(const Learner<float>&, const MetaConfig&, const EpisodeSource&,
                                                const SuiteOptions&);
template std::vector<EvalRecord> evaluate_suite(const Learner<double>&, const MetaConfig&, const EpisodeSource&,
                                                const SuiteOptions&);

std::string format_gain(double gain) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f%%", gain * 100.0);
  return buf;
}

GainReport compare_runs(const Summary& baseline, const Summary& variant) {
  GainReport g;
  g.baseline = baseline.mean_after;
  g.variant = variant.mean_after;
  g.gain = variant.mean_after - baseline.mean_after;
  const double lo = std::max(baseline.mean_after - baseline.ci_after, variant.mean_after - variant.ci_after);
  const double hi = std::min(baseline.mean_after + baseline.ci_after, variant.mean_after + variant.ci_after);
  g.ci_overlap = lo <= hi;
  g.formatted = format_gain(g.gain);
  return g;
}

MeanCi paired_gain(const std::vector<EvalRecord>& baseline, const std::vector<EvalRecord>& variant) {
  std::map<std::size_t, const EvalRecord*> base;
  for (const auto& r : baseline) base[r.episode_id] = &r;
  if (base.size() != variant.size())
    throw ConfigError("paired comparison needs the same episodes in both runs (" + std::to_string(base.size()) +
                      " vs " + std::to_string(variant.size()) + ")");
  std::vector<const EvalRecord*> ordered;
  for (const auto& r : variant) ordered.push_back(&r);
  std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->episode_id < b->episode_id; });
  std::vector<double> diffs;
  for (const auto* v : ordered) {
    auto it = base.find(v->episode_id);
    if (it == base.end() || it->second->seed != v->seed)
      throw ConfigError("episode " + std::to_string(v->episode_id) + " differs between the runs");
    diffs.push_back(v->acc_after - it->second->acc_after);
  }
  return mean_ci(diffs);
}

namespace {

std::string shortest(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& field, std::size_t line) {
  T v{};
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size())
    throw DataError("records line " + std::to_string(line) + ": bad number '" + field + "'");
  return v;
}

}  // namespace

void write_records_csv(std::ostream& out, const std::vector<EvalRecord>& records) {
  out << "episode_id,seed,acc_before,acc_after\n";
  for (const auto& r : records)
    out << r.episode_id << ',' << r.seed << ',' << shortest(r.acc_before) << ',' << shortest(r.acc_after) << '\n';
}

std::vector<EvalRecord> read_records_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "episode_id,seed,acc_before,acc_after")
    throw DataError("records file must start with episode_id,seed,acc_before,acc_after");
  std::vector<EvalRecord> out;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw DataError("records line " + std::to_string(n) + ": expected 4 fields");
    EvalRecord r;
    r.episode_id = parse_number<std::size_t>(f[0], n);
    r.seed = parse_number<std::uint64_t>(f[1], n);
    r.acc_before = parse_number<double>(f[2], n);
    r.acc_after = parse_number<double>(f[3], n);
    out.push_back(r);
  }
  return out;
}

void write_records_csv(const std::string& path, const std::vector<EvalRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_records_csv(out, records);
  if (!out) throw IoError("write failed for " + path);
}

std::vector<EvalRecord> read_records_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return read_records_csv(in);
}

std::string summary_json(const Summary& s) {
  nlohmann::ordered_json j;
  j["scheme"] = s.scheme;
  j["episodes"] = s.episodes;
  j["mean_before"] = s.mean_before;
  j["ci_before"] = s.ci_before;
  j["mean_after"] = s.mean_after;
  j["ci_after"] = s.ci_after;
  j["mean_gain"] = s.mean_gain;
  j["ci_gain"] = s.ci_gain;
  return j.dump(2) + "\n";
}

Summary parse_summary_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    Summary s;
    s.scheme = j.at("scheme").get<std::string>();
    s.episodes = j.at("episodes").get<std::size_t>();
    s.mean_before = j.at("mean_before").get<double>();
    s.ci_before = j.at("ci_before").get<double>();
    s.mean_after = j.at("mean_after").get<double>();
    s.ci_after = j.at("ci_after").get<double>();
    s.mean_gain = j.at("mean_gain").get<double>();
    s.ci_gain = j.at("ci_gain").get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad summary json: ") + e.what());
  }
}

std::string render_table(const std::vector<TableRow>& rows) {
  auto cell = [](double m, double ci) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.2f +- %.2f", 100.0 * m, 100.0 * ci);
    return std::string(buf);
  };
  std::vector<std::array<std::string, 4>> table{{"Method", "w/o FT", "w/ FT", "Gain"}};
  for (const auto& r : rows)
    table.push_back({r.method, cell(r.summary.mean_before, r.summary.ci_before),
                     cell(r.summary.mean_after, r.summary.ci_after), format_gain(r.summary.mean_gain)});
  std::array<std::size_t, 4> width{};
  for (const auto& row : table)
    for (std::size_t c = 0; c < 4; ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      if (c) out << " | ";
      out << table[i][c];
      if (c < 3) out << std::string(width[c] - table[i][c].size(), ' ');
    }
    out << '\n';
    if (i == 0) {
      for (std::size_t c = 0; c < 4; ++c) out << (c ? "-|-" : "") << std::string(width[c], '-');
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace epift
