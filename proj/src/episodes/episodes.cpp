#include "epift/episodes.hpp"

#include <algorithm>
#include <map>

#include "epift/error.hpp"

namespace epift {

const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::none: return "none";
    case Scheme::rdft: return "rdft";
    case Scheme::idft: return "idft";
    case Scheme::adft: return "adft";
  }
  return "?";
}

Scheme parse_scheme(const std::string& text) {
  if (text == "none") return Scheme::none;
  if (text == "rdft") return Scheme::rdft;
  if (text == "idft") return Scheme::idft;
  if (text == "adft") return Scheme::adft;
  throw ConfigError("unknown scheme '" + text + "' (expected none, rdft, idft or adft)");
}

std::vector<int> SamplePool::class_ids() const {
  std::vector<int> ids;
  for (const auto& s : samples) ids.push_back(s.class_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::vector<std::size_t> SamplePool::indices_of(int class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].class_id == class_id) out.push_back(i);
  return out;
}

namespace {

// First `count` entries of a partial Fisher-Yates shuffle.
template <typename T>
void choose_prefix(std::vector<T>& items, std::size_t count, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
    std::swap(items[i], items[pick(rng)]);
  }
}

void require_split_shots(const SampleGrid& support, const char* scheme) {
  if (support.empty() || support[0].empty()) throw ShapeError(std::string(scheme) + ": empty support grid");
  const std::size_t n = support[0].size();
  for (const auto& row : support)
    if (row.size() != n) throw ShapeError(std::string(scheme) + ": ragged support grid");
  if (n < 2)
    throw ConfigError(std::string(scheme) + " needs at least 2 shots per class; episode has " + std::to_string(n));
}

PseudoEpisode assemble(const SampleGrid& support, const std::vector<int>& columns, int query_column, Scheme origin,
                       int index) {
  PseudoEpisode pe;
  pe.origin = origin;
  pe.index = index;
  pe.support_columns = columns;
  pe.query_column = query_column;
  for (const auto& row : support) {
    std::vector<Sample> r;
    for (int c : columns) r.push_back(row[static_cast<std::size_t>(c)]);
    pe.support.push_back(std::move(r));
    pe.query.push_back(row[static_cast<std::size_t>(query_column)]);
  }
  return pe;
}

}  // namespace

Episode sample_episode(const SamplePool& pool, int way, int shot, int queries_per_class, std::mt19937_64& rng) {
  if (way < 1 || shot < 1 || queries_per_class < 0)
    throw ConfigError("episode needs way >= 1, shot >= 1 and queries >= 0");
  const std::size_t need = static_cast<std::size_t>(shot + queries_per_class);
  std::vector<int> classes = pool.class_ids();
  if (classes.size() < static_cast<std::size_t>(way))
    throw CapacityError("pool has " + std::to_string(classes.size()) + " classes, episode needs " +
                        std::to_string(way) + " (short by " + std::to_string(way - static_cast<int>(classes.size())) +
                        ")");
  std::map<int, std::vector<std::size_t>> by_class;
  for (int c : classes) {
    by_class[c] = pool.indices_of(c);
    const std::size_t have = by_class[c].size();
    if (have < need)
      throw CapacityError("class " + std::to_string(c) + " has " + std::to_string(have) + " samples, episode needs " +
                          std::to_string(need) + " (short by " + std::to_string(need - have) + ")");
  }
  choose_prefix(classes, static_cast<std::size_t>(way), rng);

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  std::vector<std::vector<std::size_t>> picks;
  for (int k = 0; k < way; ++k) {
    const int c = classes[static_cast<std::size_t>(k)];
    auto idx = by_class[c];
    choose_prefix(idx, need, rng);
    idx.resize(need);
    ep.classes.push_back(c);
    std::vector<Sample> row;
    for (std::size_t j = 0; j < static_cast<std::size_t>(shot); ++j) row.push_back(pool.samples[idx[j]]);
    ep.support.push_back(std::move(row));
    picks.push_back(std::move(idx));
  }
  for (int k = 0; k < way; ++k)
    for (std::size_t j = static_cast<std::size_t>(shot); j < need; ++j) {
      ep.query.push_back(pool.samples[picks[static_cast<std::size_t>(k)][j]]);
      ep.query_labels.push_back(k);
    }
  return ep;
}

std::vector<PseudoEpisode> rdft_split(const SampleGrid& support) {
  require_split_shots(support, "rdft");
  const int n = static_cast<int>(support[0].size());
  std::vector<PseudoEpisode> out;
  for (int j = 0; j < n; ++j) {
    std::vector<int> cols;
    for (int c = 0; c < n; ++c)
      if (c != j) cols.push_back(c);
    out.push_back(assemble(support, cols, j, Scheme::rdft, j));
  }
  return out;
}

std::vector<PseudoEpisode> idft_split(const SampleGrid& support) {
  require_split_shots(support, "idft");
  const int n = static_cast<int>(support[0].size());
  std::vector<PseudoEpisode> out;
  for (int t = 1; t < n; ++t) {
    std::vector<int> cols;
    for (int c = 0; c < t; ++c) cols.push_back(c);
    out.push_back(assemble(support, cols, t, Scheme::idft, t - 1));
  }
  return out;
}

std::vector<PseudoEpisode> adft_split(const SampleGrid& support, const Augmenter* augmenter, std::uint64_t seed,
                                      SplitStats* stats) {
  require_split_shots(support, "adft");
  const int n = static_cast<int>(support[0].size());
  std::vector<PseudoEpisode> out;
  for (int j = 0; j < n; ++j) {
    const int dup = (j + n - 1) % n;
    std::vector<int> cols;
    for (int c = 0; c < n; ++c)
      if (c != j) cols.push_back(c);
    cols.push_back(dup);
    PseudoEpisode pe = assemble(support, cols, j, Scheme::adft, j);
    if (augmenter && *augmenter) {
      for (std::size_t k = 0; k < pe.support.size(); ++k) {
        Sample& copy = pe.support[k].back();
        std::mt19937_64 rng(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(j)), k));
        try {
          Sample aug = (*augmenter)(copy, rng);
          aug.class_id = copy.class_id;
          aug.source_id = copy.source_id;
          aug.augmented = true;
          if (!aug.features || !aug.features->all_finite()) throw DataError("augmented features are not finite");
          copy = std::move(aug);
        } catch (const std::exception&) {
          if (stats) ++stats->augment_failures;
        }
      }
    }
    out.push_back(std::move(pe));
  }
  return out;
}

std::vector<PseudoEpisode> make_pseudo_episodes(Scheme scheme, const SampleGrid& support,
                                                const Augmenter* augmenter, std::uint64_t seed, SplitStats* stats) {
  switch (scheme) {
    case Scheme::none: return {};
    case Scheme::rdft: return rdft_split(support);
    case Scheme::idft: return idft_split(support);
    case Scheme::adft: return adft_split(support, augmenter, seed, stats);
  }
  return {};
}

std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void write_episode_manifest(std::ostream& out, const std::string& episode_id, const Episode& episode) {
  for (std::size_t k = 0; k < episode.support.size(); ++k)
    for (std::size_t j = 0; j < episode.support[k].size(); ++j)
      out << episode_id << ",support," << episode.support[k][j].class_id << ',' << j << ','
          << episode.support[k][j].source_id << '\n';
  std::vector<int> seen(episode.support.size(), 0);
  for (std::size_t i = 0; i < episode.query.size(); ++i) {
    const int k = episode.query_labels[i];
    out << episode_id << ",query," << episode.query[i].class_id << ',' << seen[static_cast<std::size_t>(k)]++ << ','
        << episode.query[i].source_id << '\n';
  }
}

}  // namespace epift
