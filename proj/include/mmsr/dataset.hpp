#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmsr/common.hpp"

namespace mmsr {

using json = nlohmann::json;

struct InteractionRecord {
  std::string user;
  std::string item;
  std::int64_t ts = 0;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

enum class Channel : std::uint8_t { Image = 0, Text = 1 };

inline const char* channel_name(Channel c) { return c == Channel::Image ? "image" : "text"; }

/// Raw modality vectors for one channel. Absent entries mean the modality is
/// missing for that item.
struct FeatureTable {
  Channel channel = Channel::Image;
  std::size_t dim = 0;
  std::map<std::string, std::vector<double>> entries;

  bool has(const std::string& item) const { return entries.count(item) != 0; }

  void validate() const {
    if (dim == 0) throw InputError("feature table: dim must be positive");
    for (const auto& [item, v] : entries) {
      if (v.size() != dim) throw InputError("feature table: vector for '" + item + "' has wrong length");
      for (double x : v)
        if (!std::isfinite(x)) throw InputError("feature table: non-finite value for '" + item + "'");
    }
  }

  friend bool operator==(const FeatureTable&, const FeatureTable&) = default;
};

/// One next-item prediction instance: the full chronological prefix and the
/// item that followed it.
struct DataPoint {
  std::string user;
  std::vector<std::string> prefix;
  std::string target;

  friend bool operator==(const DataPoint&, const DataPoint&) = default;
};

struct SplitDataset {
  std::vector<DataPoint> train;
  std::vector<DataPoint> test;
  std::set<std::string> catalog;

  friend bool operator==(const SplitDataset&, const SplitDataset&) = default;
};

enum class PerturbationKind { Disordered, Mismatched, MissingImage, MissingText, MissingMix };

struct PerturbationConfig {
  PerturbationKind kind = PerturbationKind::Disordered;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  /// Mismatched only: displace image and text independently instead of jointly.
  bool per_channel = false;

  void validate() const {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw InputError("perturbation ratio must lie in [0, 1]");
  }
};

inline const char* perturbation_name(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::Disordered: return "disordered";
    case PerturbationKind::Mismatched: return "mismatched";
    case PerturbationKind::MissingImage: return "missing_image";
    case PerturbationKind::MissingText: return "missing_text";
    case PerturbationKind::MissingMix: return "missing_mix";
  }
  return "unknown";
}

inline PerturbationKind parse_perturbation(const std::string& s) {
  for (auto k : {PerturbationKind::Disordered, PerturbationKind::Mismatched, PerturbationKind::MissingImage,
                 PerturbationKind::MissingText, PerturbationKind::MissingMix})
    if (s == perturbation_name(k)) return k;
  throw InputError("unknown perturbation kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// Interactions

inline std::vector<InteractionRecord> parse_interactions(std::istream& in) {
  std::vector<InteractionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InputError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw InputError(where + ": expected a JSON object");
    for (const char* key : {"user", "item", "ts"})
      if (!j.contains(key)) throw InputError(where + ": missing key '" + key + "'");
    if (!j["user"].is_string() || !j["item"].is_string()) throw InputError(where + ": user and item must be strings");
    if (!j["ts"].is_number_integer()) throw InputError(where + ": ts must be an integer");
    out.push_back({j["user"].get<std::string>(), j["item"].get<std::string>(), j["ts"].get<std::int64_t>()});
  }
  if (out.empty()) throw InputError("interaction file contains no records");
  return out;
}

inline std::vector<InteractionRecord> load_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open interaction file " + path.string());
  return parse_interactions(in);
}

inline void save_interactions(const std::filesystem::path& path, const std::vector<InteractionRecord>& records) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& r : records) out << json{{"user", r.user}, {"item", r.item}, {"ts", r.ts}}.dump() << '\n';
}

/// Iteratively drops users and items with fewer than `min_count` interactions
/// until both constraints hold. Record order is preserved.
inline std::vector<InteractionRecord> core_filter(std::vector<InteractionRecord> records, std::size_t min_count) {
  if (min_count < 1) throw InputError("core_filter: min_count must be >= 1");
  while (true) {
    std::unordered_map<std::string, std::size_t> users, items;
    for (const auto& r : records) {
      ++users[r.user];
      ++items[r.item];
    }
    const auto before = records.size();
    std::erase_if(records, [&](const InteractionRecord& r) {
      return users[r.user] < min_count || items[r.item] < min_count;
    });
    if (records.size() == before) return records;
  }
}

/// Per-user item sequences ordered by timestamp, ties kept in input order.
inline std::map<std::string, std::vector<std::string>> user_sequences(const std::vector<InteractionRecord>& records) {
  std::map<std::string, std::vector<std::pair<std::int64_t, std::string>>> grouped;
  for (const auto& r : records) grouped[r.user].emplace_back(r.ts, r.item);
  std::map<std::string, std::vector<std::string>> out;
  for (auto& [user, seq] : grouped) {
    std::stable_sort(seq.begin(), seq.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    auto& dst = out[user];
    for (auto& [ts, item] : seq) dst.push_back(std::move(item));
  }
  return out;
}

/// Number of trailing targets held out for a user with `len` interactions.
/// At least one target always remains for training.
inline std::size_t test_count(std::size_t len, double test_frac) {
  auto n = static_cast<std::size_t>(std::ceil(static_cast<double>(len) * test_frac - 1e-9));
  n = std::max<std::size_t>(n, 1);
  return std::min(n, len - 2);
}

inline SplitDataset split_sequences(const std::vector<InteractionRecord>& records, double test_frac,
                                    std::size_t min_len) {
  if (!(test_frac > 0.0 && test_frac < 1.0)) throw InputError("split: test_frac must lie in (0, 1)");
  if (min_len < 2) throw InputError("split: min_len must be >= 2");
  SplitDataset out;
  for (const auto& [user, seq] : user_sequences(records)) {
    if (seq.size() < std::max<std::size_t>(min_len, 3)) continue;
    const std::size_t n_test = test_count(seq.size(), test_frac);
    const std::size_t first_test = seq.size() - n_test;
    for (std::size_t t = 1; t < seq.size(); ++t) {
      DataPoint p{user, {seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t)}, seq[t]};
      (t < first_test ? out.train : out.test).push_back(std::move(p));
    }
    out.catalog.insert(seq.begin(), seq.end());
  }
  if (out.test.empty()) throw InputError("split: no user survives the length filter");
  return out;
}

// ---------------------------------------------------------------------------
// Perturbation

namespace detail {

inline std::size_t ratio_count(double ratio, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5)));
}

/// Seeded selection order over the sorted catalog. Prefixes of the order are
/// nested, so larger ratios under one seed perturb supersets of items.
inline std::vector<std::string> selection_order(const std::set<std::string>& catalog, Rng& rng) {
  std::vector<std::string> items(catalog.begin(), catalog.end());
  shuffle_in_place(items, rng);
  return items;
}

inline void rotate_entries(FeatureTable& table, const std::vector<std::string>& chosen) {
  if (chosen.size() < 2) return;
  std::vector<std::optional<std::vector<double>>> saved;
  for (const auto& item : chosen) {
    auto it = table.entries.find(item);
    saved.push_back(it == table.entries.end() ? std::nullopt : std::optional(it->second));
  }
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const auto& src = saved[(i + 1) % chosen.size()];
    if (src)
      table.entries[chosen[i]] = *src;
    else
      table.entries.erase(chosen[i]);
  }
}

}  // namespace detail

struct PerturbedData {
  SplitDataset split;
  FeatureTable image;
  FeatureTable text;
};

/// Applies one perturbation. Disordered shuffles the prefixes of a `ratio`
/// fraction of data points; Mismatched cyclically displaces the modality
/// vectors among a `ratio` fraction of items; Missing* deletes entries.
inline PerturbedData perturb(const SplitDataset& split, const FeatureTable& image, const FeatureTable& text,
                             const PerturbationConfig& cfg) {
  cfg.validate();
  PerturbedData out{split, image, text};
  Rng rng(cfg.seed);
  switch (cfg.kind) {
    case PerturbationKind::Disordered: {
      std::vector<DataPoint*> points;
      for (auto& p : out.split.train) points.push_back(&p);
      for (auto& p : out.split.test) points.push_back(&p);
      std::vector<std::size_t> order(points.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      shuffle_in_place(order, rng);
      const std::size_t n = detail::ratio_count(cfg.ratio, points.size());
      std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
      std::sort(chosen.begin(), chosen.end());
      for (std::size_t idx : chosen) shuffle_in_place(points[idx]->prefix, rng);
      break;
    }
    case PerturbationKind::Mismatched: {
      const auto order = detail::selection_order(split.catalog, rng);
      const std::size_t n = detail::ratio_count(cfg.ratio, order.size());
      std::vector<std::string> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
      detail::rotate_entries(out.image, chosen);
      if (cfg.per_channel) shuffle_in_place(chosen, rng);
      detail::rotate_entries(out.text, chosen);
      break;
    }
    case PerturbationKind::MissingImage:
    case PerturbationKind::MissingText:
    case PerturbationKind::MissingMix: {
      const auto order = detail::selection_order(split.catalog, rng);
      const std::size_t n = detail::ratio_count(cfg.ratio, order.size());
      const bool drop_image = cfg.kind != PerturbationKind::MissingText;
      const bool drop_text = cfg.kind != PerturbationKind::MissingImage;
      for (std::size_t i = 0; i < n; ++i) {
        if (drop_image) out.image.entries.erase(order[i]);
        if (drop_text) out.text.entries.erase(order[i]);
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class SynthPattern { Rule, Dual };

/// Parameters of the planted-pattern generator.
///
/// Rule: every item belongs to one latent cluster shared by both channels.
/// The item following `cur` is `rule_target[cluster(cur)]` with probability
/// 1 - noise, otherwise a uniformly random item.
///
/// Dual: items carry independent image and text clusters. The image cluster
/// of the next item advances along a fixed cycle (a sequential pattern within
/// the image channel) while its text cluster is a function of the current
/// item's image and text clusters jointly (a cross-channel matching pattern).
/// The next item is the designated representative of that cluster pair, with
/// the same noise model as Rule.
struct SynthSpec {
  std::size_t users = 500;
  std::size_t items = 200;
  std::size_t clusters = 20;
  std::size_t text_clusters = 0;  // Dual only; 0 means `clusters`
  std::size_t min_len = 5;
  std::size_t max_len = 12;
  std::size_t dim = 64;
  double noise = 0.1;
  double feature_noise = 0.1;
  SynthPattern pattern = SynthPattern::Rule;
  std::uint64_t seed = 7;

  std::size_t effective_text_clusters() const { return text_clusters == 0 ? clusters : text_clusters; }

  void validate() const {
    if (users == 0 || items == 0) throw InputError("synth: users and items must be positive");
    if (clusters == 0) throw InputError("synth: clusters must be positive");
    if (clusters > items) throw InputError("synth: more clusters than items");
    if (pattern == SynthPattern::Dual && clusters * effective_text_clusters() > items)
      throw InputError("synth: dual pattern needs at least clusters x text_clusters items");
    if (min_len < 2 || max_len < min_len) throw InputError("synth: need 2 <= min_len <= max_len");
    if (dim == 0) throw InputError("synth: dim must be positive");
    if (!(noise >= 0.0 && noise <= 1.0)) throw InputError("synth: noise must lie in [0, 1]");
    if (!(feature_noise >= 0.0)) throw InputError("synth: feature_noise must be >= 0");
  }
};

/// Latent structure behind a synthetic corpus, used by oracles in tests.
struct SynthTruth {
  std::vector<std::string> item_ids;
  std::vector<std::size_t> image_cluster;
  std::vector<std::size_t> text_cluster;
  /// Item index predicted by the planted rule for each item index.
  std::vector<std::size_t> rule_next;
  double noise = 0.0;
};

struct SynthData {
  std::vector<InteractionRecord> records;
  FeatureTable image;
  FeatureTable text;
  SynthTruth truth;
};

inline std::string synth_item_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "i%04zu", i);
  return buf;
}

inline std::string synth_user_id(std::size_t u) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "u%05zu", u);
  return buf;
}

inline SynthData synthesize(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t n = spec.items;
  SynthData out;
  auto& truth = out.truth;
  truth.noise = spec.noise;
  for (std::size_t i = 0; i < n; ++i) truth.item_ids.push_back(synth_item_id(i));

  const std::size_t ci = spec.clusters;
  const std::size_t ct = spec.pattern == SynthPattern::Rule ? spec.clusters : spec.effective_text_clusters();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  shuffle_in_place(perm, rng);
  truth.image_cluster.resize(n);
  truth.text_cluster.resize(n);
  // representative[a * ct + b] is the first item placed in cluster pair (a, b)
  std::vector<std::size_t> representative(ci * ct, n);
  for (std::size_t slot = 0; slot < n; ++slot) {
    const std::size_t item = perm[slot];
    if (spec.pattern == SynthPattern::Rule) {
      truth.image_cluster[item] = truth.text_cluster[item] = slot % ci;
    } else {
      const std::size_t pair = slot % (ci * ct);
      truth.image_cluster[item] = pair / ct;
      truth.text_cluster[item] = pair % ct;
    }
    auto& rep = representative[truth.image_cluster[item] * ct + truth.text_cluster[item]];
    if (rep == n) rep = item;
  }

  truth.rule_next.resize(n);
  if (spec.pattern == SynthPattern::Rule) {
    std::vector<std::size_t> targets(n);
    for (std::size_t i = 0; i < n; ++i) targets[i] = i;
    shuffle_in_place(targets, rng);
    for (std::size_t i = 0; i < n; ++i) truth.rule_next[i] = targets[truth.image_cluster[i]];
  } else {
    std::vector<std::size_t> text_map(ci * ct);
    for (auto& t : text_map) t = uniform_index(rng, ct);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = truth.image_cluster[i], b = truth.text_cluster[i];
      const std::size_t next_a = (a + 1) % ci;
      const std::size_t next_b = text_map[a * ct + b];
      truth.rule_next[i] = representative[next_a * ct + next_b];
    }
  }

  auto make_means = [&](std::size_t count) {
    std::vector<std::vector<double>> means(count, std::vector<double>(spec.dim));
    for (auto& m : means)
      for (double& x : m) x = standard_normal(rng);
    return means;
  };
  const auto image_means = make_means(ci);
  const auto text_means = make_means(ct);
  out.image = {Channel::Image, spec.dim, {}};
  out.text = {Channel::Text, spec.dim, {}};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> a = image_means[truth.image_cluster[i]];
    std::vector<double> b = text_means[truth.text_cluster[i]];
    for (double& x : a) x += spec.feature_noise * standard_normal(rng);
    for (double& x : b) x += spec.feature_noise * standard_normal(rng);
    out.image.entries[truth.item_ids[i]] = std::move(a);
    out.text.entries[truth.item_ids[i]] = std::move(b);
  }

  std::int64_t ts = 0;
  for (std::size_t u = 0; u < spec.users; ++u) {
    const std::size_t len = spec.min_len + uniform_index(rng, spec.max_len - spec.min_len + 1);
    std::size_t cur = uniform_index(rng, n);
    const std::string user = synth_user_id(u);
    for (std::size_t t = 0; t < len; ++t) {
      out.records.push_back({user, truth.item_ids[cur], ts++});
      cur = uniform01(rng) < spec.noise ? uniform_index(rng, n) : truth.rule_next[cur];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary feature files

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw InputError("unexpected end of binary file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& out, double v) { write_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

inline double read_f32(std::istream& in) { return static_cast<double>(std::bit_cast<float>(read_u32(in))); }

inline constexpr char kFeatureMagic[8] = {'M', 'M', 'S', 'R', 'F', 'E', 'A', 'T'};

}  // namespace detail

/// Writes `rows` as records keyed by index into `ids`.
inline void write_feature_records(std::ostream& out, std::size_t dim,
                                  const std::vector<std::pair<std::uint32_t, std::span<const double>>>& rows) {
  out.write(detail::kFeatureMagic, 8);
  detail::write_u32(out, static_cast<std::uint32_t>(rows.size()));
  detail::write_u32(out, static_cast<std::uint32_t>(dim));
  for (const auto& [idx, v] : rows) {
    detail::write_u32(out, idx);
    for (double x : v) detail::write_f32(out, x);
  }
}

struct FeatureRecords {
  std::size_t dim = 0;
  std::vector<std::pair<std::uint32_t, std::vector<double>>> rows;
};

inline FeatureRecords read_feature_records(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kFeatureMagic, 8) != 0)
    throw InputError("feature file: bad magic");
  FeatureRecords out;
  const std::uint32_t count = detail::read_u32(in);
  out.dim = detail::read_u32(in);
  out.rows.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint32_t idx = detail::read_u32(in);
    std::vector<double> v(out.dim);
    for (double& x : v) x = detail::read_f32(in);
    out.rows.emplace_back(idx, std::move(v));
  }
  return out;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& bin) {
  auto p = bin;
  p.replace_extension(".ids.json");
  return p;
}

/// Saves a feature table as `path` plus a JSON id-map sidecar.
inline void save_features(const std::filesystem::path& path, const FeatureTable& table) {
  std::vector<std::string> ids;
  std::vector<std::pair<std::uint32_t, std::span<const double>>> rows;
  for (const auto& [item, v] : table.entries) {
    rows.emplace_back(static_cast<std::uint32_t>(ids.size()), std::span<const double>(v));
    ids.push_back(item);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  write_feature_records(out, table.dim, rows);
  std::ofstream side(sidecar_path(path));
  side << json(ids).dump() << '\n';
}

inline FeatureTable load_features(const std::filesystem::path& path, Channel channel) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open feature file " + path.string());
  auto records = read_feature_records(in);
  std::ifstream side(sidecar_path(path));
  if (!side) throw InputError("missing id-map sidecar " + sidecar_path(path).string());
  std::vector<std::string> ids;
  try {
    ids = json::parse(side).get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw InputError("bad id-map sidecar: " + std::string(e.what()));
  }
  FeatureTable table{channel, records.dim, {}};
  for (auto& [idx, v] : records.rows) {
    if (idx >= ids.size()) throw InputError("feature record index outside id-map");
    table.entries[ids[idx]] = std::move(v);
  }
  table.validate();
  return table;
}

// ---------------------------------------------------------------------------
// JSON forms

inline void to_json(json& j, const DataPoint& p) { j = json{{"user", p.user}, {"prefix", p.prefix}, {"target", p.target}}; }

inline void from_json(const json& j, DataPoint& p) {
  j.at("user").get_to(p.user);
  j.at("prefix").get_to(p.prefix);
  j.at("target").get_to(p.target);
}

inline void to_json(json& j, const SplitDataset& s) {
  j = json{{"train", s.train}, {"test", s.test}, {"catalog", s.catalog}};
}

inline void from_json(const json& j, SplitDataset& s) {
  j.at("train").get_to(s.train);
  j.at("test").get_to(s.test);
  j.at("catalog").get_to(s.catalog);
}

}  // namespace mmsr
