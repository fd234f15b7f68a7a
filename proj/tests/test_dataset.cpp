#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>

#include "mmsr/dataset.hpp"

using namespace mmsr;

namespace {

std::vector<InteractionRecord> random_corpus(std::size_t users, std::size_t items, std::uint64_t seed,
                                             std::size_t max_len = 12) {
  Rng rng(seed);
  std::vector<InteractionRecord> out;
  for (std::size_t u = 0; u < users; ++u) {
    const std::size_t len = 1 + uniform_index(rng, max_len);
    for (std::size_t t = 0; t < len; ++t)
      out.push_back({"u" + std::to_string(u), "i" + std::to_string(uniform_index(rng, items)),
                     static_cast<std::int64_t>(uniform_index(rng, 1000))});
  }
  shuffle_in_place(out, rng);
  return out;
}

// Scan until nothing changes, rebuilding counts from scratch each pass.
std::vector<InteractionRecord> naive_core(std::vector<InteractionRecord> r, std::size_t k) {
  bool changed = true;
  while (changed) {
    changed = false;
    std::map<std::string, std::size_t> users, items;
    for (const auto& x : r) ++users[x.user], ++items[x.item];
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (users[r[i].user] < k || items[r[i].item] < k) {
        r.erase(r.begin() + static_cast<std::ptrdiff_t>(i));
        changed = true;
        break;
      }
    }
  }
  return r;
}

std::size_t rule_adherence(const SynthData& d, std::size_t& transitions) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < d.truth.item_ids.size(); ++i) index[d.truth.item_ids[i]] = i;
  std::size_t ok = 0;
  transitions = 0;
  for (const auto& [user, seq] : user_sequences(d.records))
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      ++transitions;
      ok += d.truth.rule_next[index.at(seq[t])] == index.at(seq[t + 1]);
    }
  return ok;
}

}  // namespace

TEST(LoadInteractions, ParsesInFileOrder) {
  std::istringstream in(R"({"user":"u1","item":"i9","ts":5}
{"user":"u2","item":"i1","ts":1}

{"user":"u1","item":"i3","ts":2}
)");
  const auto r = parse_interactions(in);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0], (InteractionRecord{"u1", "i9", 5}));
  EXPECT_EQ(r[2].item, "i3");
}

TEST(LoadInteractions, ErrorNamesLine) {
  std::istringstream in("{\"user\":\"u1\",\"item\":\"i9\",\"ts\":5}\n{\"user\":\"u1\",\"item\":\"i2\"}\n");
  try {
    parse_interactions(in);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  std::istringstream empty("");
  EXPECT_THROW(parse_interactions(empty), InputError);
  std::istringstream junk("{oops\n");
  EXPECT_THROW(parse_interactions(junk), InputError);
  EXPECT_THROW(load_interactions("/nonexistent/file.jsonl"), InputError);
}

TEST(CoreFilter, AlreadyDenseIsUnchanged) {
  std::vector<InteractionRecord> r;
  for (int u = 0; u < 5; ++u)
    for (int i = 0; i < 5; ++i) r.push_back({"u" + std::to_string(u), "i" + std::to_string(i), u * 10 + i});
  EXPECT_EQ(core_filter(r, 5), r);
}

TEST(CoreFilter, ShortUserIsRemoved) {
  std::vector<InteractionRecord> r;
  for (int i = 0; i < 4; ++i) r.push_back({"u", "i" + std::to_string(i), i});
  EXPECT_TRUE(core_filter(r, 5).empty());
}

TEST(CoreFilter, CascadeMatchesNaiveOracle) {
  // u0..u2 share items a,b; u2 also holds the rare item c which, once dropped,
  // pushes u2 below the threshold, which in turn thins out b.
  std::vector<InteractionRecord> r{{"u0", "a", 1}, {"u0", "b", 2}, {"u1", "a", 1}, {"u1", "b", 2},
                                   {"u2", "a", 1}, {"u2", "c", 2}, {"u3", "b", 1}, {"u3", "a", 2}};
  const auto got = core_filter(r, 2);
  EXPECT_EQ(got, naive_core(r, 2));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto c = random_corpus(40, 30, seed);
    for (std::size_t k : {2u, 3u, 5u}) {
      const auto f = core_filter(c, k);
      ASSERT_EQ(f, naive_core(c, k));
      ASSERT_EQ(core_filter(f, k), f);
    }
  }
}

TEST(Split, FiveItemsOneTestPoint) {
  std::vector<InteractionRecord> r;
  const std::vector<std::string> items{"a", "b", "c", "d", "e"};
  for (std::size_t i = 0; i < items.size(); ++i) r.push_back({"u", items[i], static_cast<std::int64_t>(i)});
  const auto s = split_sequences(r, 0.2, 5);
  ASSERT_EQ(s.test.size(), 1u);
  EXPECT_EQ(s.test[0].prefix, (std::vector<std::string>{"a", "b", "c", "d"}));
  EXPECT_EQ(s.test[0].target, "e");
  EXPECT_EQ(s.train.size(), 3u);
  EXPECT_EQ(s.catalog.size(), 5u);
}

TEST(Split, ShortUserExcluded) {
  std::vector<InteractionRecord> r;
  for (int i = 0; i < 4; ++i) r.push_back({"short", "x" + std::to_string(i), i});
  for (int i = 0; i < 6; ++i) r.push_back({"long", "y" + std::to_string(i), i});
  const auto s = split_sequences(r, 0.2, 5);
  for (const auto& p : s.train) EXPECT_EQ(p.user, "long");
  for (const auto& p : s.test) EXPECT_EQ(p.user, "long");
  EXPECT_EQ(s.catalog.count("x0"), 0u);
  EXPECT_THROW(split_sequences({{"a", "b", 1}}, 0.2, 5), InputError);
}

TEST(Split, TiesKeepFileOrder) {
  std::vector<InteractionRecord> r{{"u", "a", 1}, {"u", "c", 1}, {"u", "b", 0}, {"u", "d", 2}};
  EXPECT_EQ(user_sequences(r).at("u"), (std::vector<std::string>{"b", "a", "c", "d"}));
}

TEST(Split, MatchesPerUserSlicingOracle) {
  const auto corpus = random_corpus(50, 40, 11, 15);
  const auto s = split_sequences(corpus, 0.2, 5);
  // oracle: sort each user's records independently, slice off the tail
  std::map<std::string, std::vector<std::pair<std::int64_t, std::size_t>>> by_user;
  for (std::size_t i = 0; i < corpus.size(); ++i) by_user[corpus[i].user].push_back({corpus[i].ts, i});
  std::multiset<std::string> want_train, want_test, got_train, got_test;
  for (auto& [u, v] : by_user) {
    std::sort(v.begin(), v.end());
    if (v.size() < 5) continue;
    const auto n_test = std::min(std::max<std::size_t>(1, (v.size() + 4) / 5), v.size() - 2);
    for (std::size_t t = 1; t < v.size(); ++t)
      (t >= v.size() - n_test ? want_test : want_train).insert(u + "/" + corpus[v[t].second].item);
  }
  for (const auto& p : s.train) got_train.insert(p.user + "/" + p.target);
  for (const auto& p : s.test) got_test.insert(p.user + "/" + p.target);
  EXPECT_EQ(got_train, want_train);
  EXPECT_EQ(got_test, want_test);

  // every pair sits contiguously in the sorted sequence
  const auto seqs = user_sequences(corpus);
  for (const auto* part : {&s.train, &s.test})
    for (const auto& p : *part) {
      const auto& seq = seqs.at(p.user);
      ASSERT_LT(p.prefix.size(), seq.size());
      ASSERT_TRUE(std::equal(p.prefix.begin(), p.prefix.end(), seq.begin()));
      ASSERT_EQ(seq[p.prefix.size()], p.target);
    }
}

TEST(Split, JsonRoundTrip) {
  const auto s = split_sequences(random_corpus(20, 10, 3), 0.2, 3);
  const json j = s;
  EXPECT_EQ(j.get<SplitDataset>(), s);
}

namespace {

struct Toy {
  SplitDataset split;
  FeatureTable image{Channel::Image, 4, {}};
  FeatureTable text{Channel::Text, 3, {}};
};

Toy toy(std::size_t items = 100) {
  Toy t;
  auto corpus = random_corpus(60, items, 5, 10);
  for (std::size_t i = 0; i < items; ++i) corpus.push_back({"all", "i" + std::to_string(i), static_cast<std::int64_t>(i)});
  t.split = split_sequences(corpus, 0.2, 3);
  Rng rng(8);
  for (const auto& item : t.split.catalog) {
    t.image.entries[item] = {standard_normal(rng), standard_normal(rng), standard_normal(rng), standard_normal(rng)};
    t.text.entries[item] = {standard_normal(rng), standard_normal(rng), standard_normal(rng)};
  }
  return t;
}

}  // namespace

TEST(Perturb, ZeroRatioIsIdentity) {
  const auto t = toy();
  for (auto kind : {PerturbationKind::Disordered, PerturbationKind::Mismatched, PerturbationKind::MissingImage,
                    PerturbationKind::MissingText, PerturbationKind::MissingMix}) {
    const auto out = perturb(t.split, t.image, t.text, {kind, 0.0, 7, false});
    EXPECT_EQ(out.split, t.split);
    EXPECT_EQ(out.image, t.image);
    EXPECT_EQ(out.text, t.text);
  }
}

TEST(Perturb, DisorderedPermutesPrefixesOnly) {
  const auto t = toy();
  const auto out = perturb(t.split, t.image, t.text, {PerturbationKind::Disordered, 1.0, 3, false});
  ASSERT_EQ(out.split.train.size(), t.split.train.size());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < t.split.train.size(); ++i) {
    auto a = t.split.train[i].prefix, b = out.split.train[i].prefix;
    EXPECT_EQ(out.split.train[i].target, t.split.train[i].target);
    changed += a != b;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    ASSERT_EQ(a, b);
  }
  EXPECT_GT(changed, 0u);
  EXPECT_EQ(out.image, t.image);
}

TEST(Perturb, MismatchedKeepsSequencesAndValueMultiset) {
  const auto t = toy();
  for (bool per_channel : {false, true}) {
    const auto out = perturb(t.split, t.image, t.text, {PerturbationKind::Mismatched, 0.5, 3, per_channel});
    EXPECT_EQ(out.split, t.split);
    std::vector<std::vector<double>> a, b;
    std::size_t moved = 0;
    for (const auto& [item, v] : t.image.entries) {
      a.push_back(v);
      b.push_back(out.image.entries.at(item));
      moved += v != out.image.entries.at(item);
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
    EXPECT_EQ(moved, detail::ratio_count(0.5, t.split.catalog.size()));
  }
  // joint displacement: image and text move together
  const auto joint = perturb(t.split, t.image, t.text, {PerturbationKind::Mismatched, 0.5, 3, false});
  std::map<std::vector<double>, std::string> image_owner, text_owner;
  for (const auto& [item, v] : t.image.entries) image_owner[v] = item;
  for (const auto& [item, v] : t.text.entries) text_owner[v] = item;
  for (const auto& item : t.split.catalog)
    EXPECT_EQ(image_owner.at(joint.image.entries.at(item)), text_owner.at(joint.text.entries.at(item)));
}

TEST(Perturb, MissingImageHalfOfHundred) {
  Toy t;
  std::vector<InteractionRecord> corpus;
  for (int i = 0; i < 100; ++i) corpus.push_back({"u", "i" + std::to_string(i), i});
  t.split = split_sequences(corpus, 0.2, 3);
  for (const auto& item : t.split.catalog) t.image.entries[item] = {1, 2, 3, 4}, t.text.entries[item] = {1, 2, 3};
  ASSERT_EQ(t.split.catalog.size(), 100u);
  const auto out = perturb(t.split, t.image, t.text, {PerturbationKind::MissingImage, 0.5, 1, false});
  EXPECT_EQ(out.image.entries.size(), 50u);
  EXPECT_EQ(out.text.entries.size(), 100u);
  const auto mix = perturb(t.split, t.image, t.text, {PerturbationKind::MissingMix, 0.3, 1, false});
  EXPECT_EQ(mix.image.entries.size(), 70u);
  for (const auto& [item, v] : mix.image.entries) EXPECT_TRUE(mix.text.has(item));
  // nested across ratios under one seed
  const auto more = perturb(t.split, t.image, t.text, {PerturbationKind::MissingImage, 0.7, 1, false});
  for (const auto& [item, v] : more.image.entries) EXPECT_TRUE(out.image.has(item));
}

TEST(Perturb, DeterministicUnderSeed) {
  const auto t = toy();
  for (auto kind : {PerturbationKind::Disordered, PerturbationKind::Mismatched, PerturbationKind::MissingText}) {
    const auto a = perturb(t.split, t.image, t.text, {kind, 0.4, 21, false});
    const auto b = perturb(t.split, t.image, t.text, {kind, 0.4, 21, false});
    EXPECT_EQ(json(a.split).dump(), json(b.split).dump());
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.text, b.text);
  }
  EXPECT_THROW(perturb(t.split, t.image, t.text, {PerturbationKind::Disordered, 1.5, 0, false}), InputError);
}

TEST(Synth, NoiselessFollowsRule) {
  SynthSpec s;
  s.noise = 0.0;
  std::size_t n = 0;
  const auto d = synthesize(s);
  EXPECT_EQ(rule_adherence(d, n), n);
  EXPECT_GT(n, 0u);
  s.pattern = SynthPattern::Dual;
  s.clusters = 10;
  s.text_clusters = 5;
  const auto dual = synthesize(s);
  EXPECT_EQ(rule_adherence(dual, n), n);
}

TEST(Synth, AdherenceNearOneMinusNoise) {
  SynthSpec s;
  s.noise = 0.2;
  s.users = 1200;
  s.min_len = 9;
  s.max_len = 9;  // 8 transitions per user, 9600 total
  std::size_t n = 0;
  const auto d = synthesize(s);
  const double rate = static_cast<double>(rule_adherence(d, n)) / static_cast<double>(n);
  EXPECT_GE(n, 9000u);
  EXPECT_GE(rate, 0.78);
  EXPECT_LE(rate, 0.82);
}

TEST(Synth, ClustersAreSeparatedByCosine) {
  SynthSpec s;
  s.clusters = 2;
  s.items = 40;
  s.dim = 64;
  s.feature_noise = 0.1;
  const auto d = synthesize(s);
  double intra = 0, inter = 0;
  std::size_t ni = 0, nx = 0;
  for (std::size_t i = 0; i < s.items; ++i)
    for (std::size_t j = i + 1; j < s.items; ++j) {
      const double c = cosine(d.image.entries.at(d.truth.item_ids[i]), d.image.entries.at(d.truth.item_ids[j]));
      if (d.truth.image_cluster[i] == d.truth.image_cluster[j]) intra += c, ++ni;
      else inter += c, ++nx;
    }
  EXPECT_GT(intra / ni, inter / nx + 0.5);
}

TEST(Synth, InfeasibleSpecRejected) {
  SynthSpec s;
  s.clusters = s.items + 1;
  EXPECT_THROW(synthesize(s), InputError);
  SynthSpec dual;
  dual.pattern = SynthPattern::Dual;
  dual.clusters = 20;
  dual.text_clusters = 20;
  EXPECT_THROW(synthesize(dual), InputError);
}

TEST(Synth, SameSeedSameData) {
  SynthSpec s;
  s.users = 50;
  const auto a = synthesize(s), b = synthesize(s);
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.image, b.image);
}

TEST(FeatureFile, RoundTripThroughF32) {
  const auto dir = std::filesystem::temp_directory_path() / "mmsr_test_features";
  std::filesystem::create_directories(dir);
  FeatureTable t{Channel::Text, 3, {{"b", {0.5, -1.25, 3.0}}, {"a", {1e-3, 2.0, -7.5}}}};
  save_features(dir / "t.feat", t);
  const auto back = load_features(dir / "t.feat", Channel::Text);
  ASSERT_EQ(back.dim, 3u);
  ASSERT_EQ(back.entries.size(), 2u);
  for (const auto& [item, v] : t.entries)
    for (std::size_t i = 0; i < 3; ++i)
      EXPECT_EQ(back.entries.at(item)[i], static_cast<double>(static_cast<float>(v[i])));

  std::ifstream raw(dir / "t.feat", std::ios::binary);
  char magic[8];
  raw.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "MMSRFEAT");

  std::ofstream(dir / "bad.feat", std::ios::binary) << "NOTMAGIC";
  EXPECT_THROW(load_features(dir / "bad.feat", Channel::Text), InputError);
  EXPECT_THROW(load_features(dir / "missing.feat", Channel::Text), InputError);
  std::filesystem::remove_all(dir);
}
