#include <gtest/gtest.h>

#include <sstream>

#include "mmsr/evaluation.hpp"
#include "mmsr/training.hpp"
#include "test_util.hpp"

using namespace mmsr;
using mmsr::testing::gradient_error;
using mmsr::testing::random_codes;
using mmsr::testing::random_matrix;

namespace {

ModelConfig small_config(Aggregator agg = Aggregator::HAN) {
  ModelConfig c;
  c.d = 4;
  c.layers = 2;
  c.aggregator = agg;
  c.c = 4;
  c.k = 2;
  c.m_max = 10;
  c.batch_size = 4;
  c.epochs = 3;
  c.l2 = 0.0;
  return c;
}

std::vector<const GraphExample*> ptrs(const std::vector<GraphExample>& v) {
  std::vector<const GraphExample*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

// one user cycling through five items
std::vector<GraphExample> cycle_examples(std::size_t items = 5, std::size_t len = 11) {
  std::vector<GraphExample> out;
  std::vector<std::size_t> seq;
  for (std::size_t t = 0; t < len; ++t) seq.push_back(t % items);
  for (std::size_t t = 1; t < seq.size(); ++t)
    out.push_back({build_graph({seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t)}, {}, {}), seq[t]});
  return out;
}

}  // namespace

TEST(LastPool, PicksLastItemNode) {
  ModelConfig cfg = small_config();
  GraphModel m(cfg, 6, Matrix(), Matrix());
  Rng rng(1);
  for (const std::vector<std::size_t>& prefix : {std::vector<std::size_t>{1, 2, 3}, std::vector<std::size_t>{1, 2, 1}}) {
    const auto g = build_graph(prefix, {}, {});
    const auto b = GraphBatch::of(g);
    ad::NoGradGuard guard;
    const auto z = m.states(b, false, rng);
    const auto p = last_pool(b, z)->value;
    const auto node = g.find({NodeType::Item, prefix.back()});
    EXPECT_EQ(g.nodes[node].positions.back(), prefix.size());
    for (std::size_t k = 0; k < cfg.d; ++k) EXPECT_EQ(p(0, k), z->value(node, k));
    // mean pooling gives a different vector
    double diff = 0;
    for (std::size_t k = 0; k < cfg.d; ++k) {
      double mean = 0;
      for (std::size_t i = 0; i < b.num_nodes(); ++i) mean += z->value(i, k) / static_cast<double>(b.num_nodes());
      diff += std::abs(mean - p(0, k));
    }
    EXPECT_GT(diff, 1e-6);
  }
}

TEST(Score, ForwardMatchesPerItemLoop) {
  Rng rng(2);
  const auto image = random_codes(7, 4, 2, 0.2, rng), text = random_codes(7, 4, 2, 0.2, rng);
  ModelConfig cfg = small_config();
  GraphModel m(cfg, 7, random_matrix(4, 4, rng), random_matrix(4, 4, rng));
  std::vector<GraphExample> ex{{build_graph({0, 3, 5}, image, text), 1}, {build_graph({6}, image, text), 2}};
  ad::NoGradGuard guard;
  const auto logits = m.forward(ptrs(ex), false, rng)->value;
  GraphBatch b;
  for (const auto& e : ex) b.append(e.graph);
  const auto p = last_pool(b, m.states(b, false, rng))->value;
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t v = 0; v < 7; ++v) {
      double s = 0;
      for (std::size_t k = 0; k < cfg.d; ++k) s += p(r, k) * m.tables.item->value(v, k);
      EXPECT_NEAR(logits(r, v), s, 1e-10);
    }
}

TEST(Score, SelfSimilarityAndZero) {
  Matrix table = Matrix::identity(8);
  auto p = ad::constant(Matrix(1, 8));
  const auto zero = ad::matmul_nt(p, ad::constant(table));
  for (double x : zero->value.data) EXPECT_EQ(x, 0.0);
  p->value(0, 7) = 1.0;
  const auto l = ad::matmul_nt(p, ad::constant(table))->value;
  EXPECT_EQ(std::max_element(l.data.begin(), l.data.end()) - l.data.begin(), 7);
}

TEST(CrossEntropy, UniformLogitsGiveLogCatalog) {
  const auto loss = ad::cross_entropy(ad::constant(Matrix(2, 37, 0.25)), {3, 36});
  EXPECT_NEAR(loss->value.data[0], std::log(37.0), 1e-12);
}

TEST(CrossEntropy, GrowingTargetLogitDrivesLossToZero) {
  double prev = INFINITY;
  for (double t = 0.0; t <= 30.0; t += 1.0) {
    Matrix l(1, 10, 0.0);
    l(0, 4) = t;
    const double v = ad::cross_entropy(ad::constant(l), {4})->value.data[0];
    ASSERT_LT(v, prev);
    prev = v;
  }
  EXPECT_LT(prev, 1e-11);
}

TEST(CrossEntropy, MatchesDirectFormulaAndShiftInvariant) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const Matrix l = random_matrix(4, 25, rng, 10.0);
    const std::vector<std::size_t> y{0, 7, 24, 13};
    double want = 0;
    for (std::size_t r = 0; r < 4; ++r) {
      double z = 0;
      for (std::size_t c = 0; c < 25; ++c) z += std::exp(l(r, c));
      want += -std::log(std::exp(l(r, y[r])) / z);
    }
    const double got = ad::cross_entropy(ad::constant(l), y)->value.data[0];
    ASSERT_NEAR(got, want / 4, 1e-8);
    Matrix shifted = l;
    for (double& x : shifted.data) x += 123.0;
    ASSERT_NEAR(ad::cross_entropy(ad::constant(shifted), y)->value.data[0], got, 1e-10);
  }
}

TEST(Optimizer, L2MatchesDirectSumAndGradient) {
  Rng rng(4);
  NamedVars params{{"a", ad::parameter(random_matrix(3, 4, rng))}, {"b", ad::parameter(random_matrix(1, 5, rng))}};
  double direct = 0;
  for (const auto& [n, p] : params)
    for (double x : p->value.data) direct += x * x;
  EXPECT_NEAR(l2_penalty(params, 0.3), 0.3 * direct, 1e-14);
  zero_grads(params);
  add_l2_grad(params, 0.3);
  for (const auto& [n, p] : params)
    for (std::size_t i = 0; i < p->grad.size(); ++i) EXPECT_NEAR(p->grad[i], 0.6 * p->value.data[i], 1e-15);
}

TEST(Optimizer, ClipGlobalNorm) {
  NamedVars params{{"a", ad::parameter(Matrix(1, 2))}};
  params[0].second->grad = {30.0, 40.0};
  EXPECT_DOUBLE_EQ(clip_global_norm(params, 5.0), 50.0);
  EXPECT_NEAR(params[0].second->grad[0], 3.0, 1e-15);
  EXPECT_NEAR(params[0].second->grad[1], 4.0, 1e-15);
  EXPECT_DOUBLE_EQ(clip_global_norm(params, 5.0), 5.0);
}

TEST(Optimizer, AdamFirstStepHasLearningRateSize) {
  NamedVars params{{"a", ad::parameter(Matrix(1, 3))}};
  params[0].second->grad = {2.0, -0.5, 0.0};
  Adam adam(0.1);
  adam.step(params);
  EXPECT_NEAR(params[0].second->value.data[0], -0.1, 1e-8);
  EXPECT_NEAR(params[0].second->value.data[1], 0.1, 1e-8);
  EXPECT_EQ(params[0].second->value.data[2], 0.0);
}

TEST(Optimizer, SnapshotRestoreChecksNamesAndShapes) {
  NamedVars params{{"a", ad::parameter(Matrix(2, 2, 1.0))}};
  const auto snap = snapshot(params);
  params[0].second->value.data[0] = 9.0;
  restore(params, snap);
  EXPECT_EQ(params[0].second->value(0, 0), 1.0);
  EXPECT_THROW(restore(params, {{"b", Matrix(2, 2)}}), InputError);
  EXPECT_THROW(restore(params, {{"a", Matrix(2, 3)}}), InputError);
}

TEST(Train, ZeroLearningRateChangesNothing) {
  ModelConfig cfg = small_config();
  cfg.lr = 0.0;
  cfg.l2 = 1e-3;
  GraphModel m(cfg, 5, Matrix(), Matrix());
  const auto before = snapshot(m.parameters());
  train_model(m, cycle_examples(), {});
  const auto after = snapshot(m.parameters());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].second, after[i].second) << before[i].first;
}

TEST(Train, ToyLossDecreasesForFiveEpochs) {
  ModelConfig cfg = small_config();
  cfg.d = 8;
  cfg.lr = 1e-3;
  cfg.epochs = 5;
  cfg.batch_size = 64;  // one full batch per epoch
  GraphModel m(cfg, 5, Matrix(), Matrix());
  const auto r = train_model(m, cycle_examples(), {});
  ASSERT_EQ(r.history.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(r.history[e].train_loss, r.history[e - 1].train_loss);
}

TEST(Train, LogLinesAndBestEpoch) {
  ModelConfig cfg = small_config();
  cfg.epochs = 4;
  GraphModel m(cfg, 5, Matrix(), Matrix());
  const auto ex = cycle_examples();
  std::ostringstream log;
  const auto r = train_model(m, ex, {ex.back()}, &log);
  std::istringstream in(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    for (const char* key : {"epoch", "train_loss", "val_hr5", "val_mrr5", "wall_ms"}) EXPECT_TRUE(j.contains(key));
    ++n;
  }
  EXPECT_EQ(n, 4u);
  double best = -1;
  std::size_t arg = 0;
  for (const auto& e : r.history)
    if (e.val_hr5 > best) best = e.val_hr5, arg = e.epoch;
  EXPECT_EQ(r.best_epoch, arg);
}

TEST(Train, SameSeedSameCheckpointBytes) {
  Rng rng(5);
  const auto image = random_codes(5, 4, 2, 0.0, rng), text = random_codes(5, 4, 2, 0.0, rng);
  const Matrix ci = random_matrix(4, 4, rng), ct = random_matrix(4, 4, rng);
  std::vector<GraphExample> ex;
  const std::vector<std::size_t> seq{0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0};
  for (std::size_t t = 1; t < seq.size(); ++t)
    ex.push_back({build_graph({seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t)}, image, text), seq[t]});
  auto run = [&] {
    GraphModel m(small_config(), 5, ci, ct);
    train_model(m, ex, {});
    std::ostringstream out;
    write_checkpoint(out, snapshot(m.parameters()));
    return out.str();
  };
  EXPECT_EQ(run(), run());
}

TEST(Train, NonFiniteLossAborts) {
  GraphModel m(small_config(), 5, Matrix(), Matrix());
  m.tables.item->value.data[0] = std::nan("");
  EXPECT_THROW(train_model(m, cycle_examples(), {}), RuntimeFailure);
}

TEST(Train, FrozenCodesStayPut) {
  ModelConfig cfg = small_config();
  cfg.freeze_codes = true;
  Rng rng(6);
  GraphModel m(cfg, 5, random_matrix(4, 4, rng), random_matrix(4, 4, rng));
  for (const auto& [n, v] : m.trainable()) EXPECT_TRUE(n != "emb.image_code" && n != "emb.text_code");
  cfg.use_position = false;
  GraphModel m2(cfg, 5, Matrix(), Matrix());
  for (const auto& [n, v] : m2.trainable()) EXPECT_TRUE(n != "emb.position" && n != "emb.image_code");
}

TEST(Gradients, EndToEndEveryParameterGroup) {
  Rng rng(7);
  const auto image = random_codes(20, 4, 2, 0.0, rng), text = random_codes(20, 4, 2, 0.0, rng);
  for (auto agg : {Aggregator::HAN, Aggregator::GCN, Aggregator::GAT, Aggregator::Sync}) {
    ModelConfig cfg = small_config(agg);
    cfg.gate_hidden = 3;
    GraphModel m(cfg, 20, random_matrix(4, 4, rng), random_matrix(4, 4, rng));
    // larger weights keep attention gradients well above rounding noise
    for (const auto& [n, v] : m.parameters())
      for (double& x : v->value.data) x *= 2.0;
    std::vector<GraphExample> ex{{build_graph({3, 7, 3, 11}, image, text), 5}};
    ASSERT_LE(ex[0].graph.nodes.size(), 12u);
    Rng unused(0);
    for (const auto& [name, v] : m.trainable()) {
      const double err = gradient_error([&] { return ad::cross_entropy(m.forward(ptrs(ex), false, unused), {5}); }, {v}, 1e-5);
      EXPECT_LT(err, 1e-4) << aggregator_name(agg) << " " << name;
    }
  }
}

TEST(Validation, LastTrainingPointPerUser) {
  std::vector<DataPoint> train{{"a", {"x"}, "y"}, {"a", {"x", "y"}, "z"}, {"b", {"p"}, "q"}};
  const auto [rest, val] = hold_out_validation(train);
  ASSERT_EQ(val.size(), 1u);
  EXPECT_EQ(val[0], train[1]);
  EXPECT_EQ(rest.size(), 2u);
}

TEST(Config, JsonRoundTripAndUnknownKey) {
  ModelConfig c;
  c.aggregator = Aggregator::NI_HEHO;
  c.d = 16;
  c.freeze_codes = true;
  const json j = c;
  ModelConfig back;
  from_json(j, back);
  EXPECT_EQ(json(back), j);
  ModelConfig bad;
  EXPECT_THROW(from_json(json{{"depth", 3}}, bad), InputError);
  EXPECT_THROW(from_json(json{{"aggregator", "SAGE"}}, bad), InputError);
}

TEST(Encode, TruncatesToMostRecent) {
  ItemIndex idx(std::set<std::string>{"a", "b", "c", "d"});
  const auto e = encode_points({{"u", {"a", "b", "c", "d"}, "a"}}, idx, 2);
  EXPECT_EQ(e[0].prefix, (std::vector<std::size_t>{2, 3}));
  EXPECT_THROW(encode_points({{"u", {"zz"}, "a"}}, idx, 2), InputError);
}

TEST(Fusion, ZeroModalityWeightsIgnoreFeatures) {
  Rng rng(9);
  ModelConfig cfg = small_config();
  for (auto mode : {FusionMode::Early, FusionMode::Late}) {
    FusionModel a(cfg, mode, 6, {random_matrix(6, 3, rng), random_matrix(6, 5, rng)});
    FusionModel b(cfg, mode, 6, {random_matrix(6, 3, rng), random_matrix(6, 5, rng)});
    for (auto* m : {&a, &b}) {
      std::fill(m->image_proj->value.data.begin(), m->image_proj->value.data.end(), 0.0);
      std::fill(m->text_proj->value.data.begin(), m->text_proj->value.data.end(), 0.0);
    }
    std::vector<SeqExample> ex{{{1, 4, 2}, 0}, {{5}, 1}};
    std::vector<const SeqExample*> batch{&ex[0], &ex[1]};
    Rng unused(0);
    EXPECT_EQ(a.forward(batch, false, unused)->value, b.forward(batch, false, unused)->value);
  }
}

TEST(Fusion, PaddingDoesNotLeak) {
  Rng rng(10);
  ModelConfig cfg = small_config();
  FusionModel m(cfg, FusionMode::Late, 6, {random_matrix(6, 3, rng), random_matrix(6, 5, rng)});
  std::vector<SeqExample> ex{{{1, 4, 2, 3, 0}, 0}, {{5, 2}, 1}};
  ad::NoGradGuard guard;
  std::vector<const SeqExample*> both{&ex[0], &ex[1]}, alone{&ex[1]};
  const auto a = m.represent(both)->value, b = m.represent(alone)->value;
  for (std::size_t k = 0; k < cfg.d; ++k) EXPECT_NEAR(a(1, k), b(0, k), 1e-14);
}

TEST(Fusion, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  ModelConfig cfg = small_config();
  for (auto mode : {FusionMode::Early, FusionMode::Late}) {
    FusionModel m(cfg, mode, 6, {random_matrix(6, 3, rng), random_matrix(6, 5, rng)});
    std::vector<SeqExample> ex{{{1, 4, 2}, 0}, {{5}, 3}};
    std::vector<const SeqExample*> batch{&ex[0], &ex[1]};
    Rng unused(0);
    for (const auto& [name, v] : m.trainable())
      EXPECT_LT(gradient_error([&] { return ad::cross_entropy(m.forward(batch, false, unused), {0, 3}); }, {v}, 1e-5), 1e-4)
          << fusion_name(mode) << " " << name;
  }
}

TEST(Train, NoiselessRuleIsLearned) {
  SynthSpec s;
  s.noise = 0.0;
  const auto synth = synthesize(s);
  PrepareOptions popt;
  popt.min_count = 1;
  const auto data = prepare(synth.records, synth.image, synth.text, popt);
  ModelConfig cfg;
  cfg.epochs = 30;
  QuantizerOptions qopt = quantizer_for(cfg);
  qopt.ae_epochs = 200;
  const auto q = quantize(data, qopt);
  const auto run = run_graph(data, q, cfg, {5}, 4);
  EXPECT_GE(run.test.hr.at(5), 0.9);
}
