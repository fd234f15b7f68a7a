#pragma once

// End-to-end runs and experiment recipes: ablation grid, missing-modality
// robustness sweep, codebook size sweep and the fusion-order perturbation
// study with the recurrent base models.

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmsr/dataset.hpp"
#include "mmsr/metrics.hpp"
#include "mmsr/quantizer.hpp"
#include "mmsr/training.hpp"

namespace mmsr {

struct PrepareOptions {
  std::size_t min_count = 5;
  double test_frac = 0.2;
  std::size_t min_len = 3;
};

struct Prepared {
  SplitDataset split;
  FeatureTable image;
  FeatureTable text;
};

inline Prepared prepare(const std::vector<InteractionRecord>& records, FeatureTable image, FeatureTable text,
                        const PrepareOptions& opt = {}) {
  image.validate();
  text.validate();
  auto filtered = core_filter(records, opt.min_count);
  if (filtered.empty()) throw InputError("prepare: no interactions survive core filtering");
  return {split_sequences(filtered, opt.test_frac, opt.min_len), std::move(image), std::move(text)};
}

/// Items seen in any training prefix or target.
inline std::set<std::string> training_items(const SplitDataset& split) {
  std::set<std::string> out;
  for (const auto& p : split.train) {
    out.insert(p.prefix.begin(), p.prefix.end());
    out.insert(p.target);
  }
  return out;
}

struct Quantized {
  ChannelQuantizer image;
  ChannelQuantizer text;
};

/// Quantizer settings tied to a model: code width d, c clusters, k codes.
inline QuantizerOptions quantizer_for(const ModelConfig& cfg, QuantizerOptions base = {}) {
  base.code_dim = cfg.d;
  base.clusters = cfg.c;
  base.codes_per_item = cfg.k;
  return base;
}

inline Quantized quantize(const Prepared& data, const QuantizerOptions& opt) {
  const auto fit = training_items(data.split);
  return {build_quantizer(data.image, fit, opt), build_quantizer(data.text, fit, opt)};
}

/// A prepared split encoded against the sorted catalog.
struct Encoded {
  ItemIndex index;
  std::vector<EncodedPoint> train, val, test;
};

inline Encoded encode(const SplitDataset& split, const ModelConfig& cfg) {
  Encoded e{ItemIndex(split.catalog), {}, {}, {}};
  if (cfg.validation) {
    auto [train, val] = hold_out_validation(split.train);
    e.train = encode_points(train, e.index, cfg.m_max);
    e.val = encode_points(val, e.index, cfg.m_max);
  } else {
    e.train = encode_points(split.train, e.index, cfg.m_max);
  }
  e.test = encode_points(split.test, e.index, cfg.m_max);
  return e;
}

struct GraphRun {
  GraphModel model;
  TrainResult train;
  MetricReport test;
};

inline GraphOptions graph_options(const ModelConfig& cfg) { return {cfg.image_text_edges}; }

/// Trains a graph model on `data` with codes from `q` and evaluates on the
/// test split.
inline GraphRun run_graph(const Prepared& data, const Quantized& q, const ModelConfig& cfg, const std::vector<int>& ks,
                          std::size_t threads = 1, std::ostream* log = nullptr) {
  const Encoded enc = encode(data.split, cfg);
  const ItemCodes image = item_codes(q.image.codebook.assignments, enc.index);
  const ItemCodes text = item_codes(q.text.codebook.assignments, enc.index);
  const auto gopt = graph_options(cfg);
  GraphRun run{GraphModel(cfg, enc.index.size(), q.image.codebook.centers, q.text.codebook.centers), {}, {}};
  run.train = train_model(run.model, graph_examples(enc.train, image, text, gopt),
                          graph_examples(enc.val, image, text, gopt), log);
  run.test = evaluate(run.model, graph_examples(enc.test, image, text, gopt), ks, 256, threads);
  run.test.config = cfg;
  run.test.seed = cfg.seed;
  return run;
}

/// Evaluates a trained model on the test split under the given features,
/// re-deriving codes through the frozen quantizer.
inline MetricReport evaluate_with_features(const GraphModel& model, const SplitDataset& split, const Quantized& q,
                                           const FeatureTable& image, const FeatureTable& text,
                                           const std::vector<int>& ks, std::size_t threads = 1) {
  const ItemIndex index(split.catalog);
  const auto test = encode_points(split.test, index, model.cfg.m_max);
  const ItemCodes ic = item_codes(reassign(q.image, image), index);
  const ItemCodes tc = item_codes(reassign(q.text, text), index);
  auto r = evaluate(model, graph_examples(test, ic, tc, graph_options(model.cfg)), ks, 256, threads);
  r.config = model.cfg;
  r.seed = model.cfg.seed;
  return r;
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationRow {
  std::string variant;
  ModelConfig config;
  MetricReport report;
};

inline std::vector<std::pair<std::string, ModelConfig>> ablation_variants(const ModelConfig& base) {
  std::vector<std::pair<std::string, ModelConfig>> out;
  for (auto a : {Aggregator::HAN, Aggregator::Sync, Aggregator::NI_HOHE, Aggregator::NI_HEHO, Aggregator::HOHE,
                 Aggregator::HEHO, Aggregator::HO, Aggregator::HE}) {
    ModelConfig c = base;
    c.aggregator = a;
    out.emplace_back(aggregator_name(a), c);
  }
  ModelConfig no_pos = base, no_type = base;
  no_pos.aggregator = no_type.aggregator = Aggregator::HAN;
  no_pos.use_position = false;
  no_type.use_type = false;
  out.emplace_back("HAN w/o position", no_pos);
  out.emplace_back("HAN w/o type", no_type);
  return out;
}

inline std::vector<AblationRow> run_ablation(const Prepared& data, const Quantized& q, const ModelConfig& base,
                                             const std::vector<int>& ks, std::size_t threads = 1) {
  std::vector<AblationRow> rows;
  for (const auto& [name, cfg] : ablation_variants(base)) rows.push_back({name, cfg, run_graph(data, q, cfg, ks, threads).test});
  return rows;
}

// ---------------------------------------------------------------------------
// Missing-modality robustness

struct RobustnessPoint {
  PerturbationKind mode;
  double ratio = 0.0;
  MetricReport report;
};

inline std::vector<RobustnessPoint> run_robustness(const GraphModel& model, const Prepared& data, const Quantized& q,
                                                   const std::vector<double>& ratios, std::uint64_t seed,
                                                   const std::vector<int>& ks, std::size_t threads = 1) {
  std::vector<RobustnessPoint> out;
  const auto clean = evaluate_with_features(model, data.split, q, data.image, data.text, ks, threads);
  for (auto mode : {PerturbationKind::MissingImage, PerturbationKind::MissingText, PerturbationKind::MissingMix}) {
    out.push_back({mode, 0.0, clean});
    for (double ratio : ratios) {
      if (ratio == 0.0) continue;
      const auto p = perturb(data.split, data.image, data.text, {mode, ratio, seed, false});
      out.push_back({mode, ratio, evaluate_with_features(model, data.split, q, p.image, p.text, ks, threads)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Codebook size sweep

struct SweepCell {
  std::optional<std::size_t> c, k;  // empty for the per-item raw node baseline
  MetricReport report;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<std::string> skipped;
};

inline SweepResult run_ck_sweep(const Prepared& data, const ModelConfig& base, const QuantizerOptions& qbase,
                                const std::vector<std::size_t>& cs, const std::vector<std::size_t>& ks_codes,
                                const std::vector<int>& ks, std::size_t threads = 1) {
  SweepResult out;
  const auto train_items = training_items(data.split).size();
  for (std::size_t c : cs)
    for (std::size_t k : ks_codes) {
      if (k > c) {
        out.skipped.push_back("c=" + std::to_string(c) + " k=" + std::to_string(k) + ": k exceeds c");
        continue;
      }
      if (c > train_items) {
        out.skipped.push_back("c=" + std::to_string(c) + " k=" + std::to_string(k) + ": c exceeds training items");
        continue;
      }
      ModelConfig cfg = base;
      cfg.c = c;
      cfg.k = k;
      const auto q = quantize(data, quantizer_for(cfg, qbase));
      out.cells.push_back({c, k, run_graph(data, q, cfg, ks, threads).test});
    }
  QuantizerOptions raw = quantizer_for(base, qbase);
  raw.raw_nodes = true;
  ModelConfig cfg = base;
  cfg.k = 1;
  const auto q = quantize(data, raw);
  cfg.c = std::max(q.image.codebook.c(), q.text.codebook.c());
  auto report = run_graph(data, q, cfg, ks, threads).test;
  out.cells.push_back({std::nullopt, std::nullopt, report});
  return out;
}

// ---------------------------------------------------------------------------
// Fusion-order perturbation study

struct FusionStudyRow {
  FusionMode mode;
  std::string perturbation;  // "none", "disordered", "mismatched"
  MetricReport report;
};

struct FusionStudyOptions {
  double ratio = 1.0;
  std::uint64_t perturb_seed = 11;
  /// Perturb the training split as well as the test split.
  bool perturb_train = true;
  /// Mismatched: displace image and text independently.
  bool per_channel = false;
};

inline MetricReport run_fusion(const Prepared& train_data, const Prepared& test_data, FusionMode mode,
                               const ModelConfig& cfg, const std::vector<int>& ks, std::size_t threads = 1) {
  const Encoded enc = encode(train_data.split, cfg);
  FusionModel model(cfg, mode, enc.index.size(), feature_inputs(train_data.image, train_data.text, enc.index));
  train_model(model, seq_examples(enc.train), seq_examples(enc.val));
  model.features = feature_inputs(test_data.image, test_data.text, enc.index);
  const auto test = encode_points(test_data.split.test, enc.index, cfg.m_max);
  auto r = evaluate(model, seq_examples(test), ks, 256, threads);
  r.config = cfg;
  r.config["fusion"] = fusion_name(mode);
  r.seed = cfg.seed;
  return r;
}

inline std::vector<FusionStudyRow> run_fusion_study(const Prepared& data, const ModelConfig& cfg,
                                                    const FusionStudyOptions& opt, const std::vector<int>& ks,
                                                    std::size_t threads = 1) {
  std::vector<FusionStudyRow> out;
  std::vector<std::pair<std::string, Prepared>> variants{{"none", data}};
  for (auto kind : {PerturbationKind::Disordered, PerturbationKind::Mismatched}) {
    auto p = perturb(data.split, data.image, data.text, {kind, opt.ratio, opt.perturb_seed, opt.per_channel});
    Prepared pd{p.split, p.image, p.text};
    if (!opt.perturb_train) {
      // keep clean training points; only test prefixes change
      pd.split.train = data.split.train;
    }
    variants.emplace_back(perturbation_name(kind), std::move(pd));
  }
  for (auto mode : {FusionMode::Early, FusionMode::Late})
    for (const auto& [name, pd] : variants) {
      const Prepared& train_on = opt.perturb_train ? pd : data;
      out.push_back({mode, name, run_fusion(train_on, pd, mode, cfg, ks, threads)});
    }
  return out;
}

// ---------------------------------------------------------------------------
// Tables

inline std::string metrics_header(const std::vector<int>& ks) {
  std::string s;
  for (int k : ks) s += ",hr" + std::to_string(k) + ",mrr" + std::to_string(k);
  return s;
}

inline std::string metrics_cells(const MetricReport& r, const std::vector<int>& ks) {
  std::ostringstream s;
  s.precision(6);
  s << std::fixed;
  for (int k : ks) s << ',' << r.hr.at(k) << ',' << r.mrr.at(k);
  return s.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows, const std::vector<int>& ks) {
  std::string out = "variant" + metrics_header(ks) + "\n";
  for (const auto& r : rows) out += r.variant + metrics_cells(r.report, ks) + "\n";
  return out;
}

inline std::string robustness_csv(const std::vector<RobustnessPoint>& points) {
  std::ostringstream s;
  s << "ratio,mode,hr5,mrr5\n";
  s.precision(6);
  s << std::fixed;
  for (const auto& p : points)
    s << p.ratio << ',' << perturbation_name(p.mode) << ',' << p.report.hr.at(5) << ',' << p.report.mrr.at(5) << '\n';
  return s.str();
}

inline std::string sweep_csv(const SweepResult& r, const std::vector<int>& ks) {
  std::string out = "c,k" + metrics_header(ks) + "\n";
  for (const auto& cell : r.cells) {
    out += cell.c ? std::to_string(*cell.c) + "," + std::to_string(*cell.k) : std::string("raw,raw");
    out += metrics_cells(cell.report, ks) + "\n";
  }
  return out;
}

}  // namespace mmsr
