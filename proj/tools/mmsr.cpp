// Command-line pipeline: prepare -> quantize -> train -> eval, plus the
// ablate / robust / sweep experiment recipes. All artifacts live in --out.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmsr/config.hpp"
#include "mmsr/dataset.hpp"
#include "mmsr/evaluation.hpp"
#include "mmsr/metrics.hpp"
#include "mmsr/quantizer.hpp"
#include "mmsr/representation.hpp"
#include "mmsr/training.hpp"

namespace fs = std::filesystem;
using namespace mmsr;

namespace {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out = "run";
  std::vector<int> ks;
  std::string synth;
};

struct Context {
  RunConfig cfg;
  fs::path out;
  std::string synth;
  std::size_t threads = 1;

  json envelope() const {
    return {{"config", config_to_json(cfg)}, {"seed", cfg.model.seed}, {"artifact_version", kArtifactVersion}};
  }

  fs::path file(const char* name) const { return out / name; }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path.string());
  f << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void require(const fs::path& path, const char* stage) {
  if (!fs::exists(path)) throw InputError(path.string() + " not found; run " + stage + " first");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

Prepared load_prepared(const Context& ctx) {
  require(ctx.file("split.json"), "prepare");
  Prepared p;
  try {
    p.split = read_json_file(ctx.file("split.json")).at("split").get<SplitDataset>();
  } catch (const json::exception& e) {
    throw InputError(std::string("bad split.json: ") + e.what());
  }
  p.image = load_features(ctx.file("image.feat"), Channel::Image);
  p.text = load_features(ctx.file("text.feat"), Channel::Text);
  return p;
}

Quantized load_quantized(const Context& ctx) {
  require(ctx.file("quantizer.json"), "quantize");
  const json j = read_json_file(ctx.file("quantizer.json"));
  return {quantizer_from_json(j.at("image")), quantizer_from_json(j.at("text"))};
}

void check_quantizer(const Quantized& q, const RunConfig& c) {
  const auto& cb = q.image.codebook;
  const bool ok = q.image.autoencoder.code_dim() == c.model.d &&
                  (c.quantizer.raw_nodes || (cb.c() == c.model.c && cb.k == c.model.k));
  if (!ok) throw InputError("quantizer.json does not match the model settings (d, c, k); run quantize again");
}

/// Model config the checkpoint was trained with.
ModelConfig trained_config(const Context& ctx) {
  require(ctx.file("train.json"), "train");
  require(ctx.file("model.ckpt"), "train");
  ModelConfig m;
  from_json(read_json_file(ctx.file("train.json")).at("config").at("model"), m);
  return m;
}

GraphModel load_model(const Context& ctx, const Prepared& data, const Quantized& q) {
  const ModelConfig m = trained_config(ctx);
  GraphModel model(m, data.split.catalog.size(), q.image.codebook.centers, q.text.codebook.centers);
  restore(model.parameters(), load_checkpoint(ctx.file("model.ckpt")));
  return model;
}

// ---------------------------------------------------------------------------

int cmd_prepare(Context& ctx) {
  std::vector<InteractionRecord> records;
  FeatureTable image, text;
  fs::create_directories(ctx.out);
  if (!ctx.synth.empty()) ctx.cfg.synth = synth_from_json(read_json_file(ctx.synth));
  if (ctx.cfg.synth) {
    auto syn = synthesize(*ctx.cfg.synth);
    records = std::move(syn.records);
    image = std::move(syn.image);
    text = std::move(syn.text);
  } else {
    const auto& c = ctx.cfg;
    if (c.interactions.empty() || c.image_features.empty() || c.text_features.empty())
      throw InputError("no input data: set data.interactions, data.image_features and data.text_features or pass --synth");
    records = load_interactions(c.interactions);
    image = load_features(c.image_features, Channel::Image);
    text = load_features(c.text_features, Channel::Text);
  }
  save_interactions(ctx.file("interactions.jsonl"), records);
  // features go through the on-disk f32 form so every later stage sees the same values
  save_features(ctx.file("image.feat"), image);
  save_features(ctx.file("text.feat"), text);
  image = load_features(ctx.file("image.feat"), Channel::Image);
  text = load_features(ctx.file("text.feat"), Channel::Text);

  Prepared p = prepare(records, std::move(image), std::move(text), ctx.cfg.prepare);
  if (ctx.cfg.perturbation) {
    auto pd = perturb(p.split, p.image, p.text, *ctx.cfg.perturbation);
    p = {std::move(pd.split), std::move(pd.image), std::move(pd.text)};
    save_features(ctx.file("image.feat"), p.image);
    save_features(ctx.file("text.feat"), p.text);
  }
  json split = ctx.envelope();
  split["split"] = p.split;
  write_json(ctx.file("split.json"), split);
  std::set<std::string> users;
  for (const auto& pt : p.split.test) users.insert(pt.user);
  json manifest = ctx.envelope();
  manifest["files"] = {"interactions.jsonl", "image.feat", "image.ids.json", "text.feat", "text.ids.json", "split.json"};
  manifest["counts"] = {{"records", records.size()}, {"users", users.size()}, {"items", p.split.catalog.size()},
                        {"train_points", p.split.train.size()}, {"test_points", p.split.test.size()}};
  write_json(ctx.file("manifest.json"), manifest);
  std::cout << "prepare: " << users.size() << " users, " << p.split.catalog.size() << " items, " << p.split.train.size()
            << " train / " << p.split.test.size() << " test points -> " << ctx.out.string() << "\n";
  return 0;
}

int cmd_quantize(Context& ctx) {
  const Prepared data = load_prepared(ctx);
  const auto q = quantize(data, quantizer_for(ctx.cfg.model, ctx.cfg.quantizer));
  json j = ctx.envelope();
  j["image"] = quantizer_to_json(q.image);
  j["text"] = quantizer_to_json(q.text);
  write_json(ctx.file("quantizer.json"), j);
  std::cout << "quantize: c=" << q.image.codebook.c() << " k=" << q.image.codebook.k
            << ", reconstruction mse image " << fmt(q.image.ae_loss_history.empty() ? 0.0 : *std::min_element(q.image.ae_loss_history.begin(), q.image.ae_loss_history.end()))
            << " text " << fmt(q.text.ae_loss_history.empty() ? 0.0 : *std::min_element(q.text.ae_loss_history.begin(), q.text.ae_loss_history.end()))
            << "\n";
  return 0;
}

int cmd_train(Context& ctx) {
  const Prepared data = load_prepared(ctx);
  const Quantized q = load_quantized(ctx);
  const ModelConfig& cfg = ctx.cfg.model;
  check_quantizer(q, ctx.cfg);
  const Encoded enc = encode(data.split, cfg);
  const ItemCodes ic = item_codes(q.image.codebook.assignments, enc.index);
  const ItemCodes tc = item_codes(q.text.codebook.assignments, enc.index);
  GraphModel model(cfg, enc.index.size(), q.image.codebook.centers, q.text.codebook.centers);
  std::ofstream log(ctx.file("train_log.jsonl"));
  if (!log) throw InputError("cannot write train_log.jsonl");
  const auto gopt = graph_options(cfg);
  const auto result = train_model(model, graph_examples(enc.train, ic, tc, gopt), graph_examples(enc.val, ic, tc, gopt), &log);
  save_checkpoint(ctx.file("model.ckpt"), snapshot(model.parameters()));
  json history = json::array();
  for (const auto& e : result.history)
    history.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_hr5", e.val_hr5}, {"val_mrr5", e.val_mrr5}});
  json j = ctx.envelope();
  j["best_epoch"] = result.best_epoch;
  j["history"] = history;
  write_json(ctx.file("train.json"), j);
  const auto& best = result.history.at(result.best_epoch - 1);
  std::cout << "train: best epoch " << result.best_epoch << "/" << cfg.epochs << ", val HR@5 " << fmt(best.val_hr5)
            << ", train loss " << fmt(best.train_loss) << "\n";
  return 0;
}

int cmd_eval(Context& ctx) {
  const Prepared data = load_prepared(ctx);
  const Quantized q = load_quantized(ctx);
  const GraphModel model = load_model(ctx, data, q);
  auto r = evaluate_with_features(model, data.split, q, data.image, data.text, ctx.cfg.ks, ctx.threads);
  r.config = config_to_json(ctx.cfg);
  r.config["model"] = model.cfg;
  if (auto bad = r.check(); !bad.empty()) throw RuntimeFailure("metric report violates invariants: " + bad);
  write_json(ctx.file("metrics.json"), report_to_json(r));
  std::cout << "eval:";
  for (int k : ctx.cfg.ks) std::cout << " HR@" << k << " " << fmt(r.hr.at(k)) << " MRR@" << k << " " << fmt(r.mrr.at(k));
  std::cout << " (" << r.n_points << " points)\n";
  return 0;
}

int cmd_ablate(Context& ctx) {
  const Prepared data = load_prepared(ctx);
  const Quantized q = load_quantized(ctx);
  check_quantizer(q, ctx.cfg);
  const auto rows = run_ablation(data, q, ctx.cfg.model, ctx.cfg.ks, ctx.threads);
  write_text(ctx.file("ablation.csv"), ablation_csv(rows, ctx.cfg.ks));
  json j = ctx.envelope();
  j["rows"] = json::array();
  for (const auto& r : rows) j["rows"].push_back({{"variant", r.variant}, {"model", r.config}, {"report", report_to_json(r.report)}});
  write_json(ctx.file("ablation.json"), j);
  const int k0 = ctx.cfg.ks.front();
  const auto best = std::max_element(rows.begin(), rows.end(), [&](const auto& a, const auto& b) { return a.report.hr.at(k0) < b.report.hr.at(k0); });
  std::cout << "ablate: " << rows.size() << " variants, best " << best->variant << " HR@" << k0 << " " << fmt(best->report.hr.at(k0)) << "\n";
  return 0;
}

int cmd_robust(Context& ctx) {
  const Prepared data = load_prepared(ctx);
  const Quantized q = load_quantized(ctx);
  const GraphModel model = load_model(ctx, data, q);
  auto ks = ctx.cfg.ks;
  if (std::find(ks.begin(), ks.end(), 5) == ks.end()) ks.insert(ks.begin(), 5);
  const auto points = run_robustness(model, data, q, ctx.cfg.ratios, ctx.cfg.robustness_seed, ks, ctx.threads);
  write_text(ctx.file("robustness.csv"), robustness_csv(points));
  json j = ctx.envelope();
  j["model"] = model.cfg;
  j["points"] = json::array();
  for (const auto& p : points)
    j["points"].push_back({{"mode", perturbation_name(p.mode)}, {"ratio", p.ratio}, {"report", report_to_json(p.report)}});
  write_json(ctx.file("robustness.json"), j);
  double first = 0.0, last = 0.0, last_ratio = 0.0;
  for (const auto& p : points)
    if (p.mode == PerturbationKind::MissingMix) {
      if (p.ratio == 0.0) first = p.report.hr.at(5);
      last = p.report.hr.at(5);
      last_ratio = p.ratio;
    }
  std::cout << "robust: missing_mix HR@5 " << fmt(first) << " at ratio 0 -> " << fmt(last) << " at ratio " << last_ratio << "\n";
  return 0;
}

int cmd_sweep(Context& ctx) {
  const Prepared data = load_prepared(ctx);
  const auto result = run_ck_sweep(data, ctx.cfg.model, ctx.cfg.quantizer, ctx.cfg.sweep_cs, ctx.cfg.sweep_ks, ctx.cfg.ks, ctx.threads);
  for (const auto& s : result.skipped) std::cerr << "sweep: skipped " << s << "\n";
  write_text(ctx.file("sweep.csv"), sweep_csv(result, ctx.cfg.ks));
  json j = ctx.envelope();
  j["cells"] = json::array();
  for (const auto& c : result.cells) {
    json cell = {{"report", report_to_json(c.report)}};
    cell["c"] = c.c ? json(*c.c) : json("raw");
    cell["k"] = c.k ? json(*c.k) : json("raw");
    j["cells"].push_back(cell);
  }
  j["skipped"] = result.skipped;
  write_json(ctx.file("sweep.json"), j);
  const int k0 = ctx.cfg.ks.front();
  const SweepCell* best = nullptr;
  for (const auto& c : result.cells)
    if (c.c && (!best || c.report.hr.at(k0) > best->report.hr.at(k0))) best = &c;
  std::cout << "sweep: " << result.cells.size() << " cells";
  if (best) std::cout << ", best c=" << *best->c << " k=" << *best->k << " HR@" << k0 << " " << fmt(best->report.hr.at(k0));
  std::cout << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal sequential recommendation with modality-enriched sequence graphs"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Args args;
  app.add_option("--config", args.config, "JSON run configuration");
  app.add_option("--seed", args.seed, "Model and quantizer seed");
  app.add_option("--threads", args.threads, "Evaluation worker threads");
  app.add_option("--out", args.out, "Artifact directory");
  app.add_option("--k", args.ks, "Metric cutoff, repeatable");
  app.add_option("--synth", args.synth, "Synthetic data spec (prepare)");

  using Handler = int (*)(Context&);
  const std::vector<std::pair<std::string, std::pair<std::string, Handler>>> commands{
      {"prepare", {"Load or synthesize data, filter and split", cmd_prepare}},
      {"quantize", {"Fit autoencoders and codebooks", cmd_quantize}},
      {"train", {"Train the graph model", cmd_train}},
      {"eval", {"Evaluate the trained model on the test split", cmd_eval}},
      {"ablate", {"Train and evaluate the ablation variants", cmd_ablate}},
      {"robust", {"Missing-modality sweep on the trained model", cmd_robust}},
      {"sweep", {"Codebook size sweep over c and k", cmd_sweep}}};
  for (const auto& [name, desc] : commands) app.add_subcommand(name, desc.first);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    Context ctx;
    if (!args.config.empty()) ctx.cfg = load_config(args.config);
    if (args.seed) ctx.cfg.model.seed = ctx.cfg.quantizer.seed = *args.seed;
    if (args.threads) ctx.cfg.threads = *args.threads;
    if (!args.ks.empty()) ctx.cfg.ks = args.ks;
    ctx.cfg.validate();
    ctx.out = args.out;
    ctx.synth = args.synth;
    ctx.threads = ctx.cfg.effective_threads();
    for (const auto& [name, desc] : commands)
      if (app.got_subcommand(name)) {
        if (name != "prepare" && !fs::exists(ctx.out)) throw InputError(ctx.out.string() + " not found; run prepare first");
        return desc.second(ctx);
      }
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const RuntimeFailure& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
