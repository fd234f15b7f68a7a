#pragma once

// Run configuration for the command-line pipeline. Every section is
// optional; unknown keys anywhere are rejected.

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmsr/dataset.hpp"
#include "mmsr/evaluation.hpp"
#include "mmsr/quantizer.hpp"
#include "mmsr/training.hpp"

namespace mmsr {

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw InputError(where + " must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw InputError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InputError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline json synth_to_json(const SynthSpec& s) {
  return {{"users", s.users},       {"items", s.items},
          {"clusters", s.clusters}, {"text_clusters", s.text_clusters},
          {"min_len", s.min_len},   {"max_len", s.max_len},
          {"dim", s.dim},           {"noise", s.noise},
          {"feature_noise", s.feature_noise},
          {"pattern", s.pattern == SynthPattern::Rule ? "rule" : "dual"},
          {"seed", s.seed}};
}

inline SynthSpec synth_from_json(const json& j) {
  const std::string w = "synth";
  detail::check_keys(j, {"users", "items", "clusters", "text_clusters", "min_len", "max_len", "dim", "noise",
                         "feature_noise", "pattern", "seed"}, w);
  SynthSpec s;
  detail::read_key(j, "users", s.users, w);
  detail::read_key(j, "items", s.items, w);
  detail::read_key(j, "clusters", s.clusters, w);
  detail::read_key(j, "text_clusters", s.text_clusters, w);
  detail::read_key(j, "min_len", s.min_len, w);
  detail::read_key(j, "max_len", s.max_len, w);
  detail::read_key(j, "dim", s.dim, w);
  detail::read_key(j, "noise", s.noise, w);
  detail::read_key(j, "feature_noise", s.feature_noise, w);
  detail::read_key(j, "seed", s.seed, w);
  std::string pattern = "rule";
  detail::read_key(j, "pattern", pattern, w);
  if (pattern == "rule") s.pattern = SynthPattern::Rule;
  else if (pattern == "dual") s.pattern = SynthPattern::Dual;
  else throw InputError("synth.pattern must be 'rule' or 'dual'");
  s.validate();
  return s;
}

struct RunConfig {
  // data
  std::string interactions;
  std::string image_features;
  std::string text_features;
  std::optional<SynthSpec> synth;
  PrepareOptions prepare;
  std::optional<PerturbationConfig> perturbation;  // applied by prepare
  // quantizer (width, c and k come from the model section)
  QuantizerOptions quantizer;
  ModelConfig model;
  // evaluation
  std::vector<int> ks{5, 20};
  std::vector<double> ratios{0.1, 0.3, 0.5, 0.7};
  std::uint64_t robustness_seed = 3;
  std::vector<std::size_t> sweep_cs{10, 20, 30, 40};
  std::vector<std::size_t> sweep_ks{1, 2, 3};
  std::size_t threads = 0;  // 0 means hardware concurrency

  std::size_t effective_threads() const {
    if (threads) return threads;
    const auto hc = std::thread::hardware_concurrency();
    return hc ? hc : 1;
  }

  void validate() const {
    model.validate();
    if (ks.empty()) throw InputError("ks must not be empty");
    for (int k : ks)
      if (k <= 0) throw InputError("ks must be positive");
    for (double r : ratios)
      if (!(r >= 0.0 && r <= 1.0)) throw InputError("robustness ratios must lie in [0, 1]");
    if (perturbation) perturbation->validate();
  }
};

/// The resolved configuration as echoed into artifacts. The thread count is
/// left out since it does not affect results.
inline json config_to_json(const RunConfig& c) {
  json data = {{"interactions", c.interactions}, {"image_features", c.image_features}, {"text_features", c.text_features}};
  json j = {{"data", data},
            {"prepare", {{"min_count", c.prepare.min_count}, {"test_frac", c.prepare.test_frac}, {"min_len", c.prepare.min_len}}},
            {"quantizer", {{"ae_epochs", c.quantizer.ae_epochs}, {"ae_lr", c.quantizer.ae_lr},
                           {"kmeans_iter", c.quantizer.kmeans_iter}, {"seed", c.quantizer.seed},
                           {"raw_nodes", c.quantizer.raw_nodes}}},
            {"model", c.model},
            {"evaluation", {{"ks", c.ks}, {"ratios", c.ratios}, {"robustness_seed", c.robustness_seed},
                            {"sweep_cs", c.sweep_cs}, {"sweep_ks", c.sweep_ks}}}};
  if (c.synth) j["synth"] = synth_to_json(*c.synth);
  if (c.perturbation)
    j["perturbation"] = {{"kind", perturbation_name(c.perturbation->kind)}, {"ratio", c.perturbation->ratio},
                         {"seed", c.perturbation->seed}, {"per_channel", c.perturbation->per_channel}};
  return j;
}

inline RunConfig config_from_json(const json& j) {
  detail::check_keys(j, {"data", "synth", "prepare", "perturbation", "quantizer", "model", "evaluation", "threads"}, "config");
  RunConfig c;
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::check_keys(d, {"interactions", "image_features", "text_features"}, "data");
    detail::read_key(d, "interactions", c.interactions, "data");
    detail::read_key(d, "image_features", c.image_features, "data");
    detail::read_key(d, "text_features", c.text_features, "data");
  }
  if (j.contains("synth")) c.synth = synth_from_json(j["synth"]);
  if (j.contains("prepare")) {
    const auto& p = j["prepare"];
    detail::check_keys(p, {"min_count", "test_frac", "min_len"}, "prepare");
    detail::read_key(p, "min_count", c.prepare.min_count, "prepare");
    detail::read_key(p, "test_frac", c.prepare.test_frac, "prepare");
    detail::read_key(p, "min_len", c.prepare.min_len, "prepare");
  }
  if (j.contains("perturbation")) {
    const auto& p = j["perturbation"];
    detail::check_keys(p, {"kind", "ratio", "seed", "per_channel"}, "perturbation");
    PerturbationConfig pc;
    std::string kind = perturbation_name(pc.kind);
    detail::read_key(p, "kind", kind, "perturbation");
    pc.kind = parse_perturbation(kind);
    detail::read_key(p, "ratio", pc.ratio, "perturbation");
    detail::read_key(p, "seed", pc.seed, "perturbation");
    detail::read_key(p, "per_channel", pc.per_channel, "perturbation");
    c.perturbation = pc;
  }
  if (j.contains("quantizer")) {
    const auto& q = j["quantizer"];
    detail::check_keys(q, {"ae_epochs", "ae_lr", "kmeans_iter", "seed", "raw_nodes"}, "quantizer");
    detail::read_key(q, "ae_epochs", c.quantizer.ae_epochs, "quantizer");
    detail::read_key(q, "ae_lr", c.quantizer.ae_lr, "quantizer");
    detail::read_key(q, "kmeans_iter", c.quantizer.kmeans_iter, "quantizer");
    detail::read_key(q, "seed", c.quantizer.seed, "quantizer");
    detail::read_key(q, "raw_nodes", c.quantizer.raw_nodes, "quantizer");
  }
  if (j.contains("model")) from_json(j["model"], c.model);
  if (j.contains("evaluation")) {
    const auto& e = j["evaluation"];
    detail::check_keys(e, {"ks", "ratios", "robustness_seed", "sweep_cs", "sweep_ks"}, "evaluation");
    detail::read_key(e, "ks", c.ks, "evaluation");
    detail::read_key(e, "ratios", c.ratios, "evaluation");
    detail::read_key(e, "robustness_seed", c.robustness_seed, "evaluation");
    detail::read_key(e, "sweep_cs", c.sweep_cs, "evaluation");
    detail::read_key(e, "sweep_ks", c.sweep_ks, "evaluation");
  }
  detail::read_key(j, "threads", c.threads, "config");
  c.validate();
  return c;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

inline RunConfig load_config(const std::filesystem::path& path) { return config_from_json(read_json_file(path)); }

}  // namespace mmsr
