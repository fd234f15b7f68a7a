#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmsr/common.hpp"

namespace mmsr {

/// 1 + number of other items whose logit is >= the target's. Ties count
/// against the target.
inline std::size_t target_rank(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw InputError("target_rank: target outside the catalog");
  const double t = logits[target];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (j != target && logits[j] >= t) ++rank;
  return rank;
}

struct MetricReport {
  std::map<int, double> hr;
  std::map<int, double> mrr;
  std::size_t n_points = 0;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;

  /// Empty string when all invariants hold, otherwise the first violation.
  std::string check() const {
    double prev = 0.0;
    for (const auto& [k, h] : hr) {
      if (!mrr.count(k)) return "missing MRR@" + std::to_string(k);
      const double m = mrr.at(k);
      if (!(h >= 0.0 && h <= 1.0)) return "HR@" + std::to_string(k) + " outside [0,1]";
      if (!(m >= 0.0 && m <= h + 1e-12)) return "MRR@" + std::to_string(k) + " exceeds HR";
      if (h + 1e-12 < prev) return "HR decreases at K=" + std::to_string(k);
      prev = h;
    }
    return {};
  }
};

/// Accumulates ranks of scored test points.
class RankAccumulator {
 public:
  explicit RankAccumulator(std::vector<int> ks) : ks_(std::move(ks)) {
    for (int k : ks_)
      if (k <= 0) throw InputError("metric cutoff K must be positive");
  }

  void add_rank(std::size_t rank) { ranks_.push_back(rank); }
  void add(std::span<const double> logits, std::size_t target) { add_rank(target_rank(logits, target)); }

  MetricReport report() const {
    MetricReport r;
    r.n_points = ranks_.size();
    for (int k : ks_) {
      double hits = 0.0, rr = 0.0;
      for (std::size_t rank : ranks_)
        if (rank <= static_cast<std::size_t>(k)) {
          hits += 1.0;
          rr += 1.0 / static_cast<double>(rank);
        }
      const double n = ranks_.empty() ? 1.0 : static_cast<double>(ranks_.size());
      r.hr[k] = hits / n;
      r.mrr[k] = rr / n;
    }
    return r;
  }

  const std::vector<std::size_t>& ranks() const { return ranks_; }

 private:
  std::vector<int> ks_;
  std::vector<std::size_t> ranks_;
};

/// Metrics over rows of `logits` (one row per test point).
inline MetricReport rank_metrics(const Matrix& logits, const std::vector<std::size_t>& targets, std::vector<int> ks) {
  if (logits.rows != targets.size()) throw InputError("rank_metrics: one target per logit row required");
  RankAccumulator acc(std::move(ks));
  for (std::size_t i = 0; i < targets.size(); ++i) acc.add(logits.row(i), targets[i]);
  return acc.report();
}

inline nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json hr = nlohmann::json::object(), mrr = nlohmann::json::object();
  for (const auto& [k, v] : r.hr) hr[std::to_string(k)] = v;
  for (const auto& [k, v] : r.mrr) mrr[std::to_string(k)] = v;
  return {{"hr", hr}, {"mrr", mrr}, {"n_points", r.n_points}, {"seed", r.seed},
          {"config", r.config}, {"artifact_version", kArtifactVersion}};
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  try {
    for (const auto& [k, v] : j.at("hr").items()) r.hr[std::stoi(k)] = v.get<double>();
    for (const auto& [k, v] : j.at("mrr").items()) r.mrr[std::stoi(k)] = v.get<double>();
    r.n_points = j.at("n_points").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config = j.value("config", nlohmann::json::object());
  } catch (const std::exception& e) {
    throw InputError(std::string("bad metric report: ") + e.what());
  }
  return r;
}

}  // namespace mmsr
