#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmsr/autograd.hpp"
#include "mmsr/common.hpp"
#include "mmsr/dataset.hpp"

namespace mmsr {

/// Linear map D -> d' and back, rows are samples: z = x * encode, x' = z * decode.
struct LinearAutoencoder {
  Channel channel = Channel::Image;
  Matrix encode;  // D x d'
  Matrix decode;  // d' x D

  std::size_t input_dim() const { return encode.rows; }
  std::size_t code_dim() const { return encode.cols; }

  std::vector<double> apply_encode(std::span<const double> x) const {
    if (x.size() != input_dim()) throw InputError("autoencoder: input dimension mismatch");
    std::vector<double> z(code_dim(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < z.size(); ++j) z[j] += x[i] * encode(i, j);
    return z;
  }
};

struct AutoencoderOptions {
  std::size_t code_dim = 32;
  std::size_t epochs = 300;
  double lr = 0.01;
  std::uint64_t seed = 1;
  /// Start from encode = decode = I (requires code_dim == input dim).
  bool identity_init = false;
};

struct AutoencoderResult {
  LinearAutoencoder model;
  /// Mean squared reconstruction error before training and after each epoch.
  std::vector<double> loss_history;
  double best_loss = 0.0;
};

namespace detail {

inline Matrix stack_rows(const std::vector<std::vector<double>>& vectors) {
  if (vectors.empty()) throw InputError("empty vector set");
  Matrix m(vectors.size(), vectors.front().size());
  for (std::size_t r = 0; r < vectors.size(); ++r) {
    if (vectors[r].size() != m.cols) throw InputError("vectors differ in length");
    for (double x : vectors[r])
      if (!std::isfinite(x)) throw InputError("non-finite input vector");
    std::copy(vectors[r].begin(), vectors[r].end(), m.row(r).begin());
  }
  return m;
}

inline ad::Var reconstruction_loss(const ad::Var& x, const ad::Var& enc, const ad::Var& dec) {
  auto diff = ad::sub(ad::matmul(ad::matmul(x, enc), dec), x);
  return ad::affine(ad::sum_all(ad::hadamard(diff, diff)), 1.0 / static_cast<double>(x->value.size()));
}

}  // namespace detail

/// Full-batch Adam on mean squared reconstruction error. Returns the
/// parameters with the lowest loss seen, so the result never scores worse
/// than the initialization.
inline AutoencoderResult train_autoencoder(const std::vector<std::vector<double>>& vectors,
                                           const AutoencoderOptions& opt, Channel channel = Channel::Image) {
  if (vectors.size() < 2) throw InputError("autoencoder: need at least two vectors");
  const Matrix data = detail::stack_rows(vectors);
  const std::size_t in_dim = data.cols;
  if (opt.code_dim == 0 || opt.code_dim > in_dim) throw InputError("autoencoder: need 0 < code_dim <= input dim");
  Rng rng(opt.seed);
  Matrix enc0, dec0;
  if (opt.identity_init) {
    if (opt.code_dim != in_dim) throw InputError("autoencoder: identity init needs code_dim == input dim");
    enc0 = dec0 = Matrix::identity(in_dim);
  } else {
    enc0 = uniform_matrix(in_dim, opt.code_dim, 1.0 / std::sqrt(static_cast<double>(in_dim)), rng);
    dec0 = uniform_matrix(opt.code_dim, in_dim, 1.0 / std::sqrt(static_cast<double>(opt.code_dim)), rng);
  }
  auto x = ad::constant(data);
  auto enc = ad::parameter(enc0);
  auto dec = ad::parameter(dec0);

  AutoencoderResult result;
  result.model = {channel, enc0, dec0};
  std::vector<double> m_enc(enc0.size()), v_enc(enc0.size()), m_dec(dec0.size()), v_dec(dec0.size());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto adam = [&](ad::Node& p, std::vector<double>& m, std::vector<double>& v, std::size_t t) {
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      p.value.data[i] -= opt.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  };

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch <= opt.epochs; ++epoch) {
    enc->zero_grad();
    dec->zero_grad();
    auto loss = detail::reconstruction_loss(x, enc, dec);
    const double value = loss->value.data[0];
    result.loss_history.push_back(value);
    if (value < best) {
      best = value;
      result.model.encode = enc->value;
      result.model.decode = dec->value;
    }
    if (epoch == opt.epochs) break;
    ad::backward(loss);
    adam(*enc, m_enc, v_enc, epoch + 1);
    adam(*dec, m_dec, v_dec, epoch + 1);
  }
  result.best_loss = best;
  return result;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
  Matrix centers;
  std::vector<std::size_t> labels;
  /// Within-cluster SSE after each assignment step.
  std::vector<double> sse_history;
  std::size_t iterations = 0;
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline std::size_t count_distinct(const Matrix& pts) {
  std::set<std::vector<double>> seen;
  for (std::size_t r = 0; r < pts.rows; ++r) seen.emplace(pts.row(r).begin(), pts.row(r).end());
  return seen.size();
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. A cluster that empties during an
/// update is re-seeded with the point farthest from its assigned center.
inline KMeansResult kmeans(const Matrix& points, std::size_t c, std::size_t max_iter, std::uint64_t seed) {
  const std::size_t n = points.rows, d = points.cols;
  if (c == 0) throw InputError("kmeans: c must be positive");
  if (c > detail::count_distinct(points)) throw InputError("kmeans: c exceeds the number of distinct vectors");
  Rng rng(seed);
  KMeansResult res;
  res.centers = Matrix(c, d);

  std::vector<double> best_d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = uniform_index(rng, n);
  std::copy(points.row(first).begin(), points.row(first).end(), res.centers.row(0).begin());
  for (std::size_t k = 1; k < c; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best_d2[i] = std::min(best_d2[i], detail::sq_dist(points.row(i), res.centers.row(k - 1)));
      total += best_d2[i];
    }
    double r = uniform01(rng) * total;
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (best_d2[i] <= 0.0) continue;
      pick = i;
      if ((r -= best_d2[i]) < 0.0) break;
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), res.centers.row(k).begin());
  }

  res.labels.assign(n, c);
  std::vector<double> dist(n);
  for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iter, 1); ++iter) {
    bool changed = false;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) {
        const double dd = detail::sq_dist(points.row(i), res.centers.row(k));
        if (dd < bd) bd = dd, arg = k;
      }
      changed = changed || res.labels[i] != arg;
      res.labels[i] = arg;
      dist[i] = bd;
      sse += bd;
    }
    res.sse_history.push_back(sse);
    res.iterations = iter + 1;
    if (!changed) break;

    std::vector<std::size_t> counts(c, 0);
    for (std::size_t l : res.labels) ++counts[l];
    for (std::size_t k = 0; k < c; ++k) {
      if (counts[k] != 0) continue;
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (counts[res.labels[i]] > 1 && (counts[res.labels[far]] <= 1 || dist[i] > dist[far])) far = i;
      --counts[res.labels[far]];
      res.labels[far] = k;
      counts[k] = 1;
      dist[far] = 0.0;
    }
    std::fill(res.centers.data.begin(), res.centers.data.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = res.centers.row(res.labels[i]);
      for (std::size_t j = 0; j < d; ++j) row[j] += points(i, j);
    }
    for (std::size_t k = 0; k < c; ++k)
      for (double& x : res.centers.row(k)) x /= static_cast<double>(counts[k]);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Codes

/// The k centers most cosine-similar to `v`, best first, ties to lower index.
/// A zero vector has similarity -1 to every center.
inline std::vector<std::size_t> top_k_codes(std::span<const double> v, const Matrix& centers, std::size_t k) {
  if (k == 0 || k > centers.rows) throw InputError("assign_codes: need 1 <= k <= c");
  std::vector<std::pair<double, std::size_t>> sims(centers.rows);
  for (std::size_t c = 0; c < centers.rows; ++c) sims[c] = {cosine(v, centers.row(c)), c};
  std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = sims[i].second;
  return out;
}

using CodeAssignments = std::map<std::string, std::vector<std::size_t>>;

inline CodeAssignments assign_codes(const std::map<std::string, std::vector<double>>& encoded, const Matrix& centers,
                                    std::size_t k) {
  CodeAssignments out;
  bool warned = false;
  for (const auto& [item, v] : encoded) {
    if (!warned && squared_norm(v) == 0.0) {
      std::cerr << "warning: zero modality vector for '" << item << "'; cosine treated as -1\n";
      warned = true;
    }
    out[item] = top_k_codes(v, centers, k);
  }
  return out;
}

struct ModalityCodebook {
  Channel channel = Channel::Image;
  Matrix centers;  // c x d'
  CodeAssignments assignments;
  std::size_t k = 1;

  std::size_t c() const { return centers.rows; }

  void validate() const {
    if (k < 1 || k > c()) throw InputError("codebook: need 1 <= k <= c");
    for (const auto& [item, codes] : assignments) {
      if (codes.size() != k) throw InputError("codebook: assignment of '" + item + "' has wrong size");
      std::set<std::size_t> s(codes.begin(), codes.end());
      if (s.size() != k || *s.rbegin() >= c()) throw InputError("codebook: bad code list for '" + item + "'");
    }
    if (!centers.all_finite()) throw InputError("codebook: non-finite centers");
  }
};

struct QuantizerOptions {
  std::size_t code_dim = 32;
  std::size_t clusters = 20;
  std::size_t codes_per_item = 1;
  std::size_t ae_epochs = 300;
  double ae_lr = 0.01;
  std::size_t kmeans_iter = 100;
  std::uint64_t seed = 1;
  /// Baseline without shared codes: one node per item modality, initialized
  /// from the item's own encoded vector.
  bool raw_nodes = false;
};

struct ChannelQuantizer {
  LinearAutoencoder autoencoder;
  ModalityCodebook codebook;
  std::vector<double> ae_loss_history;
};

inline std::map<std::string, std::vector<double>> encode_all(const LinearAutoencoder& ae, const FeatureTable& table) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [item, v] : table.entries) out[item] = ae.apply_encode(v);
  return out;
}

/// Fits the autoencoder and k-means on the vectors of `fit_items` only, then
/// assigns codes to every item present in the table through the frozen maps.
inline ChannelQuantizer build_quantizer(const FeatureTable& table, const std::set<std::string>& fit_items,
                                        const QuantizerOptions& opt) {
  table.validate();
  std::vector<std::vector<double>> fit;
  for (const auto& item : fit_items) {
    auto it = table.entries.find(item);
    if (it != table.entries.end()) fit.push_back(it->second);
  }
  if (fit.size() < 2) throw InputError(std::string("quantizer: too few ") + channel_name(table.channel) + " vectors");
  const std::uint64_t channel_seed = opt.seed * 2 + static_cast<std::uint64_t>(table.channel);
  AutoencoderOptions ae_opt{opt.code_dim, opt.ae_epochs, opt.ae_lr, channel_seed, false};
  auto ae = train_autoencoder(fit, ae_opt, table.channel);
  ChannelQuantizer q;
  q.autoencoder = ae.model;
  q.ae_loss_history = std::move(ae.loss_history);
  const auto encoded = encode_all(q.autoencoder, table);
  q.codebook.channel = table.channel;
  if (opt.raw_nodes) {
    q.codebook.k = 1;
    q.codebook.centers = Matrix(encoded.size(), opt.code_dim);
    std::size_t idx = 0;
    for (const auto& [item, z] : encoded) {
      std::copy(z.begin(), z.end(), q.codebook.centers.row(idx).begin());
      q.codebook.assignments[item] = {idx++};
    }
    return q;
  }
  Matrix fit_encoded(fit.size(), opt.code_dim);
  std::size_t r = 0;
  for (const auto& item : fit_items)
    if (auto it = encoded.find(item); it != encoded.end()) std::copy(it->second.begin(), it->second.end(), fit_encoded.row(r++).begin());
  auto km = kmeans(fit_encoded, opt.clusters, opt.kmeans_iter, channel_seed);
  q.codebook.centers = std::move(km.centers);
  q.codebook.k = opt.codes_per_item;
  q.codebook.assignments = assign_codes(encoded, q.codebook.centers, opt.codes_per_item);
  q.codebook.validate();
  return q;
}

/// Re-derives assignments for a (possibly perturbed) feature table through a
/// frozen quantizer. Items without an entry get no codes.
inline CodeAssignments reassign(const ChannelQuantizer& q, const FeatureTable& table) {
  CodeAssignments out;
  for (const auto& [item, v] : table.entries)
    out[item] = top_k_codes(q.autoencoder.apply_encode(v), q.codebook.centers, q.codebook.k);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline json codebook_to_json(const ModalityCodebook& cb) {
  json centers = json::array();
  for (std::size_t r = 0; r < cb.centers.rows; ++r)
    centers.push_back(std::vector<double>(cb.centers.row(r).begin(), cb.centers.row(r).end()));
  return json{{"channel", channel_name(cb.channel)}, {"c", cb.c()},
              {"k", cb.k},  {"centers", centers},
              {"assignments", cb.assignments}};
}

inline ModalityCodebook codebook_from_json(const json& j) {
  ModalityCodebook cb;
  try {
    cb.channel = j.at("channel").get<std::string>() == "image" ? Channel::Image : Channel::Text;
    cb.centers = Matrix::from_rows(j.at("centers").get<std::vector<std::vector<double>>>());
    cb.k = j.at("k").get<std::size_t>();
    cb.assignments = j.at("assignments").get<CodeAssignments>();
  } catch (const json::exception& e) {
    throw InputError(std::string("bad codebook JSON: ") + e.what());
  }
  cb.validate();
  return cb;
}

inline void save_matrix_records(const std::filesystem::path& path, const Matrix& m) {
  std::vector<std::pair<std::uint32_t, std::span<const double>>> rows;
  std::vector<std::string> ids;
  for (std::size_t r = 0; r < m.rows; ++r) {
    rows.emplace_back(static_cast<std::uint32_t>(r), m.row(r));
    ids.push_back(std::to_string(r));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  write_feature_records(out, m.cols, rows);
  std::ofstream(sidecar_path(path)) << json(ids).dump() << '\n';
}

inline Matrix load_matrix_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  auto rec = read_feature_records(in);
  Matrix m(rec.rows.size(), rec.dim);
  for (auto& [idx, v] : rec.rows) {
    if (idx >= m.rows) throw InputError("matrix record index out of range");
    std::copy(v.begin(), v.end(), m.row(idx).begin());
  }
  return m;
}

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows; ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return {{"rows", m.rows}, {"cols", m.cols}, {"data", rows}};
}

inline Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  const auto rows = j.at("data").get<std::vector<std::vector<double>>>();
  if (rows.size() != m.rows) throw InputError("matrix JSON: row count mismatch");
  for (std::size_t r = 0; r < m.rows; ++r) {
    if (rows[r].size() != m.cols) throw InputError("matrix JSON: column count mismatch");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

inline json quantizer_to_json(const ChannelQuantizer& q) {
  return {{"encode", matrix_to_json(q.autoencoder.encode)},
          {"decode", matrix_to_json(q.autoencoder.decode)},
          {"codebook", codebook_to_json(q.codebook)},
          {"ae_loss_history", q.ae_loss_history}};
}

inline ChannelQuantizer quantizer_from_json(const json& j) {
  ChannelQuantizer q;
  try {
    q.codebook = codebook_from_json(j.at("codebook"));
    q.autoencoder = {q.codebook.channel, matrix_from_json(j.at("encode")), matrix_from_json(j.at("decode"))};
    q.ae_loss_history = j.value("ae_loss_history", std::vector<double>{});
  } catch (const json::exception& e) {
    throw InputError(std::string("bad quantizer JSON: ") + e.what());
  }
  if (q.autoencoder.code_dim() != q.codebook.centers.cols) throw InputError("quantizer: code width differs from centers");
  return q;
}

}  // namespace mmsr
