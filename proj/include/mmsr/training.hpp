#pragma once

// Models, optimizer and the mini-batch training loop.
//
// Two model families share the loop: GraphModel (embedding tables, graph
// propagation, last pooling) and FusionModel, the recurrent early/late
// fusion base model. Both expose
//   parameters()  every tensor, for checkpoints
//   trainable()   tensors the optimizer updates
//   forward()     B x |V| logits for a batch of examples

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmsr/autograd.hpp"
#include "mmsr/common.hpp"
#include "mmsr/dataset.hpp"
#include "mmsr/metrics.hpp"
#include "mmsr/msgraph.hpp"
#include "mmsr/propagation.hpp"
#include "mmsr/quantizer.hpp"
#include "mmsr/representation.hpp"

namespace mmsr {

using NamedVars = std::vector<std::pair<std::string, ad::Var>>;

struct ModelConfig {
  std::size_t d = 32;
  std::size_t layers = 2;
  Aggregator aggregator = Aggregator::HAN;
  double lr = 0.01;
  double l2 = 1e-6;
  double dropout = 0.0;
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  std::size_t c = 20;
  std::size_t k = 1;
  std::size_t m_max = 50;
  bool use_type = true;
  bool use_position = true;
  bool score_scaling = false;
  bool freeze_codes = false;
  bool image_text_edges = true;
  double clip_norm = 5.0;
  std::size_t gate_hidden = 0;  // 0 means d
  /// Hold out each user's last training point for best-epoch selection.
  bool validation = true;

  void validate() const {
    if (d == 0 || layers == 0) throw InputError("model: d and layers must be positive");
    if (!(lr >= 0.0) || !(l2 >= 0.0)) throw InputError("model: lr and l2 must be non-negative");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("model: dropout must lie in [0, 1)");
    if (batch_size == 0) throw InputError("model: batch_size must be positive");
    if (c == 0 || k == 0 || k > c) throw InputError("model: need 1 <= k <= c");
    if (m_max == 0) throw InputError("model: m_max must be positive");
    if (!(clip_norm > 0.0)) throw InputError("model: clip_norm must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d", c.d},
       {"layers", c.layers},
       {"aggregator", aggregator_name(c.aggregator)},
       {"lr", c.lr},
       {"l2", c.l2},
       {"dropout", c.dropout},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"c", c.c},
       {"k", c.k},
       {"m_max", c.m_max},
       {"use_type", c.use_type},
       {"use_position", c.use_position},
       {"score_scaling", c.score_scaling},
       {"freeze_codes", c.freeze_codes},
       {"image_text_edges", c.image_text_edges},
       {"clip_norm", c.clip_norm},
       {"gate_hidden", c.gate_hidden},
       {"validation", c.validation}};
}

/// Reads the keys present in `j`; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw InputError("model config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "d") c.d = v.get<std::size_t>();
      else if (key == "layers") c.layers = v.get<std::size_t>();
      else if (key == "aggregator") c.aggregator = parse_aggregator(v.get<std::string>());
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "l2") c.l2 = v.get<double>();
      else if (key == "dropout") c.dropout = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "c") c.c = v.get<std::size_t>();
      else if (key == "k") c.k = v.get<std::size_t>();
      else if (key == "m_max") c.m_max = v.get<std::size_t>();
      else if (key == "use_type") c.use_type = v.get<bool>();
      else if (key == "use_position") c.use_position = v.get<bool>();
      else if (key == "score_scaling") c.score_scaling = v.get<bool>();
      else if (key == "freeze_codes") c.freeze_codes = v.get<bool>();
      else if (key == "image_text_edges") c.image_text_edges = v.get<bool>();
      else if (key == "clip_norm") c.clip_norm = v.get<double>();
      else if (key == "gate_hidden") c.gate_hidden = v.get<std::size_t>();
      else if (key == "validation") c.validation = v.get<bool>();
      else throw InputError("unknown model config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw InputError("model config key '" + key + "': " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// Encoding string data into catalog indices

class ItemIndex {
 public:
  ItemIndex() = default;
  explicit ItemIndex(const std::set<std::string>& catalog) : ids_(catalog.begin(), catalog.end()) {
    for (std::size_t i = 0; i < ids_.size(); ++i) pos_[ids_[i]] = i;
  }

  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  bool contains(const std::string& id) const { return pos_.count(id) != 0; }

  std::size_t at(const std::string& id) const {
    auto it = pos_.find(id);
    if (it == pos_.end()) throw InputError("item '" + id + "' is not in the catalog");
    return it->second;
  }

 private:
  std::vector<std::string> ids_;
  std::map<std::string, std::size_t> pos_;
};

struct EncodedPoint {
  std::vector<std::size_t> prefix;  // at most m_max most recent items
  std::size_t target = 0;
};

inline std::vector<EncodedPoint> encode_points(const std::vector<DataPoint>& points, const ItemIndex& index,
                                               std::size_t m_max) {
  std::vector<EncodedPoint> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    if (p.prefix.empty()) throw InputError("data point of user '" + p.user + "' has an empty prefix");
    EncodedPoint e;
    const std::size_t start = p.prefix.size() > m_max ? p.prefix.size() - m_max : 0;
    for (std::size_t i = start; i < p.prefix.size(); ++i) e.prefix.push_back(index.at(p.prefix[i]));
    e.target = index.at(p.target);
    out.push_back(std::move(e));
  }
  return out;
}

/// Moves each user's last training point (longest prefix) into a validation
/// set. Users with a single training point keep it for training.
inline std::pair<std::vector<DataPoint>, std::vector<DataPoint>> hold_out_validation(const std::vector<DataPoint>& train) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> last;  // user -> (index, count)
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto [it, inserted] = last.try_emplace(train[i].user, i, 0);
    auto& [idx, count] = it->second;
    ++count;
    if (train[i].prefix.size() > train[idx].prefix.size()) idx = i;
  }
  std::vector<char> held(train.size(), 0);
  for (const auto& [user, ic] : last)
    if (ic.second >= 2) held[ic.first] = 1;
  std::pair<std::vector<DataPoint>, std::vector<DataPoint>> out;
  for (std::size_t i = 0; i < train.size(); ++i) (held[i] ? out.second : out.first).push_back(train[i]);
  return out;
}

inline ItemCodes item_codes(const CodeAssignments& assignments, const ItemIndex& index) {
  ItemCodes out(index.size());
  for (const auto& [item, codes] : assignments)
    if (index.contains(item)) out[index.at(item)] = codes;
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

/// Adam with bias correction; state is keyed by position in the parameter list.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(const NamedVars& params) {
    if (m_.empty()) {
      for (const auto& [name, p] : params) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw InputError("adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i].second;
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& g = p.ensure_grad();
      for (std::size_t j = 0; j < m.size(); ++j) {
        m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
        v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
        p.value.data[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// lambda * sum of squared entries over `params`.
inline double l2_penalty(const NamedVars& params, double lambda) {
  double s = 0.0;
  for (const auto& [name, p] : params) s += squared_norm(p->value.data);
  return lambda * s;
}

/// Adds the gradient of l2_penalty to each parameter's gradient.
inline void add_l2_grad(const NamedVars& params, double lambda) {
  if (lambda == 0.0) return;
  for (const auto& [name, p] : params) {
    auto& g = p->ensure_grad();
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += 2.0 * lambda * p->value.data[j];
  }
}

/// Rescales all gradients so their joint norm is at most `max_norm`; returns
/// the norm before clipping.
inline double clip_global_norm(const NamedVars& params, double max_norm) {
  double s = 0.0;
  for (const auto& [name, p] : params) s += squared_norm(p->ensure_grad());
  const double norm = std::sqrt(s);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& [name, p] : params)
      for (double& g : p->grad) g *= f;
  }
  return norm;
}

inline void zero_grads(const NamedVars& params) {
  for (const auto& [name, p] : params) {
    p->ensure_grad();
    p->zero_grad();
  }
}

inline NamedTensors snapshot(const NamedVars& params) {
  NamedTensors out;
  for (const auto& [name, p] : params) out.emplace_back(name, p->value);
  return out;
}

/// Copies tensors into parameters by name; every parameter must be present
/// with a matching shape.
inline void restore(const NamedVars& params, const NamedTensors& tensors) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& [name, m] : tensors) by_name[name] = &m;
  for (const auto& [name, p] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw InputError("checkpoint lacks tensor '" + name + "'");
    if (it->second->rows != p->rows() || it->second->cols != p->cols())
      throw InputError("checkpoint tensor '" + name + "' has the wrong shape");
    p->value = *it->second;
  }
}

// ---------------------------------------------------------------------------
// Graph model

struct GraphExample {
  MSGraph graph;
  std::size_t target = 0;
};

inline std::vector<GraphExample> graph_examples(const std::vector<EncodedPoint>& points, const ItemCodes& image,
                                                const ItemCodes& text, const GraphOptions& opt = {}) {
  std::vector<GraphExample> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back({build_graph(p.prefix, image, text, opt), p.target});
  return out;
}

struct GraphModel {
  using Example = GraphExample;

  ModelConfig cfg;
  EmbeddingTables tables;
  PropagationParams prop;

  GraphModel(const ModelConfig& config, std::size_t num_items, const Matrix& image_centers, const Matrix& text_centers)
      : cfg(config) {
    cfg.validate();
    EmbeddingDims dims;
    dims.d = cfg.d;
    dims.max_positions = cfg.m_max;
    tables = init_tables(dims, num_items, image_centers, text_centers, cfg.seed);
    prop = init_propagation(cfg.d, cfg.layers, cfg.aggregator, cfg.seed + 1, cfg.gate_hidden);
  }

  NamedVars parameters() const {
    NamedVars out;
    for (const auto& [n, v] : tables.named()) out.emplace_back("emb." + n, v);
    for (const auto& [n, v] : prop.named()) out.emplace_back("prop." + n, v);
    return out;
  }

  NamedVars trainable() const {
    NamedVars out;
    for (const auto& [n, v] : parameters()) {
      if (cfg.freeze_codes && (n == "emb.image_code" || n == "emb.text_code")) continue;
      if (!cfg.use_type && n == "emb.type") continue;
      if (!cfg.use_position && n == "emb.position") continue;
      if (v->value.size() == 0) continue;
      out.emplace_back(n, v);
    }
    return out;
  }

  RepresentationOptions representation() const { return {cfg.use_type, cfg.use_position}; }

  /// Final states of all nodes of the batch.
  ad::Var states(const GraphBatch& b, bool training, Rng& rng, EdgeCounters* counters = nullptr,
                 std::vector<LayerTrace>* traces = nullptr) const {
    PropagationOptions opt;
    opt.score_scaling = cfg.score_scaling;
    opt.dropout = training ? cfg.dropout : 0.0;
    opt.rng = &rng;
    opt.counters = counters;
    return propagate(b, node_repr(b, tables, representation()), prop, opt, traces);
  }

  ad::Var forward(std::span<const GraphExample* const> batch, bool training, Rng& rng,
                  EdgeCounters* counters = nullptr) const {
    GraphBatch b;
    for (const auto* e : batch) b.append(e->graph);
    return ad::matmul_nt(last_pool(b, states(b, training, rng, counters)), tables.item);
  }
};

// ---------------------------------------------------------------------------
// Recurrent early/late fusion base model

enum class FusionMode { Early, Late };

inline const char* fusion_name(FusionMode m) { return m == FusionMode::Early ? "early" : "late"; }

/// Raw modality vectors indexed by catalog position; missing entries are zero.
struct FeatureInputs {
  Matrix image;
  Matrix text;
};

inline Matrix feature_matrix(const FeatureTable& table, const ItemIndex& index) {
  Matrix m(index.size(), table.dim);
  for (const auto& [item, v] : table.entries)
    if (index.contains(item)) std::copy(v.begin(), v.end(), m.row(index.at(item)).begin());
  return m;
}

inline FeatureInputs feature_inputs(const FeatureTable& image, const FeatureTable& text, const ItemIndex& index) {
  return {feature_matrix(image, index), feature_matrix(text, index)};
}

/// Minimal gated unit: f = sigmoid(x Wf + h Uf + bf),
/// c = tanh(x Wh + (f * h) Uh + bh), h' = (1 - f) h + f c.
struct MguCell {
  ad::Var wf, uf, bf, wh, uh, bh;

  static MguCell init(std::size_t d, Rng& rng) {
    const double b = 1.0 / std::sqrt(static_cast<double>(d));
    return {ad::parameter(uniform_matrix(d, d, b, rng)), ad::parameter(uniform_matrix(d, d, b, rng)),
            ad::parameter(Matrix(1, d)),                 ad::parameter(uniform_matrix(d, d, b, rng)),
            ad::parameter(uniform_matrix(d, d, b, rng)), ad::parameter(Matrix(1, d))};
  }

  void name_into(NamedVars& out, const std::string& prefix) const {
    out.insert(out.end(), {{prefix + "wf", wf}, {prefix + "uf", uf}, {prefix + "bf", bf},
                           {prefix + "wh", wh}, {prefix + "uh", uh}, {prefix + "bh", bh}});
  }

  ad::Var step(const ad::Var& x, const ad::Var& h) const {
    auto f = ad::sigmoid(ad::add_row(ad::add(ad::matmul(x, wf), ad::matmul(h, uf)), bf));
    auto c = ad::tanh(ad::add_row(ad::add(ad::matmul(x, wh), ad::matmul(ad::hadamard(f, h), uh)), bh));
    return ad::add(h, ad::hadamard(f, ad::sub(c, h)));
  }
};

struct SeqExample {
  std::vector<std::size_t> prefix;
  std::size_t target = 0;
};

inline std::vector<SeqExample> seq_examples(const std::vector<EncodedPoint>& points) {
  std::vector<SeqExample> out;
  for (const auto& p : points) out.push_back({p.prefix, p.target});
  return out;
}

struct FusionModel {
  using Example = SeqExample;

  ModelConfig cfg;
  FusionMode mode;
  FeatureInputs features;
  ad::Var item, image_proj, text_proj, fuse_w, fuse_b;
  std::vector<MguCell> cells;  // early: one; late: item, image, text

  FusionModel(const ModelConfig& config, FusionMode m, std::size_t num_items, FeatureInputs inputs)
      : cfg(config), mode(m), features(std::move(inputs)) {
    cfg.validate();
    if (features.image.rows != num_items || features.text.rows != num_items)
      throw InputError("fusion model: feature rows must match the catalog");
    Rng rng(cfg.seed);
    const std::size_t d = cfg.d;
    const double b = 1.0 / std::sqrt(static_cast<double>(d));
    item = ad::parameter(uniform_matrix(num_items, d, b, rng));
    image_proj = ad::parameter(uniform_matrix(features.image.cols, d, 1.0 / std::sqrt(static_cast<double>(features.image.cols)), rng));
    text_proj = ad::parameter(uniform_matrix(features.text.cols, d, 1.0 / std::sqrt(static_cast<double>(features.text.cols)), rng));
    fuse_w = ad::parameter(uniform_matrix(3 * d, d, 1.0 / std::sqrt(3.0 * static_cast<double>(d)), rng));
    fuse_b = ad::parameter(Matrix(1, d));
    for (std::size_t i = 0; i < (mode == FusionMode::Early ? 1u : 3u); ++i) cells.push_back(MguCell::init(d, rng));
  }

  NamedVars parameters() const {
    NamedVars out{{"item", item}, {"image_proj", image_proj}, {"text_proj", text_proj},
                  {"fuse_w", fuse_w}, {"fuse_b", fuse_b}};
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i].name_into(out, "cell" + std::to_string(i) + ".");
    return out;
  }

  NamedVars trainable() const { return parameters(); }

  ad::Var fuse(const std::vector<ad::Var>& parts) const {
    return ad::leaky_relu(ad::add_row(ad::matmul(ad::concat_cols(parts), fuse_w), fuse_b), 0.01);
  }

  /// User representation P, B x d. Sequences are left-padded; padded steps
  /// leave the state unchanged.
  ad::Var represent(std::span<const SeqExample* const> batch) const {
    const std::size_t bsz = batch.size();
    std::size_t steps = 0;
    for (const auto* e : batch) steps = std::max(steps, e->prefix.size());
    auto image_all = ad::matmul(ad::constant(features.image), image_proj);
    auto text_all = ad::matmul(ad::constant(features.text), text_proj);
    const std::size_t channels = mode == FusionMode::Early ? 1 : 3;
    std::vector<ad::Var> h(channels, ad::constant(Matrix(bsz, cfg.d)));
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<std::size_t> idx(bsz, 0);
      std::vector<char> active(bsz, 0);
      for (std::size_t b = 0; b < bsz; ++b) {
        const auto& p = batch[b]->prefix;
        const std::size_t pad = steps - p.size();
        if (t >= pad) {
          idx[b] = p[t - pad];
          active[b] = 1;
        }
      }
      std::vector<ad::Var> x{ad::gather_rows(item, idx), ad::gather_rows(image_all, idx), ad::gather_rows(text_all, idx)};
      if (mode == FusionMode::Early) {
        h[0] = ad::where_rows(active, cells[0].step(fuse(x), h[0]), h[0]);
      } else {
        for (std::size_t c = 0; c < 3; ++c) h[c] = ad::where_rows(active, cells[c].step(x[c], h[c]), h[c]);
      }
    }
    return mode == FusionMode::Early ? h[0] : fuse(h);
  }

  ad::Var forward(std::span<const SeqExample* const> batch, bool training, Rng& rng) const {
    auto p = represent(batch);
    if (training && cfg.dropout > 0.0) p = ad::dropout(p, cfg.dropout, rng);
    return ad::matmul_nt(p, item);
  }
};

// ---------------------------------------------------------------------------
// Scoring and the training loop

/// Logits of every example, one row each. Batches are spread over `threads`
/// workers; the result does not depend on the thread count.
template <class Model>
Matrix score_all(const Model& model, const std::vector<typename Model::Example>& examples, std::size_t batch_size,
                 std::size_t threads = 1) {
  using Ex = typename Model::Example;
  const std::size_t n = examples.size();
  std::vector<Matrix> parts((n + batch_size - 1) / batch_size);
  auto work = [&](std::size_t worker, std::size_t stride) {
    ad::NoGradGuard guard;
    Rng unused(0);
    for (std::size_t b = worker; b < parts.size(); b += stride) {
      std::vector<const Ex*> batch;
      for (std::size_t i = b * batch_size; i < std::min(n, (b + 1) * batch_size); ++i) batch.push_back(&examples[i]);
      parts[b] = model.forward(batch, false, unused)->value;
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, parts.size()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w, threads);
    for (auto& t : pool) t.join();
  }
  std::size_t cols = parts.empty() ? 0 : parts.front().cols;
  Matrix out(n, cols);
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r * cols));
    r += p.rows;
  }
  return out;
}

template <class Model>
MetricReport evaluate(const Model& model, const std::vector<typename Model::Example>& examples, std::vector<int> ks,
                      std::size_t batch_size = 256, std::size_t threads = 1) {
  const Matrix logits = score_all(model, examples, batch_size, threads);
  std::vector<std::size_t> targets;
  for (const auto& e : examples) targets.push_back(e.target);
  return rank_metrics(logits, targets, std::move(ks));
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_hr5 = 0.0;
  double val_mrr5 = 0.0;
  double wall_ms = 0.0;
};

inline nlohmann::json epoch_to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_hr5", e.val_hr5},
          {"val_mrr5", e.val_mrr5}, {"wall_ms", e.wall_ms}};
}

struct TrainResult {
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
};

/// Mini-batch Adam on mean softmax cross-entropy plus l2 * sum of squares.
/// After training the parameters are those of the epoch with the best
/// validation HR@5 (last epoch when `val` is empty). Aborts with
/// RuntimeFailure on a non-finite loss.
template <class Model>
TrainResult train_model(Model& model, const std::vector<typename Model::Example>& train,
                        const std::vector<typename Model::Example>& val, std::ostream* log = nullptr) {
  using Ex = typename Model::Example;
  const ModelConfig& cfg = model.cfg;
  if (train.empty()) throw InputError("train: no training examples");
  const NamedVars params = model.trainable();
  Adam adam(cfg.lr);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  NamedTensors best;
  double best_hr = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    shuffle_in_place(order, rng);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      std::vector<const Ex*> batch;
      std::vector<std::size_t> targets;
      for (std::size_t i = b0; i < b1; ++i) {
        batch.push_back(&train[order[i]]);
        targets.push_back(train[order[i]].target);
      }
      zero_grads(params);
      auto loss = ad::cross_entropy(model.forward(batch, true, rng), targets);
      const double value = loss->value.data[0] + l2_penalty(params, cfg.l2);
      if (!std::isfinite(value))
        throw RuntimeFailure("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b0 / cfg.batch_size + 1));
      ad::backward(loss);
      add_l2_grad(params, cfg.l2);
      clip_global_norm(params, cfg.clip_norm);
      adam.step(params);
      loss_sum += value * static_cast<double>(b1 - b0);
    }
    EpochLog e;
    e.epoch = epoch;
    e.train_loss = loss_sum / static_cast<double>(order.size());
    if (!val.empty()) {
      const auto r = evaluate(model, val, {5});
      e.val_hr5 = r.hr.at(5);
      e.val_mrr5 = r.mrr.at(5);
    }
    e.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(e);
    if (log) *log << epoch_to_json(e).dump() << '\n';
    if (val.empty() || e.val_hr5 > best_hr) {
      best_hr = e.val_hr5;
      best = snapshot(params);
      result.best_epoch = epoch;
    }
  }
  if (!best.empty()) restore(params, best);
  return result;
}

}  // namespace mmsr
