#pragma once

// Graph aggregators over a GraphBatch.
//
// States are row matrices (one row per node) and every transform multiplies
// on the right: W h in column notation is h * W here. Edges point from the
// neighbor (src) to the node being updated (dst).

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmsr/autograd.hpp"
#include "mmsr/common.hpp"
#include "mmsr/msgraph.hpp"

namespace mmsr {

enum class Aggregator { GCN, GAT, HAN, Sync, HO, HE, HOHE, HEHO, NI_HOHE, NI_HEHO };

inline const char* aggregator_name(Aggregator a) {
  switch (a) {
    case Aggregator::GCN: return "GCN";
    case Aggregator::GAT: return "GAT";
    case Aggregator::HAN: return "HAN";
    case Aggregator::Sync: return "Sync";
    case Aggregator::HO: return "HO";
    case Aggregator::HE: return "HE";
    case Aggregator::HOHE: return "HOHE";
    case Aggregator::HEHO: return "HEHO";
    case Aggregator::NI_HOHE: return "NI-HOHE";
    case Aggregator::NI_HEHO: return "NI-HEHO";
  }
  return "?";
}

inline Aggregator parse_aggregator(const std::string& s) {
  for (auto a : {Aggregator::GCN, Aggregator::GAT, Aggregator::HAN, Aggregator::Sync, Aggregator::HO, Aggregator::HE,
                 Aggregator::HOHE, Aggregator::HEHO, Aggregator::NI_HOHE, Aggregator::NI_HEHO})
    if (s == aggregator_name(a)) return a;
  throw InputError("unknown aggregator '" + s + "'");
}

/// Parameters of one propagation layer. Only the groups the aggregator uses
/// are allocated; the others stay null.
struct LayerParams {
  ad::Var w;                   // GCN/GAT transform, d x d
  ad::Var attention;           // GAT attention, 2d x 1: [center part; neighbor part]
  std::vector<ad::Var> query;  // per node type, d x d
  std::vector<ad::Var> key;
  std::vector<ad::Var> value;
  ad::Var relation;            // homogeneous relation vectors, 4 x d
  ad::Var gate_w1, gate_b1, gate_w2, gate_b2;  // 2d -> hidden -> 2
  ad::Var merge;               // synchronous merge, 2d x d

  std::vector<std::pair<std::string, ad::Var>> named(const std::string& prefix) const {
    std::vector<std::pair<std::string, ad::Var>> out;
    auto put = [&](const std::string& n, const ad::Var& v) {
      if (v) out.emplace_back(prefix + n, v);
    };
    put("w", w);
    put("attention", attention);
    for (std::size_t t = 0; t < query.size(); ++t) put("query" + std::to_string(t), query[t]);
    for (std::size_t t = 0; t < key.size(); ++t) put("key" + std::to_string(t), key[t]);
    for (std::size_t t = 0; t < value.size(); ++t) put("value" + std::to_string(t), value[t]);
    put("relation", relation);
    put("gate_w1", gate_w1);
    put("gate_b1", gate_b1);
    put("gate_w2", gate_w2);
    put("gate_b2", gate_b2);
    put("merge", merge);
    return out;
  }
};

struct PropagationParams {
  Aggregator aggregator = Aggregator::HAN;
  std::vector<LayerParams> layers;

  std::vector<std::pair<std::string, ad::Var>> named() const {
    std::vector<std::pair<std::string, ad::Var>> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto part = layers[l].named("layer" + std::to_string(l) + ".");
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
};

inline bool uses_typed_attention(Aggregator a) { return a != Aggregator::GCN && a != Aggregator::GAT; }

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases start at zero.
inline PropagationParams init_propagation(std::size_t d, std::size_t layers, Aggregator agg, std::uint64_t seed,
                                          std::size_t gate_hidden = 0) {
  if (d == 0 || layers == 0) throw InputError("init_propagation: d and layer count must be positive");
  const std::size_t hidden = gate_hidden ? gate_hidden : d;
  Rng rng(seed);
  auto uni = [&](std::size_t r, std::size_t c) {
    return ad::parameter(uniform_matrix(r, c, 1.0 / std::sqrt(static_cast<double>(r)), rng));
  };
  PropagationParams p;
  p.aggregator = agg;
  for (std::size_t l = 0; l < layers; ++l) {
    LayerParams lp;
    if (agg == Aggregator::GCN || agg == Aggregator::GAT) lp.w = uni(d, d);
    if (agg == Aggregator::GAT) lp.attention = uni(2 * d, 1);
    if (uses_typed_attention(agg)) {
      for (std::size_t t = 0; t < kNodeTypes; ++t) {
        lp.query.push_back(uni(d, d));
        lp.key.push_back(uni(d, d));
        lp.value.push_back(uni(d, d));
      }
      lp.relation = ad::parameter(uniform_matrix(kHomogeneousRelations, d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    }
    if (agg == Aggregator::HAN) {
      lp.gate_w1 = uni(2 * d, hidden);
      lp.gate_b1 = ad::parameter(Matrix(1, hidden));
      lp.gate_w2 = uni(hidden, 2);
      lp.gate_b2 = ad::parameter(Matrix(1, 2));
    }
    if (agg == Aggregator::Sync) lp.merge = uni(2 * d, d);
    p.layers.push_back(std::move(lp));
  }
  return p;
}

/// Edge reads per relation class, for ablation contracts.
struct EdgeCounters {
  std::size_t homogeneous = 0;
  std::size_t heterogeneous = 0;
};

struct PropagationOptions {
  /// Divide attention scores by sqrt(d). Off by default.
  bool score_scaling = false;
  double dropout = 0.0;
  Rng* rng = nullptr;  // required when dropout > 0
  EdgeCounters* counters = nullptr;
};

/// One class aggregation as logged for analysis.
struct AggregationTrace {
  ad::Var alpha;   // E x 1 attention weights
  ad::Var values;  // N x d value vectors that were mixed
  ad::Var output;  // N x d, before passthrough
};

/// Intermediate results of one layer. Fields not produced by the aggregator
/// stay null.
struct LayerTrace {
  ad::Var ho, he;                  // single-phase class aggregations
  ad::Var hohe, heho;              // two-phase results
  ad::Var hohe_first, heho_first;  // phase-1 outputs
  std::optional<AggregationTrace> hohe_second, heho_second;
  ad::Var beta;                    // N x 2 gate weights
};

namespace detail {

inline ad::Var maybe_scale(const ad::Var& scores, std::size_t d, const PropagationOptions& opt) {
  return opt.score_scaling ? ad::affine(scores, 1.0 / std::sqrt(static_cast<double>(d))) : scores;
}

inline std::vector<char> has_incoming(const EdgeList& edges, std::size_t n) {
  std::vector<char> mask(n, 0);
  for (std::size_t v : edges.dst) mask[v] = 1;
  return mask;
}

}  // namespace detail

/// All in-edges of the batch regardless of relation, as one list.
inline EdgeList all_edges(const GraphBatch& b) {
  EdgeList e = b.homogeneous;
  e.src.insert(e.src.end(), b.heterogeneous.src.begin(), b.heterogeneous.src.end());
  e.dst.insert(e.dst.end(), b.heterogeneous.dst.begin(), b.heterogeneous.dst.end());
  e.rel.insert(e.rel.end(), b.heterogeneous.rel.begin(), b.heterogeneous.rel.end());
  return e;
}

// ---------------------------------------------------------------------------
// Synchronous baselines

/// h_i' = LeakyReLU(sum_j W h_j / sqrt(|N_i| |N_j|)) over all in-edges.
inline ad::Var gcn_layer(const GraphBatch& b, const ad::Var& h, const LayerParams& p) {
  const std::size_t n = b.num_nodes();
  const EdgeList e = all_edges(b);
  std::vector<double> degree(n, 0.0);
  for (std::size_t v : e.dst) degree[v] += 1.0;
  Matrix norm(e.size(), 1);
  for (std::size_t i = 0; i < e.size(); ++i) norm.data[i] = 1.0 / std::sqrt(degree[e.dst[i]] * degree[e.src[i]]);
  auto hw = ad::matmul(h, p.w);
  return ad::leaky_relu(ad::edge_aggregate(ad::constant(std::move(norm)), hw, e.src, e.dst, n), 0.01);
}

/// Attention over all in-edges with e_ij = a^T [W h_i ; W h_j].
inline ad::Var gat_layer(const GraphBatch& b, const ad::Var& h, const LayerParams& p, AggregationTrace* trace = nullptr) {
  const std::size_t n = b.num_nodes();
  const EdgeList e = all_edges(b);
  auto hw = ad::matmul(h, p.w);
  auto pair = ad::concat_cols({ad::gather_rows(hw, e.dst), ad::gather_rows(hw, e.src)});
  auto scores = ad::leaky_relu(ad::matmul(pair, p.attention), 0.01);
  auto alpha = ad::segment_softmax(scores, e.dst, n);
  auto out = ad::edge_aggregate(alpha, hw, e.src, e.dst, n);
  if (trace) *trace = {alpha, hw, out};
  return out;
}

// ---------------------------------------------------------------------------
// Heterogeneity-aware attention

/// Content scores a_r . (V h_i (.) V h_j) for homogeneous edges, E x 1.
inline ad::Var homo_scores(const GraphBatch& b, const EdgeList& edges, const ad::Var& h, const LayerParams& p,
                           const PropagationOptions& opt = {}) {
  for (Relation r : edges.rel)
    if (!is_homogeneous(r)) throw InputError("homo_scores: heterogeneous edge in input");
  if (opt.counters) opt.counters->homogeneous += edges.size();
  auto v = ad::typed_matmul(h, p.value, b.types);
  std::vector<std::size_t> rel(edges.size());
  for (std::size_t i = 0; i < rel.size(); ++i) rel[i] = static_cast<std::size_t>(edges.rel[i]);
  auto prod = ad::hadamard(ad::gather_rows(v, edges.dst), ad::gather_rows(v, edges.src));
  return detail::maybe_scale(ad::row_dot(prod, ad::gather_rows(p.relation, std::move(rel))), h->cols(), opt);
}

/// Key-value scores (W_Q,t_j h_j) . (W_K,t_i h_i) for heterogeneous edges,
/// query from the neighbor and key from the center, E x 1.
inline ad::Var hetero_scores(const GraphBatch& b, const EdgeList& edges, const ad::Var& h, const LayerParams& p,
                             const PropagationOptions& opt = {}) {
  for (Relation r : edges.rel)
    if (is_homogeneous(r)) throw InputError("hetero_scores: homogeneous edge in input");
  if (opt.counters) opt.counters->heterogeneous += edges.size();
  auto q = ad::typed_matmul(h, p.query, b.types);
  auto k = ad::typed_matmul(h, p.key, b.types);
  return detail::maybe_scale(ad::row_dot(ad::gather_rows(q, edges.src), ad::gather_rows(k, edges.dst)), h->cols(), opt);
}

enum class RelationClass { Homogeneous, Heterogeneous };

/// Softmax-weighted sum of type-specific value vectors over one relation
/// class. Scores are computed from `score_states`, values from
/// `value_states`; nodes without neighbors in the class keep their
/// `score_states` row.
inline ad::Var class_aggregate(const GraphBatch& b, RelationClass cls, const ad::Var& score_states,
                               const ad::Var& value_states, const LayerParams& p, const PropagationOptions& opt = {},
                               AggregationTrace* trace = nullptr) {
  const std::size_t n = b.num_nodes();
  const EdgeList& edges = cls == RelationClass::Homogeneous ? b.homogeneous : b.heterogeneous;
  auto scores = cls == RelationClass::Homogeneous ? homo_scores(b, edges, score_states, p, opt)
                                                  : hetero_scores(b, edges, score_states, p, opt);
  auto alpha = ad::segment_softmax(scores, edges.dst, n);
  auto values = ad::typed_matmul(value_states, p.value, b.types);
  auto agg = ad::edge_aggregate(alpha, values, edges.src, edges.dst, n);
  if (trace) *trace = {alpha, values, agg};
  return ad::where_rows(detail::has_incoming(edges, n), agg, score_states);
}

/// Concatenate both class aggregations and apply the 2d -> d merge.
inline ad::Var sync_layer(const GraphBatch& b, const ad::Var& h, const LayerParams& p, const PropagationOptions& opt = {},
                          LayerTrace* trace = nullptr) {
  auto ho = class_aggregate(b, RelationClass::Homogeneous, h, h, p, opt);
  auto he = class_aggregate(b, RelationClass::Heterogeneous, h, h, p, opt);
  if (trace) trace->ho = ho, trace->he = he;
  return ad::matmul(ad::concat_cols({ho, he}), p.merge);
}

enum class FusionOrder { HoHe, HeHo };

/// Two-phase update. Phase 2 scores with the phase-1 states; its values come
/// from phase 1 (invasive) or from the layer input (non-invasive).
inline ad::Var phased_layer(const GraphBatch& b, const ad::Var& h, const LayerParams& p, FusionOrder order,
                            bool non_invasive, const PropagationOptions& opt = {}, LayerTrace* trace = nullptr) {
  const auto first = order == FusionOrder::HoHe ? RelationClass::Homogeneous : RelationClass::Heterogeneous;
  const auto second = order == FusionOrder::HoHe ? RelationClass::Heterogeneous : RelationClass::Homogeneous;
  auto mid = class_aggregate(b, first, h, h, p, opt);
  AggregationTrace second_trace;
  auto out = class_aggregate(b, second, mid, non_invasive ? h : mid, p, opt, &second_trace);
  if (trace) {
    if (order == FusionOrder::HoHe) {
      trace->hohe_first = mid, trace->hohe = out, trace->hohe_second = second_trace;
    } else {
      trace->heho_first = mid, trace->heho = out, trace->heho_second = second_trace;
    }
  }
  return out;
}

/// beta = softmax(MLP([hohe; heho])), output beta_0 hohe + beta_1 heho.
inline ad::Var gate_combine(const ad::Var& hohe, const ad::Var& heho, const LayerParams& p, ad::Var* beta_out = nullptr) {
  auto hidden = ad::leaky_relu(ad::add_row(ad::matmul(ad::concat_cols({hohe, heho}), p.gate_w1), p.gate_b1), 0.01);
  auto beta = ad::softmax_rows(ad::add_row(ad::matmul(hidden, p.gate_w2), p.gate_b2));
  if (beta_out) *beta_out = beta;
  return ad::add(ad::scale_rows(hohe, ad::slice_cols(beta, 0, 1)), ad::scale_rows(heho, ad::slice_cols(beta, 1, 1)));
}

/// Gated HAN layer over both non-invasive fusion orders.
inline ad::Var han_layer(const GraphBatch& b, const ad::Var& h, const LayerParams& p, const PropagationOptions& opt = {},
                         LayerTrace* trace = nullptr) {
  auto hohe = phased_layer(b, h, p, FusionOrder::HoHe, true, opt, trace);
  auto heho = phased_layer(b, h, p, FusionOrder::HeHo, true, opt, trace);
  ad::Var beta;
  auto out = gate_combine(hohe, heho, p, &beta);
  if (trace) trace->beta = beta;
  return out;
}

inline ad::Var apply_layer(Aggregator agg, const GraphBatch& b, const ad::Var& h, const LayerParams& p,
                           const PropagationOptions& opt = {}, LayerTrace* trace = nullptr) {
  switch (agg) {
    case Aggregator::GCN: return gcn_layer(b, h, p);
    case Aggregator::GAT: return gat_layer(b, h, p);
    case Aggregator::HAN: return han_layer(b, h, p, opt, trace);
    case Aggregator::Sync: return sync_layer(b, h, p, opt, trace);
    case Aggregator::HO: {
      auto out = class_aggregate(b, RelationClass::Homogeneous, h, h, p, opt);
      if (trace) trace->ho = out;
      return out;
    }
    case Aggregator::HE: {
      auto out = class_aggregate(b, RelationClass::Heterogeneous, h, h, p, opt);
      if (trace) trace->he = out;
      return out;
    }
    case Aggregator::HOHE: return phased_layer(b, h, p, FusionOrder::HoHe, false, opt, trace);
    case Aggregator::HEHO: return phased_layer(b, h, p, FusionOrder::HeHo, false, opt, trace);
    case Aggregator::NI_HOHE: return phased_layer(b, h, p, FusionOrder::HoHe, true, opt, trace);
    case Aggregator::NI_HEHO: return phased_layer(b, h, p, FusionOrder::HeHo, true, opt, trace);
  }
  throw InputError("apply_layer: unknown aggregator");
}

/// Runs every layer in order and returns the final states of all nodes.
/// Dropout, when enabled, follows each layer.
inline ad::Var propagate(const GraphBatch& b, const ad::Var& h0, const PropagationParams& params,
                         const PropagationOptions& opt = {}, std::vector<LayerTrace>* traces = nullptr) {
  if (params.layers.empty()) throw InputError("propagate: need at least one layer");
  auto h = h0;
  if (traces) traces->assign(params.layers.size(), {});
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    h = apply_layer(params.aggregator, b, h, params.layers[l], opt, traces ? &(*traces)[l] : nullptr);
    if (opt.dropout > 0.0) {
      if (!opt.rng) throw InputError("propagate: dropout needs an rng");
      h = ad::dropout(h, opt.dropout, *opt.rng);
    }
  }
  return h;
}

/// Gathers the final state of each graph's last item node, B x d.
inline ad::Var last_pool(const GraphBatch& b, const ad::Var& states) { return ad::gather_rows(states, b.last_items); }

}  // namespace mmsr
