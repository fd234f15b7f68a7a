#pragma once

// Straight-line reference implementations used by the unit tests and the
// acceptance binary. They work node by node on plain vectors and share no
// code with the library beyond the data types.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <tuple>
#include <vector>

#include "mmsr/msgraph.hpp"
#include "mmsr/propagation.hpp"

namespace mmsr::oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows rows(const Matrix& m) {
  Rows out;
  for (std::size_t r = 0; r < m.rows; ++r) out.emplace_back(m.row(r).begin(), m.row(r).end());
  return out;
}

inline double max_abs_diff(const Matrix& a, const Rows& b) {
  double worst = 0.0;
  if (a.rows != b.size()) return INFINITY;
  for (std::size_t r = 0; r < a.rows; ++r) {
    if (b[r].size() != a.cols) return INFINITY;
    for (std::size_t c = 0; c < a.cols; ++c) worst = std::max(worst, std::abs(a(r, c) - b[r][c]));
  }
  return worst;
}

// row vector times matrix
inline std::vector<double> vm(const std::vector<double>& v, const Matrix& w) {
  std::vector<double> out(w.cols, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j) out[j] += v[i] * w(i, j);
  return out;
}

inline double leaky(double x) { return x > 0 ? x : 0.01 * x; }

// ---------------------------------------------------------------------------
// Graph builder

using KeyEdge = std::tuple<NodeKey, Relation, NodeKey>;

struct GraphTruth {
  std::map<NodeKey, std::set<std::size_t>> positions;
  std::set<KeyEdge> edges;
  NodeKey last;
};

inline GraphTruth build(const std::vector<std::size_t>& prefix, const ItemCodes& image, const ItemCodes& text,
                        bool image_text = true) {
  GraphTruth g;
  const std::size_t m = prefix.size();
  // keys[channel][p]
  std::vector<std::vector<std::vector<NodeKey>>> keys(3, std::vector<std::vector<NodeKey>>(m));
  for (std::size_t p = 0; p < m; ++p) {
    keys[0][p].push_back({NodeType::Item, prefix[p]});
    if (prefix[p] < image.size() && image[prefix[p]])
      for (auto c : *image[prefix[p]]) keys[1][p].push_back({NodeType::ImageCode, c});
    if (prefix[p] < text.size() && text[prefix[p]])
      for (auto c : *text[prefix[p]]) keys[2][p].push_back({NodeType::TextCode, c});
    for (const auto& ch : keys)
      for (const auto& k : ch[p]) g.positions[k].insert(p + 1);
  }
  g.last = {NodeType::Item, prefix.back()};

  std::set<std::pair<NodeKey, NodeKey>> moves;
  for (const auto& ch : keys) {
    std::vector<std::size_t> present;
    for (std::size_t p = 0; p < m; ++p)
      if (!ch[p].empty()) present.push_back(p);
    for (std::size_t i = 0; i + 1 < present.size(); ++i)
      for (const auto& a : ch[present[i]])
        for (const auto& b : ch[present[i + 1]])
          if (a != b) moves.insert({a, b});
  }
  for (const auto& [a, b] : moves) {
    if (moves.count({b, a})) {
      g.edges.insert({a, Relation::BiDirectional, b});
    } else {
      g.edges.insert({a, Relation::TransitionOut, b});
      g.edges.insert({b, Relation::TransitionIn, a});
    }
  }
  for (const auto& [k, ps] : g.positions) g.edges.insert({k, Relation::SelfLoop, k});
  for (std::size_t p = 0; p < m; ++p)
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        if (a == b || (!image_text && a + b == 3)) continue;
        for (const auto& x : keys[a][p])
          for (const auto& y : keys[b][p]) g.edges.insert({x, Relation::CrossModal, y});
      }
  return g;
}

inline bool same_graph(const MSGraph& g, const GraphTruth& t) {
  std::map<NodeKey, std::set<std::size_t>> positions;
  for (const auto& n : g.nodes) {
    if (positions.count(n.key)) return false;
    positions[n.key] = {n.positions.begin(), n.positions.end()};
  }
  std::set<KeyEdge> edges;
  for (const auto& e : g.edges) edges.insert({g.nodes[e.src].key, e.rel, g.nodes[e.dst].key});
  return positions == t.positions && edges == t.edges && edges.size() == g.edges.size() &&
         g.nodes[g.last_item].key == t.last;
}

// ---------------------------------------------------------------------------
// Aggregators

struct InEdge {
  std::size_t src;
  Relation rel;
};

// in-edges per node for one class, or both when cls is empty
inline std::vector<std::vector<InEdge>> in_edges(const GraphBatch& b, std::optional<RelationClass> cls) {
  std::vector<std::vector<InEdge>> out(b.num_nodes());
  auto add = [&](const EdgeList& e) {
    for (std::size_t i = 0; i < e.size(); ++i) out[e.dst[i]].push_back({e.src[i], e.rel[i]});
  };
  if (!cls || *cls == RelationClass::Homogeneous) add(b.homogeneous);
  if (!cls || *cls == RelationClass::Heterogeneous) add(b.heterogeneous);
  return out;
}

/// Dense form: LeakyReLU(D^-1/2 A D^-1/2 H W).
inline Rows gcn(const GraphBatch& b, const Rows& h, const Matrix& w) {
  const std::size_t n = b.num_nodes();
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  const auto in = in_edges(b, std::nullopt);
  for (std::size_t i = 0; i < n; ++i)
    for (const auto& e : in[i]) a[i][e.src] += 1.0;
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) deg[i] += a[i][j];
  Rows hw;
  for (const auto& row : h) hw.push_back(vm(row, w));
  Rows out(n, std::vector<double>(w.cols, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (a[i][j] == 0.0) continue;
      const double c = a[i][j] / std::sqrt(deg[i] * deg[j]);
      for (std::size_t k = 0; k < w.cols; ++k) out[i][k] += c * hw[j][k];
    }
    for (double& x : out[i]) x = leaky(x);
  }
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& s) {
  const double mx = *std::max_element(s.begin(), s.end());
  std::vector<double> e(s.size());
  double z = 0;
  for (std::size_t i = 0; i < s.size(); ++i) z += e[i] = std::exp(s[i] - mx);
  for (double& x : e) x /= z;
  return e;
}

inline Rows gat(const GraphBatch& b, const Rows& h, const Matrix& w, const Matrix& att) {
  const std::size_t d = w.cols;
  Rows hw;
  for (const auto& row : h) hw.push_back(vm(row, w));
  const auto in = in_edges(b, std::nullopt);
  Rows out(h.size(), std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < h.size(); ++i) {
    std::vector<double> s;
    for (const auto& e : in[i]) {
      double x = 0;
      for (std::size_t k = 0; k < d; ++k) x += att.data[k] * hw[i][k] + att.data[d + k] * hw[e.src][k];
      s.push_back(leaky(x));
    }
    const auto alpha = softmax(s);
    for (std::size_t t = 0; t < in[i].size(); ++t)
      for (std::size_t k = 0; k < d; ++k) out[i][k] += alpha[t] * hw[in[i][t].src][k];
  }
  return out;
}

struct Weights {
  std::vector<Matrix> q, k, v;
  Matrix relation;
  Matrix gate_w1, gate_b1, gate_w2, gate_b2, merge;

  static Weights of(const LayerParams& p) {
    Weights w;
    for (const auto& x : p.query) w.q.push_back(x->value);
    for (const auto& x : p.key) w.k.push_back(x->value);
    for (const auto& x : p.value) w.v.push_back(x->value);
    if (p.relation) w.relation = p.relation->value;
    if (p.gate_w1) w.gate_w1 = p.gate_w1->value, w.gate_b1 = p.gate_b1->value, w.gate_w2 = p.gate_w2->value,
                   w.gate_b2 = p.gate_b2->value;
    if (p.merge) w.merge = p.merge->value;
    return w;
  }
};

inline double homo_score(const GraphBatch& b, const Rows& h, const Weights& w, std::size_t dst, std::size_t src,
                         Relation rel) {
  const auto vi = vm(h[dst], w.v[b.types[dst]]);
  const auto vj = vm(h[src], w.v[b.types[src]]);
  double s = 0;
  for (std::size_t k = 0; k < vi.size(); ++k) s += w.relation(static_cast<std::size_t>(rel), k) * vi[k] * vj[k];
  return s;
}

inline double hetero_score(const GraphBatch& b, const Rows& h, const Weights& w, std::size_t dst, std::size_t src) {
  const auto q = vm(h[src], w.q[b.types[src]]);
  const auto k = vm(h[dst], w.k[b.types[dst]]);
  double s = 0;
  for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * k[i];
  return s;
}

inline Rows class_aggregate(const GraphBatch& b, RelationClass cls, const Rows& score_h, const Rows& value_h,
                            const Weights& w) {
  const auto in = in_edges(b, cls);
  Rows out = score_h;
  for (std::size_t i = 0; i < score_h.size(); ++i) {
    if (in[i].empty()) continue;
    std::vector<double> s;
    for (const auto& e : in[i])
      s.push_back(cls == RelationClass::Homogeneous ? homo_score(b, score_h, w, i, e.src, e.rel)
                                                   : hetero_score(b, score_h, w, i, e.src));
    const auto alpha = softmax(s);
    std::fill(out[i].begin(), out[i].end(), 0.0);
    for (std::size_t t = 0; t < in[i].size(); ++t) {
      const auto v = vm(value_h[in[i][t].src], w.v[b.types[in[i][t].src]]);
      for (std::size_t k = 0; k < v.size(); ++k) out[i][k] += alpha[t] * v[k];
    }
  }
  return out;
}

inline Rows sync(const GraphBatch& b, const Rows& h, const Weights& w) {
  const auto ho = class_aggregate(b, RelationClass::Homogeneous, h, h, w);
  const auto he = class_aggregate(b, RelationClass::Heterogeneous, h, h, w);
  Rows out;
  for (std::size_t i = 0; i < h.size(); ++i) {
    auto cat = ho[i];
    cat.insert(cat.end(), he[i].begin(), he[i].end());
    out.push_back(vm(cat, w.merge));
  }
  return out;
}

inline Rows phased(const GraphBatch& b, const Rows& h, const Weights& w, FusionOrder order, bool non_invasive) {
  const auto first = order == FusionOrder::HoHe ? RelationClass::Homogeneous : RelationClass::Heterogeneous;
  const auto second = order == FusionOrder::HoHe ? RelationClass::Heterogeneous : RelationClass::Homogeneous;
  const auto mid = class_aggregate(b, first, h, h, w);
  return class_aggregate(b, second, mid, non_invasive ? h : mid, w);
}

inline Rows han(const GraphBatch& b, const Rows& h, const Weights& w, Rows* beta_out = nullptr) {
  const auto hohe = phased(b, h, w, FusionOrder::HoHe, true);
  const auto heho = phased(b, h, w, FusionOrder::HeHo, true);
  Rows out;
  for (std::size_t i = 0; i < h.size(); ++i) {
    auto cat = hohe[i];
    cat.insert(cat.end(), heho[i].begin(), heho[i].end());
    auto hidden = vm(cat, w.gate_w1);
    for (std::size_t k = 0; k < hidden.size(); ++k) hidden[k] = leaky(hidden[k] + w.gate_b1.data[k]);
    auto logits = vm(hidden, w.gate_w2);
    for (std::size_t k = 0; k < 2; ++k) logits[k] += w.gate_b2.data[k];
    const auto beta = softmax(logits);
    if (beta_out) beta_out->push_back(beta);
    std::vector<double> o(hohe[i].size());
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = beta[0] * hohe[i][k] + beta[1] * heho[i][k];
    out.push_back(o);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ranking

/// Rank by sorting every candidate: descending logit, and among equal logits
/// the target goes last.
inline std::size_t sorted_rank(const std::vector<double>& logits, std::size_t target) {
  std::vector<std::size_t> order(logits.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    if ((a == target) != (b == target)) return b == target;
    return a < b;
  });
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), target) - order.begin()) + 1;
}

}  // namespace mmsr::oracle
