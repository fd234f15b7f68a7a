#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmsr/common.hpp"

namespace mmsr {

enum class NodeType : std::uint8_t { Item = 0, ImageCode = 1, TextCode = 2 };

inline constexpr std::size_t kNodeTypes = 3;

inline const char* node_type_name(NodeType t) {
  switch (t) {
    case NodeType::Item: return "item";
    case NodeType::ImageCode: return "image";
    case NodeType::TextCode: return "text";
  }
  return "?";
}

enum class Relation : std::uint8_t { TransitionIn = 0, TransitionOut = 1, BiDirectional = 2, SelfLoop = 3, CrossModal = 4 };

/// Relations with their own attention vector in homogeneous scoring.
inline constexpr std::size_t kHomogeneousRelations = 4;

inline const char* relation_name(Relation r) {
  switch (r) {
    case Relation::TransitionIn: return "transition_in";
    case Relation::TransitionOut: return "transition_out";
    case Relation::BiDirectional: return "bidirectional";
    case Relation::SelfLoop: return "self_loop";
    case Relation::CrossModal: return "cross_modal";
  }
  return "?";
}

inline bool is_homogeneous(Relation r) { return r != Relation::CrossModal; }

/// Identifies a node: an item index into the catalog or a code index into a
/// channel's codebook.
struct NodeKey {
  NodeType type = NodeType::Item;
  std::size_t id = 0;

  friend auto operator<=>(const NodeKey&, const NodeKey&) = default;
};

struct GraphNode {
  NodeKey key;
  /// 1-based sequence positions, ascending.
  std::vector<std::size_t> positions;
};

struct Edge {
  std::size_t src = 0;
  Relation rel = Relation::SelfLoop;
  std::size_t dst = 0;

  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Per-item code lists for one channel; an empty optional marks a missing
/// modality.
using ItemCodes = std::vector<std::optional<std::vector<std::size_t>>>;

struct GraphOptions {
  /// Add CrossModal edges between image and text code nodes of an item.
  bool image_text_edges = true;
};

/// Modality-enriched sequence graph for one prefix.
struct MSGraph {
  std::vector<GraphNode> nodes;
  /// Sorted by (src, rel, dst), no duplicates.
  std::vector<Edge> edges;
  std::size_t last_item = 0;

  std::size_t find(const NodeKey& key) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].key == key) return i;
    throw InputError("node not in graph");
  }

  std::size_t count(NodeType t) const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [t](const GraphNode& n) { return n.key.type == t; }));
  }
};

/// Builds the graph of `prefix` (item indices). `image` and `text` map item
/// indices to code lists; pass empty vectors to omit a channel entirely.
///
/// Transitions connect every node of one present position to every node of
/// the next present position in the same channel; positions where a channel
/// is missing are skipped. A node repeated at adjacent positions gets no
/// transition edge to itself, its self-loop covers that case.
inline MSGraph build_graph(const std::vector<std::size_t>& prefix, const ItemCodes& image, const ItemCodes& text,
                           const GraphOptions& opt = {}) {
  if (prefix.empty()) throw InputError("build_graph: empty prefix");
  MSGraph g;
  std::map<NodeKey, std::size_t> index;
  auto node_for = [&](NodeKey key, std::size_t pos) {
    auto [it, inserted] = index.emplace(key, g.nodes.size());
    if (inserted) g.nodes.push_back({key, {}});
    auto& ps = g.nodes[it->second].positions;
    if (ps.empty() || ps.back() != pos) ps.push_back(pos);
    return it->second;
  };

  const std::size_t m = prefix.size();
  // per_position[p][channel] = node indices of that channel at position p
  std::vector<std::array<std::vector<std::size_t>, kNodeTypes>> per_position(m);
  const ItemCodes* channels[2] = {&image, &text};
  for (std::size_t p = 0; p < m; ++p) {
    const std::size_t item = prefix[p];
    per_position[p][0].push_back(node_for({NodeType::Item, item}, p + 1));
    for (std::size_t ch = 0; ch < 2; ++ch) {
      const ItemCodes& codes = *channels[ch];
      if (item >= codes.size() || !codes[item]) continue;
      for (std::size_t code : *codes[item])
        per_position[p][ch + 1].push_back(node_for({static_cast<NodeType>(ch + 1), code}, p + 1));
    }
  }
  g.last_item = per_position[m - 1][0].front();

  std::set<std::pair<std::size_t, std::size_t>> transitions;
  for (std::size_t ch = 0; ch < kNodeTypes; ++ch) {
    const std::vector<std::size_t>* prev = nullptr;
    for (std::size_t p = 0; p < m; ++p) {
      const auto& cur = per_position[p][ch];
      if (cur.empty()) continue;
      if (prev)
        for (std::size_t u : *prev)
          for (std::size_t w : cur)
            if (u != w) transitions.emplace(u, w);
      prev = &cur;
    }
  }

  std::set<Edge> edges;
  for (const auto& [u, w] : transitions) {
    if (transitions.count({w, u})) {
      edges.insert({u, Relation::BiDirectional, w});
      edges.insert({w, Relation::BiDirectional, u});
    } else {
      edges.insert({u, Relation::TransitionOut, w});
      edges.insert({w, Relation::TransitionIn, u});
    }
  }
  for (std::size_t i = 0; i < g.nodes.size(); ++i) edges.insert({i, Relation::SelfLoop, i});
  for (std::size_t p = 0; p < m; ++p) {
    const auto& at = per_position[p];
    for (std::size_t a = 0; a < kNodeTypes; ++a)
      for (std::size_t b = a + 1; b < kNodeTypes; ++b) {
        if (a == 1 && b == 2 && !opt.image_text_edges) continue;
        for (std::size_t u : at[a])
          for (std::size_t w : at[b]) {
            edges.insert({u, Relation::CrossModal, w});
            edges.insert({w, Relation::CrossModal, u});
          }
      }
  }
  g.edges.assign(edges.begin(), edges.end());
  return g;
}

struct NeighborSets {
  /// (source node, relation) of homogeneous in-edges, self-loop included.
  std::vector<std::pair<std::size_t, Relation>> homogeneous;
  std::vector<std::size_t> heterogeneous;
};

inline NeighborSets neighbor_sets(const MSGraph& g, std::size_t node) {
  if (node >= g.nodes.size()) throw InputError("neighbor_sets: unknown node");
  NeighborSets out;
  for (const auto& e : g.edges) {
    if (e.dst != node) continue;
    if (is_homogeneous(e.rel))
      out.homogeneous.emplace_back(e.src, e.rel);
    else
      out.heterogeneous.push_back(e.src);
  }
  return out;
}

/// Debug dump: nodes with type, id and positions; edges by node index.
inline nlohmann::json graph_to_json(const MSGraph& g, const std::vector<std::string>* item_ids = nullptr) {
  nlohmann::json nodes = nlohmann::json::array(), edges = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nlohmann::json id = n.key.id;
    if (item_ids && n.key.type == NodeType::Item) id = (*item_ids)[n.key.id];
    nodes.push_back({{"type", node_type_name(n.key.type)}, {"id", id}, {"positions", n.positions}});
  }
  for (const auto& e : g.edges) edges.push_back({{"src", e.src}, {"rel", relation_name(e.rel)}, {"dst", e.dst}});
  return {{"nodes", nodes}, {"edges", edges}, {"last_item", g.last_item}};
}

/// Edge list of one relation class in a GraphBatch.
struct EdgeList {
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;
  std::vector<Relation> rel;

  std::size_t size() const { return src.size(); }
};

/// Disjoint union of several graphs, flattened for batched propagation.
struct GraphBatch {
  std::vector<std::uint8_t> types;
  /// Row in the embedding table of the node's type.
  std::vector<std::size_t> refs;
  std::vector<std::vector<std::size_t>> positions;
  EdgeList homogeneous;
  EdgeList heterogeneous;
  /// Node index of each graph's last item.
  std::vector<std::size_t> last_items;
  std::vector<std::size_t> graph_offsets;

  std::size_t num_nodes() const { return types.size(); }
  std::size_t num_graphs() const { return last_items.size(); }

  void append(const MSGraph& g) {
    const std::size_t base = types.size();
    graph_offsets.push_back(base);
    for (const auto& n : g.nodes) {
      types.push_back(static_cast<std::uint8_t>(n.key.type));
      refs.push_back(n.key.id);
      positions.push_back(n.positions);
    }
    for (const auto& e : g.edges) {
      EdgeList& list = is_homogeneous(e.rel) ? homogeneous : heterogeneous;
      list.src.push_back(base + e.src);
      list.dst.push_back(base + e.dst);
      list.rel.push_back(e.rel);
    }
    last_items.push_back(base + g.last_item);
  }

  static GraphBatch of(const std::vector<const MSGraph*>& graphs) {
    GraphBatch b;
    for (const auto* g : graphs) b.append(*g);
    return b;
  }

  static GraphBatch of(const MSGraph& g) { return of(std::vector<const MSGraph*>{&g}); }
};

}  // namespace mmsr
