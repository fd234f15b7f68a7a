#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mmsr/autograd.hpp"
#include "mmsr/common.hpp"
#include "mmsr/dataset.hpp"
#include "mmsr/msgraph.hpp"

namespace mmsr {

struct EmbeddingDims {
  std::size_t d = 32;
  std::size_t type_dim = 0;      // 0 means d
  std::size_t position_dim = 0;  // 0 means d
  std::size_t max_positions = 50;

  std::size_t dt() const { return type_dim ? type_dim : d; }
  std::size_t dp() const { return position_dim ? position_dim : d; }
};

struct RepresentationOptions {
  bool use_type = true;
  bool use_position = true;
};

/// All lookup tables plus the merge map W of W[e_n; e_type; e_pos].
struct EmbeddingTables {
  EmbeddingDims dims;
  ad::Var item;        // |V| x d
  ad::Var image_code;  // c_image x d
  ad::Var text_code;   // c_text x d
  ad::Var type;        // 3 x d_t
  ad::Var position;    // m_max x d_p
  ad::Var merge;       // (d + d_t + d_p) x d

  std::vector<std::pair<std::string, ad::Var>> named() const {
    return {{"item", item}, {"image_code", image_code}, {"text_code", text_code},
            {"type", type}, {"position", position},     {"merge", merge}};
  }
};

/// Random tables are uniform in [-1/sqrt(d), 1/sqrt(d)]; code tables copy the
/// cluster centers, whose width must equal d.
inline EmbeddingTables init_tables(const EmbeddingDims& dims, std::size_t num_items, const Matrix& image_centers,
                                   const Matrix& text_centers, std::uint64_t seed) {
  const std::size_t d = dims.d;
  if (d == 0 || dims.max_positions == 0) throw InputError("init_tables: dimensions must be positive");
  for (const Matrix* c : {&image_centers, &text_centers})
    if (c->rows != 0 && c->cols != d) throw InputError("init_tables: codebook center dimension differs from d");
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  EmbeddingTables t;
  t.dims = dims;
  t.item = ad::parameter(uniform_matrix(num_items, d, bound, rng));
  t.image_code = ad::parameter(image_centers.rows ? image_centers : Matrix(0, d));
  t.text_code = ad::parameter(text_centers.rows ? text_centers : Matrix(0, d));
  t.type = ad::parameter(uniform_matrix(kNodeTypes, dims.dt(), bound, rng));
  t.position = ad::parameter(uniform_matrix(dims.max_positions, dims.dp(), bound, rng));
  t.merge = ad::parameter(uniform_matrix(d + dims.dt() + dims.dp(), d, bound, rng));
  return t;
}

/// Initial node states for every node of a batch, N x d. Disabled type or
/// position parts contribute zeros so the merge keeps its shape.
inline ad::Var node_repr(const GraphBatch& batch, const EmbeddingTables& t, const RepresentationOptions& opt = {}) {
  const std::size_t n = batch.num_nodes();
  auto base = ad::gather_typed({t.item, t.image_code, t.text_code}, batch.types, batch.refs);
  ad::Var type_part, pos_part;
  if (opt.use_type) {
    type_part = ad::gather_rows(t.type, {batch.types.begin(), batch.types.end()});
  } else {
    type_part = ad::constant(Matrix(n, t.dims.dt()));
  }
  if (opt.use_position) {
    std::vector<ad::RowTerm> terms;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ps = batch.positions[i];
      if (ps.empty()) throw InputError("node_repr: node without positions");
      const double w = 1.0 / static_cast<double>(ps.size());
      for (std::size_t p : ps) {
        if (p == 0 || p > t.dims.max_positions) throw InputError("node_repr: position exceeds the position table");
        terms.push_back({i, p - 1, w});
      }
    }
    pos_part = ad::combine_rows(t.position, std::move(terms), n);
  } else {
    pos_part = ad::constant(Matrix(n, t.dims.dp()));
  }
  return ad::matmul(ad::concat_cols({base, type_part, pos_part}), t.merge);
}

/// Representation of a single node given its key and position set.
inline std::vector<double> node_repr(const NodeKey& key, const std::vector<std::size_t>& positions,
                                     const EmbeddingTables& t, const RepresentationOptions& opt = {}) {
  GraphBatch b;
  b.types = {static_cast<std::uint8_t>(key.type)};
  b.refs = {key.id};
  b.positions = {positions};
  ad::NoGradGuard guard;
  auto out = node_repr(b, t, opt);
  return out->value.data;
}

/// Channel rows of the 3 x m x d embedding tensor of a prefix. Multi-code
/// modalities average their code embeddings; a missing modality is a zero
/// row with its flag cleared.
struct BaseTensor {
  ad::Var item;
  ad::Var image;
  ad::Var text;
  std::vector<char> image_present;
  std::vector<char> text_present;
};

inline ad::Var mean_code_rows(const ad::Var& table, const std::vector<std::size_t>& prefix, const ItemCodes& codes,
                              std::vector<char>& present) {
  std::vector<ad::RowTerm> terms;
  present.assign(prefix.size(), 0);
  for (std::size_t p = 0; p < prefix.size(); ++p) {
    if (prefix[p] >= codes.size() || !codes[prefix[p]]) continue;
    const auto& list = *codes[prefix[p]];
    present[p] = 1;
    for (std::size_t c : list) terms.push_back({p, c, 1.0 / static_cast<double>(list.size())});
  }
  return ad::combine_rows(table, std::move(terms), prefix.size());
}

inline BaseTensor base_tensor(const std::vector<std::size_t>& prefix, const ItemCodes& image, const ItemCodes& text,
                              const EmbeddingTables& t) {
  BaseTensor out;
  out.item = ad::gather_rows(t.item, prefix);
  out.image = mean_code_rows(t.image_code, prefix, image, out.image_present);
  out.text = mean_code_rows(t.text_code, prefix, text, out.text_present);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "MMSRCKPT", u32 version, then until EOF per tensor
// u32 name length, UTF-8 name, u32 rank, u32 dims[rank], f32 data.

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Matrix>>;

inline void write_checkpoint(std::ostream& out, const NamedTensors& tensors) {
  out.write("MMSRCKPT", 8);
  detail::write_u32(out, kCheckpointVersion);
  for (const auto& [name, m] : tensors) {
    detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(out, 2);
    detail::write_u32(out, static_cast<std::uint32_t>(m.rows));
    detail::write_u32(out, static_cast<std::uint32_t>(m.cols));
    for (double v : m.data) detail::write_f32(out, v);
  }
}

inline NamedTensors read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "MMSRCKPT", 8) != 0) throw InputError("checkpoint: bad magic");
  if (detail::read_u32(in) != kCheckpointVersion) throw InputError("checkpoint: unsupported version");
  NamedTensors out;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = detail::read_u32(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw InputError("checkpoint: truncated name");
    const std::uint32_t rank = detail::read_u32(in);
    if (rank == 0 || rank > 2) throw InputError("checkpoint: unsupported rank for '" + name + "'");
    std::size_t rows = 1, cols = detail::read_u32(in);
    if (rank == 2) rows = std::exchange(cols, detail::read_u32(in));
    Matrix m(rows, cols);
    for (double& v : m.data) v = detail::read_f32(in);
    out.emplace_back(std::move(name), std::move(m));
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  write_checkpoint(out, tensors);
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace mmsr
