#pragma once

// Tape-free reverse-mode differentiation over dense row-major matrices.
//
// Every op returns a shared node that keeps its parents alive and owns a
// closure propagating its gradient into them. backward() sorts the reachable
// subgraph topologically and runs the closures in reverse. Leaves created with
// parameter() accumulate gradients across calls until zero_grad().

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "mmsr/common.hpp"

namespace mmsr::ad {

struct Node {
  Matrix value;
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  std::uint64_t mark = 0;

  std::size_t rows() const { return value.rows; }
  std::size_t cols() const { return value.cols; }

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using Var = std::shared_ptr<Node>;

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::uint64_t next_mark() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_mode()) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    if (needs) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(bw);
    }
  }
  return node;
}

// C(n x m) += A(n x k) * B(k x m)
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// C(n x m) += A(n x k) * B(m x k)^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C(k x m) += A(n x k)^T * B(n x m)
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * bi[j];
    }
  }
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw InputError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline Var constant(Matrix m) {
  auto node = std::make_shared<Node>();
  node->value = std::move(m);
  return node;
}

inline Var parameter(Matrix m) {
  auto node = std::make_shared<Node>();
  node->value = std::move(m);
  node->requires_grad = true;
  node->ensure_grad();
  return node;
}

/// Runs reverse accumulation from `root`, seeding its gradient with ones.
inline void backward(const Var& root) {
  if (!root->requires_grad) return;
  const std::uint64_t mark = detail::next_mark();
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  root->mark = mark;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && p->mark != mark) {
        p->mark = mark;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& g = root->ensure_grad();
  std::fill(g.begin(), g.end(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a->cols() != b->rows()) throw InputError("matmul: inner dimension mismatch");
  const std::size_t n = a->rows(), k = a->cols(), m = b->cols();
  Matrix out(n, m);
  detail::gemm_nn(a->value.data.data(), b->value.data.data(), out.data.data(), n, k, m);
  return detail::make_op(std::move(out), {a, b}, [n, k, m](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    if (a.requires_grad) detail::gemm_nt(self.grad.data(), b.value.data.data(), a.ensure_grad().data(), n, m, k);
    if (b.requires_grad) detail::gemm_tn(a.value.data.data(), self.grad.data(), b.ensure_grad().data(), n, k, m);
  });
}

/// a * b^T for a (n x k) and b (m x k).
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a->cols() != b->cols()) throw InputError("matmul_nt: inner dimension mismatch");
  const std::size_t n = a->rows(), k = a->cols(), m = b->rows();
  Matrix out(n, m);
  detail::gemm_nt(a->value.data.data(), b->value.data.data(), out.data.data(), n, k, m);
  return detail::make_op(std::move(out), {a, b}, [n, k, m](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    if (a.requires_grad) detail::gemm_nn(self.grad.data(), b.value.data.data(), a.ensure_grad().data(), n, m, k);
    if (b.requires_grad) detail::gemm_tn(self.grad.data(), a.value.data.data(), b.ensure_grad().data(), n, m, k);
  });
}

/// Row i of the output is h_i * weights[types[i]].
inline Var typed_matmul(const Var& h, const std::vector<Var>& weights, std::vector<std::uint8_t> types) {
  const std::size_t n = h->rows(), k = h->cols();
  if (types.size() != n) throw InputError("typed_matmul: types size mismatch");
  if (weights.empty()) throw InputError("typed_matmul: no weights");
  const std::size_t m = weights.front()->cols();
  for (const auto& w : weights)
    if (w->rows() != k || w->cols() != m) throw InputError("typed_matmul: weight shape mismatch");
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    if (types[i] >= weights.size()) throw InputError("typed_matmul: type out of range");
    detail::gemm_nn(h->value.data.data() + i * k, weights[types[i]]->value.data.data(), out.data.data() + i * m, 1, k,
                    m);
  }
  std::vector<Var> parents{h};
  parents.insert(parents.end(), weights.begin(), weights.end());
  return detail::make_op(std::move(out), std::move(parents), [n, k, m, types = std::move(types)](Node& self) {
    Node& h = *self.parents[0];
    for (std::size_t i = 0; i < n; ++i) {
      Node& w = *self.parents[1 + types[i]];
      const double* g = self.grad.data() + i * m;
      if (h.requires_grad) detail::gemm_nt(g, w.value.data.data(), h.ensure_grad().data() + i * k, 1, m, k);
      if (w.requires_grad) detail::gemm_tn(h.value.data.data() + i * k, g, w.ensure_grad().data(), 1, k, m);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  Matrix out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  Matrix out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b->value.data[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "hadamard");
  Matrix out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b->value.data[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    if (a.requires_grad) {
      auto& g = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.value.data[i];
    }
    if (b.requires_grad) {
      auto& g = b.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.value.data[i];
    }
  });
}

/// scale * a + shift
inline Var affine(const Var& a, double scale, double shift = 0.0) {
  Matrix out = a->value;
  for (double& v : out.data) v = scale * v + shift;
  return detail::make_op(std::move(out), {a}, [scale](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * self.grad[i];
  });
}

/// Adds a 1 x c bias row to every row of a.
inline Var add_row(const Var& a, const Var& bias) {
  if (bias->rows() != 1 || bias->cols() != a->cols()) throw InputError("add_row: bias shape mismatch");
  Matrix out = a->value;
  const std::size_t c = a->cols();
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out.data[r * c + j] += bias->value.data[j];
  return detail::make_op(std::move(out), {a, bias}, [c](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    if (a.requires_grad) {
      auto& g = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad) {
      auto& g = b.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
    }
  });
}

inline Var leaky_relu(const Var& a, double slope = 0.01) {
  Matrix out = a->value;
  for (double& v : out.data) v = v > 0.0 ? v : slope * v;
  return detail::make_op(std::move(out), {a}, [slope](Node& self) {
    Node& a = *self.parents[0];
    auto& g = a.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (a.value.data[i] > 0.0 ? 1.0 : slope);
  });
}

inline Var sigmoid(const Var& a) {
  Matrix out = a->value;
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.value.data[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

inline Var tanh(const Var& a) {
  Matrix out = a->value;
  for (double& v : out.data) v = std::tanh(v);
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = self.value.data[i];
      g[i] += self.grad[i] * (1.0 - t * t);
    }
  });
}

/// Multiplies by a fixed mask scaled by 1/(1-rate); identity when rate == 0.
inline Var dropout(const Var& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw InputError("dropout: rate must be < 1");
  std::vector<double> mask(a->value.size());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask) m = uniform01(rng) < rate ? 0.0 : keep;
  Matrix out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask[i];
  return detail::make_op(std::move(out), {a}, [mask = std::move(mask)](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Shape and indexing

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InputError("concat_cols: no inputs");
  const std::size_t n = parts.front()->rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p->rows() != n) throw InputError("concat_cols: row mismatch");
    total += p->cols();
  }
  Matrix out(n, total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p->cols();
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(p->value.data.data() + r * c, c, out.data.data() + r * total + offset);
    offset += c;
  }
  return detail::make_op(std::move(out), parts, [n, total](Node& self) {
    std::size_t offset = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      const std::size_t c = p.cols();
      if (p.requires_grad) {
        auto& g = p.ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[r * total + offset + j];
      }
      offset += c;
    }
  });
}

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  const std::size_t n = a->rows(), c = a->cols();
  if (begin + count > c) throw InputError("slice_cols: out of range");
  Matrix out(n, count);
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(a->value.data.data() + r * c + begin, count, out.data.data() + r * count);
  return detail::make_op(std::move(out), {a}, [n, c, begin, count](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < count; ++j) g[r * c + begin + j] += self.grad[r * count + j];
  });
}

inline Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
  const std::size_t c = a->cols();
  Matrix out(idx.size(), c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a->rows()) throw InputError("gather_rows: index out of range");
    std::copy_n(a->value.data.data() + idx[i] * c, c, out.data.data() + i * c);
  }
  return detail::make_op(std::move(out), {a}, [c, idx = std::move(idx)](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
  });
}

/// Row i is row refs[i] of tables[types[i]]; all tables share a width.
inline Var gather_typed(const std::vector<Var>& tables, std::vector<std::uint8_t> types, std::vector<std::size_t> refs) {
  if (types.size() != refs.size()) throw InputError("gather_typed: size mismatch");
  const std::size_t c = tables.front()->cols();
  for (const auto& t : tables)
    if (t->cols() != c) throw InputError("gather_typed: table width mismatch");
  Matrix out(types.size(), c);
  for (std::size_t i = 0; i < types.size(); ++i) {
    if (types[i] >= tables.size() || refs[i] >= tables[types[i]]->rows())
      throw InputError("gather_typed: index out of range");
    std::copy_n(tables[types[i]]->value.data.data() + refs[i] * c, c, out.data.data() + i * c);
  }
  return detail::make_op(std::move(out), tables, [c, types = std::move(types), refs = std::move(refs)](Node& self) {
    for (std::size_t i = 0; i < types.size(); ++i) {
      Node& t = *self.parents[types[i]];
      if (!t.requires_grad) continue;
      auto& g = t.ensure_grad();
      for (std::size_t j = 0; j < c; ++j) g[refs[i] * c + j] += self.grad[i * c + j];
    }
  });
}

/// Sparse row combination: out[e.out] += e.weight * a[e.in].
struct RowTerm {
  std::size_t out;
  std::size_t in;
  double weight;
};

inline Var combine_rows(const Var& a, std::vector<RowTerm> terms, std::size_t out_rows) {
  const std::size_t c = a->cols();
  Matrix out(out_rows, c);
  for (const auto& t : terms) {
    if (t.out >= out_rows || t.in >= a->rows()) throw InputError("combine_rows: index out of range");
    const double* src = a->value.data.data() + t.in * c;
    double* dst = out.data.data() + t.out * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += t.weight * src[j];
  }
  return detail::make_op(std::move(out), {a}, [c, terms = std::move(terms)](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (const auto& t : terms)
      for (std::size_t j = 0; j < c; ++j) g[t.in * c + j] += t.weight * self.grad[t.out * c + j];
  });
}

/// Row i is a_i when mask[i] is set, otherwise b_i.
inline Var where_rows(std::vector<char> mask, const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "where_rows");
  if (mask.size() != a->rows()) throw InputError("where_rows: mask size mismatch");
  const std::size_t c = a->cols();
  Matrix out = b->value;
  for (std::size_t r = 0; r < mask.size(); ++r)
    if (mask[r]) std::copy_n(a->value.data.data() + r * c, c, out.data.data() + r * c);
  return detail::make_op(std::move(out), {a, b}, [c, mask = std::move(mask)](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      const bool want = (k == 0);
      for (std::size_t r = 0; r < mask.size(); ++r)
        if (static_cast<bool>(mask[r]) == want)
          for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[r * c + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and row-wise products

/// Row-wise inner products, n x 1.
inline Var row_dot(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "row_dot");
  const std::size_t n = a->rows(), c = a->cols();
  Matrix out(n, 1);
  for (std::size_t r = 0; r < n; ++r) out.data[r] = dot(a->value.row(r), b->value.row(r));
  return detail::make_op(std::move(out), {a, b}, [n, c](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    if (a.requires_grad) {
      auto& g = a.ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[r] * b.value.data[r * c + j];
    }
    if (b.requires_grad) {
      auto& g = b.ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[r] * a.value.data[r * c + j];
    }
  });
}

/// Multiplies row r of a by s[r] where s is n x 1.
inline Var scale_rows(const Var& a, const Var& s) {
  if (s->rows() != a->rows() || s->cols() != 1) throw InputError("scale_rows: shape mismatch");
  const std::size_t n = a->rows(), c = a->cols();
  Matrix out = a->value;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out.data[r * c + j] *= s->value.data[r];
  return detail::make_op(std::move(out), {a, s}, [n, c](Node& self) {
    Node& a = *self.parents[0];
    Node& s = *self.parents[1];
    if (a.requires_grad) {
      auto& g = a.ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[r * c + j] * s.value.data[r];
    }
    if (s.requires_grad) {
      auto& g = s.ensure_grad();
      for (std::size_t r = 0; r < n; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += self.grad[r * c + j] * a.value.data[r * c + j];
        g[r] += acc;
      }
    }
  });
}

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a->value.data) s += v;
  return detail::make_op(Matrix(1, 1, s), {a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

inline Var softmax_rows(const Var& a) {
  const std::size_t n = a->rows(), c = a->cols();
  Matrix out = a->value;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) z += (v = std::exp(v - mx));
    for (double& v : row) v /= z;
  }
  return detail::make_op(std::move(out), {a}, [n, c](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data.data() + r * c;
      const double* gy = self.grad.data() + r * c;
      double inner = 0.0;
      for (std::size_t j = 0; j < c; ++j) inner += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (gy[j] - inner);
    }
  });
}

/// Mean softmax cross-entropy of each row against its target column, 1 x 1.
inline Var cross_entropy(const Var& logits, std::vector<std::size_t> targets) {
  const std::size_t n = logits->rows(), c = logits->cols();
  if (targets.size() != n) throw InputError("cross_entropy: target count mismatch");
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= c) throw InputError("cross_entropy: target out of range");
    const double* x = logits->value.data.data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[r * c + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    loss += -(x[targets[r]] - mx - std::log(z));
  }
  loss /= static_cast<double>(n);
  return detail::make_op(Matrix(1, 1, loss), {logits},
                         [n, c, probs = std::move(probs), targets = std::move(targets)](Node& self) {
                           auto& g = self.parents[0]->ensure_grad();
                           const double s = self.grad[0] / static_cast<double>(n);
                           for (std::size_t r = 0; r < n; ++r) {
                             for (std::size_t j = 0; j < c; ++j) g[r * c + j] += s * probs[r * c + j];
                             g[r * c + targets[r]] -= s;
                           }
                         });
}

// ---------------------------------------------------------------------------
// Edge-list attention primitives

/// Softmax of per-edge scores (E x 1) within groups sharing a segment id.
inline Var segment_softmax(const Var& scores, std::vector<std::size_t> segment, std::size_t num_segments) {
  const std::size_t e = scores->rows();
  if (scores->cols() != 1 || segment.size() != e) throw InputError("segment_softmax: shape mismatch");
  std::vector<double> mx(num_segments, -INFINITY), z(num_segments, 0.0);
  for (std::size_t i = 0; i < e; ++i) mx[segment[i]] = std::max(mx[segment[i]], scores->value.data[i]);
  Matrix out(e, 1);
  for (std::size_t i = 0; i < e; ++i) z[segment[i]] += (out.data[i] = std::exp(scores->value.data[i] - mx[segment[i]]));
  for (std::size_t i = 0; i < e; ++i) out.data[i] /= z[segment[i]];
  return detail::make_op(std::move(out), {scores}, [num_segments, segment = std::move(segment)](Node& self) {
    std::vector<double> inner(num_segments, 0.0);
    for (std::size_t i = 0; i < segment.size(); ++i) inner[segment[i]] += self.value.data[i] * self.grad[i];
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < segment.size(); ++i)
      g[i] += self.value.data[i] * (self.grad[i] - inner[segment[i]]);
  });
}

/// out[dst[e]] += weight[e] * values[src[e]], producing out_rows x d.
inline Var edge_aggregate(const Var& weight, const Var& values, std::vector<std::size_t> src,
                          std::vector<std::size_t> dst, std::size_t out_rows) {
  const std::size_t e = weight->rows(), d = values->cols();
  if (weight->cols() != 1 || src.size() != e || dst.size() != e) throw InputError("edge_aggregate: shape mismatch");
  Matrix out(out_rows, d);
  for (std::size_t i = 0; i < e; ++i) {
    const double w = weight->value.data[i];
    const double* v = values->value.data.data() + src[i] * d;
    double* o = out.data.data() + dst[i] * d;
    for (std::size_t j = 0; j < d; ++j) o[j] += w * v[j];
  }
  return detail::make_op(std::move(out), {weight, values},
                         [d, src = std::move(src), dst = std::move(dst)](Node& self) {
                           Node& w = *self.parents[0];
                           Node& v = *self.parents[1];
                           for (std::size_t i = 0; i < src.size(); ++i) {
                             const double* go = self.grad.data() + dst[i] * d;
                             if (w.requires_grad) {
                               double acc = 0.0;
                               const double* vv = v.value.data.data() + src[i] * d;
                               for (std::size_t j = 0; j < d; ++j) acc += go[j] * vv[j];
                               w.ensure_grad()[i] += acc;
                             }
                             if (v.requires_grad) {
                               double* gv = v.ensure_grad().data() + src[i] * d;
                               const double wi = w.value.data[i];
                               for (std::size_t j = 0; j < d; ++j) gv[j] += wi * go[j];
                             }
                           }
                         });
}

}  // namespace mmsr::ad
