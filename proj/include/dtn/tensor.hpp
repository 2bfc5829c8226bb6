#pragma once

#include <cmath>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtn/errors.hpp"
#include "dtn/rng.hpp"

namespace dtn {

// Shapes are rank-1 vectors or rank-2 row-major matrices.  Scalars are
// vectors of length 1.
struct Shape {
  int rank = 1;
  size_t d0 = 0;
  size_t d1 = 1;

  static Shape vec(size_t n) { return Shape{1, n, 1}; }
  static Shape mat(size_t r, size_t c) { return Shape{2, r, c}; }
  static Shape scalar() { return Shape{1, 1, 1}; }

  size_t size() const { return rank == 1 ? d0 : d0 * d1; }
  size_t rows() const { return d0; }
  size_t cols() const { return d1; }

  bool operator==(const Shape& o) const {
    return rank == o.rank && d0 == o.d0 && (rank == 1 || d1 == o.d1);
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    if (rank == 1) return "[" + std::to_string(d0) + "]";
    return "[" + std::to_string(d0) + "x" + std::to_string(d1) + "]";
  }
};

// A named trainable buffer.  Values and gradients live outside any tape;
// tapes alias them through leaf nodes so backward passes accumulate
// straight into `grad`.
struct Tensor {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), value(s.size(), 0.0), grad(s.size(), 0.0) {}

  size_t size() const { return shape.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  double& at(size_t i) { return value[i]; }
  double& at(size_t r, size_t c) { return value[r * shape.d1 + c]; }
};

namespace detail {

// Bump allocator for tape-lifetime buffers.  reset() rewinds without
// freeing, so steady-state training does no per-batch allocation.
class Arena {
 public:
  std::span<double> alloc(size_t n) {
    if (n == 0) return {};
    while (block_ < blocks_.size() && off_ + n > caps_[block_]) {
      ++block_;
      off_ = 0;
    }
    if (block_ == blocks_.size()) {
      size_t cap = std::max(kBlock, n);
      blocks_.push_back(std::make_unique<double[]>(cap));
      caps_.push_back(cap);
      off_ = 0;
    }
    std::span<double> out(blocks_[block_].get() + off_, n);
    off_ += n;
    return out;
  }

  void reset() {
    block_ = 0;
    off_ = 0;
  }

 private:
  static constexpr size_t kBlock = 1 << 16;
  std::vector<std::unique_ptr<double[]>> blocks_;
  std::vector<size_t> caps_;
  size_t block_ = 0;
  size_t off_ = 0;
};

}  // namespace detail

class Tape;

// Handle to a tape node.  Valid until the owning tape is reset.
struct Var {
  int id = -1;
  uint32_t epoch = 0;
};

class Tape {
  enum class Op : uint8_t {
    Leaf,
    Const,
    View,     // slice/row into a parent's storage
    Matmul,
    Affine,   // y = b + sum_j x_j * M_j
    Add,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Blend,    // (1-g)*a + g*b
    Concat,
    Rows,     // gather rows of a matrix
    MeanRows,
    Dropout,
    SoftmaxCE,
    L2Diff,
    Sum,
  };

  struct Node {
    Op op;
    int in[7] = {-1, -1, -1, -1, -1, -1, -1};
    int i0 = 0;                      // gold index / offset / pair count / freeze id
    double x = 0.0;                  // scale factor / keep probability
    int aux_off = 0, aux_len = 0;    // window into aux_i_
    Shape shape;
    std::span<double> val;
    std::span<double> grad;
    std::span<double> scratch;       // softmax probs, dropout mask
  };

 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void reset() {
    nodes_.clear();
    aux_i_.clear();
    leaf_cache_.clear();
    arena_.reset();
    ++epoch_;
  }

  size_t node_count() const { return nodes_.size(); }

  // ---- node constructors -------------------------------------------------

  Var leaf(Tensor& t) {
    auto it = leaf_cache_.find(&t);
    if (it != leaf_cache_.end()) return Var{it->second, epoch_};
    Node n;
    n.op = Op::Leaf;
    n.shape = t.shape;
    n.val = std::span<double>(t.value.data(), t.value.size());
    n.grad = std::span<double>(t.grad.data(), t.grad.size());
    Var v = push(std::move(n));
    leaf_cache_.emplace(&t, v.id);
    return v;
  }

  Var constant(Shape s, const double* data) {
    Node n;
    n.op = Op::Const;
    n.shape = s;
    n.val = arena_.alloc(s.size());
    n.grad = arena_.alloc(s.size());
    if (data)
      std::memcpy(n.val.data(), data, s.size() * sizeof(double));
    else
      std::fill(n.val.begin(), n.val.end(), 0.0);
    return push(std::move(n));
  }

  Var zeros(Shape s) { return constant(s, nullptr); }

  Var matmul(Var a, Var b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.shape.rank != 2 || nb.shape.rank != 2 || na.shape.cols() != nb.shape.rows())
      throw DimensionError("matmul: incompatible shapes " + na.shape.str() + " x " +
                           nb.shape.str());
    Node n;
    n.op = Op::Matmul;
    n.in[0] = a.id;
    n.in[1] = b.id;
    n.shape = Shape::mat(na.shape.rows(), nb.shape.cols());
    alloc_out(n);
    const size_t m = na.shape.rows(), k = na.shape.cols(), c = nb.shape.cols();
    const double* A = na.val.data();
    const double* B = nb.val.data();
    double* C = n.val.data();
    std::fill(n.val.begin(), n.val.end(), 0.0);
    for (size_t i = 0; i < m; ++i)
      for (size_t p = 0; p < k; ++p) {
        double av = A[i * k + p];
        const double* brow = B + p * c;
        double* crow = C + i * c;
        for (size_t j = 0; j < c; ++j) crow[j] += av * brow[j];
      }
    return push(std::move(n));
  }

  // y = b + sum_j x_j * M_j   with x_j rank-1 [k_j], M_j [k_j x n], b [n].
  Var affine(std::initializer_list<std::pair<Var, Var>> terms, Var bias) {
    Node nb;
    const Node& b = node(bias);
    if (b.shape.rank != 1) throw DimensionError("affine: bias must be rank-1");
    const size_t out_dim = b.shape.size();
    nb.op = Op::Affine;
    nb.shape = Shape::vec(out_dim);
    nb.i0 = static_cast<int>(terms.size());
    if (terms.size() > 3) throw DimensionError("affine: at most 3 terms");
    int slot = 0;
    for (const auto& [x, m] : terms) {
      const Node& nx = node(x);
      const Node& nm = node(m);
      if (nx.shape.rank != 1 || nm.shape.rank != 2 || nm.shape.rows() != nx.shape.size() ||
          nm.shape.cols() != out_dim)
        throw DimensionError("affine: term shapes " + nx.shape.str() + " x " +
                             nm.shape.str() + " -> [" + std::to_string(out_dim) + "]");
      nb.in[slot++] = x.id;
      nb.in[slot++] = m.id;
    }
    nb.in[6] = bias.id;
    alloc_out(nb);
    double* y = nb.val.data();
    std::memcpy(y, b.val.data(), out_dim * sizeof(double));
    for (int t = 0; t < nb.i0; ++t) {
      const Node& nx = node_by_id(nb.in[2 * t]);
      const Node& nm = node_by_id(nb.in[2 * t + 1]);
      const size_t k = nx.shape.size();
      const double* xv = nx.val.data();
      const double* mv = nm.val.data();
      for (size_t i = 0; i < k; ++i) {
        double xi = xv[i];
        if (xi == 0.0) continue;
        const double* mrow = mv + i * out_dim;
        for (size_t j = 0; j < out_dim; ++j) y[j] += xi * mrow[j];
      }
    }
    return push(std::move(nb));
  }

  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }

  Var scale(Var a, double c) {
    const Node& na = node(a);
    Node n;
    n.op = Op::Scale;
    n.in[0] = a.id;
    n.x = c;
    n.shape = na.shape;
    alloc_out(n);
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = c * na.val[i];
    return push(std::move(n));
  }

  Var sigmoid(Var a) {
    const Node& na = node(a);
    Node n;
    n.op = Op::Sigmoid;
    n.in[0] = a.id;
    n.shape = na.shape;
    alloc_out(n);
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = stable_sigmoid(na.val[i]);
    return push(std::move(n));
  }

  Var tanh(Var a) {
    const Node& na = node(a);
    Node n;
    n.op = Op::Tanh;
    n.in[0] = a.id;
    n.shape = na.shape;
    alloc_out(n);
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::tanh(na.val[i]);
    return push(std::move(n));
  }

  // (1 - g) * a + g * b, elementwise.  g is either same-shape or a scalar.
  Var blend(Var g, Var a, Var b) {
    const Node& ng = node(g);
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.shape != nb.shape)
      throw DimensionError("blend: branch shapes differ " + na.shape.str() + " vs " +
                           nb.shape.str());
    bool scalar_gate = ng.shape.size() == 1;
    if (!scalar_gate && ng.shape != na.shape)
      throw DimensionError("blend: gate shape " + ng.shape.str() + " vs " + na.shape.str());
    Node n;
    n.op = Op::Blend;
    n.in[0] = g.id;
    n.in[1] = a.id;
    n.in[2] = b.id;
    n.shape = na.shape;
    alloc_out(n);
    for (size_t i = 0; i < n.val.size(); ++i) {
      double gv = scalar_gate ? ng.val[0] : ng.val[i];
      n.val[i] = (1.0 - gv) * na.val[i] + gv * nb.val[i];
    }
    return push(std::move(n));
  }

  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat: no parts");
    size_t total = 0;
    for (Var p : parts) {
      const Node& np = node(p);
      if (np.shape.rank != 1) throw DimensionError("concat: rank-1 parts required, got " + np.shape.str());
      total += np.shape.size();
    }
    Node n;
    n.op = Op::Concat;
    n.shape = Shape::vec(total);
    n.aux_off = static_cast<int>(aux_i_.size());
    n.aux_len = static_cast<int>(parts.size());
    for (Var p : parts) aux_i_.push_back(p.id);
    alloc_out(n);
    size_t off = 0;
    for (Var p : parts) {
      const Node& np = node(p);
      std::memcpy(n.val.data() + off, np.val.data(), np.val.size() * sizeof(double));
      off += np.val.size();
    }
    return push(std::move(n));
  }

  Var concat(std::initializer_list<Var> parts) {
    std::vector<Var> v(parts);
    return concat(std::span<const Var>(v));
  }

  // Zero-copy views.  Their grad spans alias the parent, so backward needs
  // no work for them.
  Var slice(Var a, size_t off, size_t len) {
    const Node& na = node(a);
    if (na.shape.rank != 1 || off + len > na.shape.size())
      throw DimensionError("slice: [" + std::to_string(off) + "," +
                           std::to_string(off + len) + ") out of " + na.shape.str());
    Node n;
    n.op = Op::View;
    n.in[0] = a.id;
    n.shape = Shape::vec(len);
    n.val = na.val.subspan(off, len);
    n.grad = na.grad.subspan(off, len);
    return push(std::move(n));
  }

  Var row(Var a, size_t r) {
    const Node& na = node(a);
    if (na.shape.rank != 2 || r >= na.shape.rows())
      throw IndexError("row " + std::to_string(r) + " out of " + na.shape.str());
    size_t c = na.shape.cols();
    Node n;
    n.op = Op::View;
    n.in[0] = a.id;
    n.shape = Shape::vec(c);
    n.val = na.val.subspan(r * c, c);
    n.grad = na.grad.subspan(r * c, c);
    return push(std::move(n));
  }

  // Gather rows of a rank-2 input into a new matrix.  Gradient is scattered
  // back into the source rows; rows equal to freeze_id receive none.
  Var rows(Var table, std::span<const int> ids, int freeze_id = -1) {
    const Node& nt = node(table);
    if (nt.shape.rank != 2) throw DimensionError("rows: table must be rank-2");
    const size_t c = nt.shape.cols();
    for (int id : ids)
      if (id < 0 || static_cast<size_t>(id) >= nt.shape.rows())
        throw IndexError("rows: id " + std::to_string(id) + " out of " + nt.shape.str());
    Node n;
    n.op = Op::Rows;
    n.in[0] = table.id;
    n.i0 = freeze_id;
    n.shape = Shape::mat(ids.size(), c);
    n.aux_off = static_cast<int>(aux_i_.size());
    n.aux_len = static_cast<int>(ids.size());
    aux_i_.insert(aux_i_.end(), ids.begin(), ids.end());
    alloc_out(n);
    for (size_t r = 0; r < ids.size(); ++r)
      std::memcpy(n.val.data() + r * c, nt.val.data() + static_cast<size_t>(ids[r]) * c,
                  c * sizeof(double));
    return push(std::move(n));
  }

  Var mean_rows(Var a) {
    const Node& na = node(a);
    if (na.shape.rank != 2 || na.shape.rows() == 0)
      throw DimensionError("mean_rows: non-empty rank-2 input required");
    const size_t r = na.shape.rows(), c = na.shape.cols();
    Node n;
    n.op = Op::MeanRows;
    n.in[0] = a.id;
    n.shape = Shape::vec(c);
    alloc_out(n);
    std::fill(n.val.begin(), n.val.end(), 0.0);
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < c; ++j) n.val[j] += na.val[i * c + j];
    for (size_t j = 0; j < c; ++j) n.val[j] /= static_cast<double>(r);
    return push(std::move(n));
  }

  // Inverted dropout.  Training mode scales kept units by 1/keep; eval mode
  // is a bit-exact identity (a view).
  Var dropout(Var a, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
      throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
    const Node& na = node(a);
    if (!training || rate == 0.0) {
      Node n;
      n.op = Op::View;
      n.in[0] = a.id;
      n.shape = na.shape;
      n.val = na.val;
      n.grad = na.grad;
      return push(std::move(n));
    }
    Node n;
    n.op = Op::Dropout;
    n.in[0] = a.id;
    n.x = 1.0 - rate;
    n.shape = na.shape;
    alloc_out(n);
    n.scratch = arena_.alloc(na.val.size());
    const double inv_keep = 1.0 / n.x;
    for (size_t i = 0; i < n.val.size(); ++i) {
      n.scratch[i] = rng.bernoulli(n.x) ? inv_keep : 0.0;
      n.val[i] = na.val[i] * n.scratch[i];
    }
    return push(std::move(n));
  }

  struct CeResult {
    Var loss;
    std::span<const double> probs;  // valid until tape reset
  };

  // Numerically stable cross entropy: loss = logsumexp(logits) - logits[gold].
  CeResult softmax_ce(Var logits, int gold) {
    const Node& nl = node(logits);
    if (nl.shape.rank != 1) throw DimensionError("softmax_ce: rank-1 logits required");
    const size_t n_tags = nl.shape.size();
    if (gold < 0 || static_cast<size_t>(gold) >= n_tags)
      throw IndexError("softmax_ce: gold " + std::to_string(gold) + " out of [0," +
                       std::to_string(n_tags) + ")");
    Node n;
    n.op = Op::SoftmaxCE;
    n.in[0] = logits.id;
    n.i0 = gold;
    n.shape = Shape::scalar();
    alloc_out(n);
    n.scratch = arena_.alloc(n_tags);
    double mx = nl.val[0];
    for (size_t i = 1; i < n_tags; ++i) mx = std::max(mx, nl.val[i]);
    double z = 0.0;
    for (size_t i = 0; i < n_tags; ++i) {
      n.scratch[i] = std::exp(nl.val[i] - mx);
      z += n.scratch[i];
    }
    for (size_t i = 0; i < n_tags; ++i) n.scratch[i] /= z;
    n.val[0] = (mx + std::log(z)) - nl.val[gold];
    Var v = push(std::move(n));
    return CeResult{v, nodes_[v.id].scratch};
  }

  Var sum(Var a) {
    const Node& na = node(a);
    Node n;
    n.op = Op::Sum;
    n.in[0] = a.id;
    n.shape = Shape::scalar();
    alloc_out(n);
    double s = 0.0;
    for (double v : na.val) s += v;
    n.val[0] = s;
    return push(std::move(n));
  }

  // Sum of squared differences with symmetric gradient.
  Var l2_diff_sq(Var a, Var b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.shape != nb.shape)
      throw PairingError("l2_diff_sq: shapes differ " + na.shape.str() + " vs " +
                         nb.shape.str());
    Node n;
    n.op = Op::L2Diff;
    n.in[0] = a.id;
    n.in[1] = b.id;
    n.shape = Shape::scalar();
    alloc_out(n);
    double s = 0.0;
    for (size_t i = 0; i < na.val.size(); ++i) {
      double d = na.val[i] - nb.val[i];
      s += d * d;
    }
    n.val[0] = s;
    return push(std::move(n));
  }

  // ---- access -------------------------------------------------------------

  std::span<const double> val(Var v) const { return node(v).val; }
  std::span<double> grad(Var v) { return nodes_[check(v)].grad; }
  const Shape& shape(Var v) const { return node(v).shape; }
  double scalar(Var v) const {
    const Node& n = node(v);
    if (n.shape.size() != 1) throw DimensionError("scalar() on " + n.shape.str());
    return n.val[0];
  }

  // ---- reverse pass ---------------------------------------------------------

  // Propagates d(loss)/d(node) into every node recorded before `loss`.
  // Internal adjoints are recomputed from scratch on each call; leaf tensors
  // accumulate into their persistent grad buffers.
  void backward(Var loss) {
    int lid = check(loss);
    if (nodes_[lid].shape.size() != 1)
      throw TapeError("backward: loss must be a scalar");
    for (Node& n : nodes_) {
      if (n.op == Op::Leaf || n.op == Op::View) continue;
      std::fill(n.grad.begin(), n.grad.end(), 0.0);
    }
    nodes_[lid].grad[0] += 1.0;
    for (int id = lid; id >= 0; --id) {
      Node& n = nodes_[id];
      switch (n.op) {
        case Op::Leaf:
        case Op::Const:
        case Op::View:
          break;
        case Op::Matmul: {
          Node& a = nodes_[n.in[0]];
          Node& b = nodes_[n.in[1]];
          const size_t m = a.shape.rows(), k = a.shape.cols(), c = b.shape.cols();
          const double* G = n.grad.data();
          const double* A = a.val.data();
          const double* B = b.val.data();
          double* dA = a.grad.data();
          double* dB = b.grad.data();
          for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
              const double* grow = G + i * c;
              const double* brow = B + p * c;
              double acc = 0.0;
              for (size_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
              dA[i * k + p] += acc;
            }
          for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
              double av = A[i * k + p];
              if (av == 0.0) continue;
              const double* grow = G + i * c;
              double* dbrow = dB + p * c;
              for (size_t j = 0; j < c; ++j) dbrow[j] += av * grow[j];
            }
          break;
        }
        case Op::Affine: {
          const size_t out_dim = n.shape.size();
          const double* dy = n.grad.data();
          Node& b = nodes_[n.in[6]];
          for (size_t j = 0; j < out_dim; ++j) b.grad[j] += dy[j];
          for (int t = 0; t < n.i0; ++t) {
            Node& x = nodes_[n.in[2 * t]];
            Node& m = nodes_[n.in[2 * t + 1]];
            const size_t k = x.shape.size();
            const double* xv = x.val.data();
            const double* mv = m.val.data();
            double* dx = x.grad.data();
            double* dm = m.grad.data();
            for (size_t i = 0; i < k; ++i) {
              const double* mrow = mv + i * out_dim;
              double* dmrow = dm + i * out_dim;
              double xi = xv[i];
              double acc = 0.0;
              for (size_t j = 0; j < out_dim; ++j) {
                acc += mrow[j] * dy[j];
                dmrow[j] += xi * dy[j];
              }
              dx[i] += acc;
            }
          }
          break;
        }
        case Op::Add: {
          Node& a = nodes_[n.in[0]];
          Node& b = nodes_[n.in[1]];
          for (size_t i = 0; i < n.grad.size(); ++i) {
            a.grad[i] += n.grad[i];
            b.grad[i] += n.grad[i];
          }
          break;
        }
        case Op::Sub: {
          Node& a = nodes_[n.in[0]];
          Node& b = nodes_[n.in[1]];
          for (size_t i = 0; i < n.grad.size(); ++i) {
            a.grad[i] += n.grad[i];
            b.grad[i] -= n.grad[i];
          }
          break;
        }
        case Op::Mul: {
          Node& a = nodes_[n.in[0]];
          Node& b = nodes_[n.in[1]];
          for (size_t i = 0; i < n.grad.size(); ++i) {
            a.grad[i] += n.grad[i] * b.val[i];
            b.grad[i] += n.grad[i] * a.val[i];
          }
          break;
        }
        case Op::Scale: {
          Node& a = nodes_[n.in[0]];
          for (size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.x * n.grad[i];
          break;
        }
        case Op::Sigmoid: {
          Node& a = nodes_[n.in[0]];
          for (size_t i = 0; i < n.grad.size(); ++i)
            a.grad[i] += n.grad[i] * n.val[i] * (1.0 - n.val[i]);
          break;
        }
        case Op::Tanh: {
          Node& a = nodes_[n.in[0]];
          for (size_t i = 0; i < n.grad.size(); ++i)
            a.grad[i] += n.grad[i] * (1.0 - n.val[i] * n.val[i]);
          break;
        }
        case Op::Blend: {
          Node& g = nodes_[n.in[0]];
          Node& a = nodes_[n.in[1]];
          Node& b = nodes_[n.in[2]];
          bool scalar_gate = g.shape.size() == 1;
          for (size_t i = 0; i < n.grad.size(); ++i) {
            double gv = scalar_gate ? g.val[0] : g.val[i];
            double d = n.grad[i];
            a.grad[i] += d * (1.0 - gv);
            b.grad[i] += d * gv;
            double dg = d * (b.val[i] - a.val[i]);
            if (scalar_gate)
              g.grad[0] += dg;
            else
              g.grad[i] += dg;
          }
          break;
        }
        case Op::Concat: {
          size_t off = 0;
          for (int t = 0; t < n.aux_len; ++t) {
            Node& p = nodes_[aux_i_[n.aux_off + t]];
            for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[off + i];
            off += p.grad.size();
          }
          break;
        }
        case Op::Rows: {
          Node& t = nodes_[n.in[0]];
          const size_t c = t.shape.cols();
          for (int r = 0; r < n.aux_len; ++r) {
            int id = aux_i_[n.aux_off + r];
            if (id == n.i0) continue;
            double* drow = t.grad.data() + static_cast<size_t>(id) * c;
            const double* g = n.grad.data() + static_cast<size_t>(r) * c;
            for (size_t j = 0; j < c; ++j) drow[j] += g[j];
          }
          break;
        }
        case Op::MeanRows: {
          Node& a = nodes_[n.in[0]];
          const size_t r = a.shape.rows(), c = a.shape.cols();
          const double inv = 1.0 / static_cast<double>(r);
          for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < c; ++j) a.grad[i * c + j] += n.grad[j] * inv;
          break;
        }
        case Op::Dropout: {
          Node& a = nodes_[n.in[0]];
          for (size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.grad[i] * n.scratch[i];
          break;
        }
        case Op::SoftmaxCE: {
          Node& a = nodes_[n.in[0]];
          double d = n.grad[0];
          for (size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += d * n.scratch[i];
          a.grad[n.i0] -= d;
          break;
        }
        case Op::Sum: {
          Node& a = nodes_[n.in[0]];
          double d = n.grad[0];
          for (size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += d;
          break;
        }
        case Op::L2Diff: {
          Node& a = nodes_[n.in[0]];
          Node& b = nodes_[n.in[1]];
          double d = 2.0 * n.grad[0];
          for (size_t i = 0; i < a.grad.size(); ++i) {
            double diff = a.val[i] - b.val[i];
            a.grad[i] += d * diff;
            b.grad[i] -= d * diff;
          }
          break;
        }
      }
    }
  }

 private:
  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  }

  Var binary(Op op, Var a, Var b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.shape != nb.shape)
      throw DimensionError("elementwise: shapes differ " + na.shape.str() + " vs " +
                           nb.shape.str());
    Node n;
    n.op = op;
    n.in[0] = a.id;
    n.in[1] = b.id;
    n.shape = na.shape;
    alloc_out(n);
    switch (op) {
      case Op::Add:
        for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = na.val[i] + nb.val[i];
        break;
      case Op::Sub:
        for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = na.val[i] - nb.val[i];
        break;
      case Op::Mul:
        for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = na.val[i] * nb.val[i];
        break;
      default:
        throw TapeError("binary: bad op");
    }
    return push(std::move(n));
  }

  void alloc_out(Node& n) {
    n.val = arena_.alloc(n.shape.size());
    n.grad = arena_.alloc(n.shape.size());
  }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1, epoch_};
  }

  int check(Var v) const {
    if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size() || v.epoch != epoch_)
      throw TapeError("variable is not on the current tape");
    return v.id;
  }

  const Node& node(Var v) const { return nodes_[check(v)]; }
  Node& node_by_id(int id) { return nodes_[id]; }

  std::vector<Node> nodes_;
  std::vector<int> aux_i_;
  std::unordered_map<const Tensor*, int> leaf_cache_;
  detail::Arena arena_;
  uint32_t epoch_ = 1;
};

}  // namespace dtn
