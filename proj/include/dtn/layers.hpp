#pragma once

#include <span>
#include <string>
#include <vector>

#include "dtn/optim.hpp"
#include "dtn/rng.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

inline void init_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (double& v : t.value) v = rng.uniform(lo, hi);
}

inline void init_xavier(Tensor& t, Rng& rng, size_t fan_in, size_t fan_out) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  init_uniform(t, rng, -limit, limit);
}

// Lookup table of row vectors.  Row `pad_id`, when set, never receives
// gradient; setting trainable=false freezes the whole table.
struct EmbeddingTable {
  Tensor* table = nullptr;  // [vocab x dim]
  int pad_id = -1;

  size_t vocab() const { return table->shape.rows(); }
  size_t dim() const { return table->shape.cols(); }

  static EmbeddingTable create(ParamStore& store, const std::string& name, size_t vocab,
                               size_t dim, Partition part, Rng& rng, int pad_id = -1,
                               bool trainable = true) {
    EmbeddingTable e;
    e.table = &store.create(name, Shape::mat(vocab, dim), part, trainable);
    e.pad_id = pad_id;
    init_uniform(*e.table, rng, -0.25, 0.25);
    if (pad_id >= 0) {
      double* row = e.table->value.data() + static_cast<size_t>(pad_id) * dim;
      std::fill(row, row + dim, 0.0);
    }
    return e;
  }
};

// Stacked row lookup: [len x dim].  Gradient lands only on looked-up rows.
inline Var embed_lookup(Tape& tape, const EmbeddingTable& table, std::span<const int> ids) {
  return tape.rows(tape.leaf(*table.table), ids, table.pad_id);
}

// Single-row lookup as a zero-copy view into the table.
inline Var embed_row(Tape& tape, const EmbeddingTable& table, int id) {
  if (id < 0 || static_cast<size_t>(id) >= table.vocab())
    throw IndexError("embedding id " + std::to_string(id) + " out of vocab " +
                     std::to_string(table.vocab()));
  return tape.row(tape.leaf(*table.table), static_cast<size_t>(id));
}

// LSTM cell with fused gate parameters.  Column layout of W, U, b is
// [input | forget | output | candidate], each block `hid` wide.  The forget
// block of the bias starts at +1.
struct LstmCell {
  size_t in_dim = 0;
  size_t hid_dim = 0;
  Tensor* W = nullptr;  // [in x 4h]
  Tensor* U = nullptr;  // [h x 4h]
  Tensor* b = nullptr;  // [4h]

  static LstmCell create(ParamStore& store, const std::string& prefix, size_t in_dim,
                         size_t hid_dim, Partition part, Rng& rng) {
    LstmCell c;
    c.in_dim = in_dim;
    c.hid_dim = hid_dim;
    c.W = &store.create(prefix + ".W", Shape::mat(in_dim, 4 * hid_dim), part);
    c.U = &store.create(prefix + ".U", Shape::mat(hid_dim, 4 * hid_dim), part);
    c.b = &store.create(prefix + ".b", Shape::vec(4 * hid_dim), part);
    init_xavier(*c.W, rng, in_dim, hid_dim);
    init_xavier(*c.U, rng, hid_dim, hid_dim);
    for (size_t j = hid_dim; j < 2 * hid_dim; ++j) c.b->value[j] = 1.0;
    return c;
  }
};

struct LstmState {
  Var h;
  Var c;
};

inline LstmState lstm_initial_state(Tape& tape, const LstmCell& cell) {
  return {tape.zeros(Shape::vec(cell.hid_dim)), tape.zeros(Shape::vec(cell.hid_dim))};
}

inline LstmState lstm_step(Tape& tape, const LstmCell& cell, Var x, LstmState prev) {
  if (tape.shape(x).size() != cell.in_dim)
    throw DimensionError("lstm_step: input " + tape.shape(x).str() + ", cell expects [" +
                         std::to_string(cell.in_dim) + "]");
  const size_t h = cell.hid_dim;
  Var pre = tape.affine({{x, tape.leaf(*cell.W)}, {prev.h, tape.leaf(*cell.U)}},
                        tape.leaf(*cell.b));
  Var i = tape.sigmoid(tape.slice(pre, 0, h));
  Var f = tape.sigmoid(tape.slice(pre, h, h));
  Var o = tape.sigmoid(tape.slice(pre, 2 * h, h));
  Var g = tape.tanh(tape.slice(pre, 3 * h, h));
  Var c = tape.add(tape.mul(f, prev.c), tape.mul(i, g));
  Var out_h = tape.mul(o, tape.tanh(c));
  return {out_h, c};
}

// Forward pass over xs and a backward pass over reversed xs; returns the
// concatenation of the two final hidden states.
inline Var run_bilstm_final(Tape& tape, const LstmCell& fwd, const LstmCell& bwd,
                            std::span<const Var> xs) {
  if (xs.empty()) throw DimensionError("run_bilstm_final: empty sequence");
  LstmState sf = lstm_initial_state(tape, fwd);
  for (Var x : xs) sf = lstm_step(tape, fwd, x, sf);
  LstmState sb = lstm_initial_state(tape, bwd);
  for (size_t t = xs.size(); t-- > 0;) sb = lstm_step(tape, bwd, xs[t], sb);
  return tape.concat({sf.h, sb.h});
}

// Full-resolution bidirectional pass: output[t] = [fwd_h(t) || bwd_h(t)].
inline std::vector<Var> run_bilstm_full(Tape& tape, const LstmCell& fwd,
                                        const LstmCell& bwd, std::span<const Var> xs) {
  if (xs.empty()) throw DimensionError("run_bilstm_full: empty sequence");
  const size_t n = xs.size();
  std::vector<Var> fh(n), bh(n);
  LstmState sf = lstm_initial_state(tape, fwd);
  for (size_t t = 0; t < n; ++t) {
    sf = lstm_step(tape, fwd, xs[t], sf);
    fh[t] = sf.h;
  }
  LstmState sb = lstm_initial_state(tape, bwd);
  for (size_t t = n; t-- > 0;) {
    sb = lstm_step(tape, bwd, xs[t], sb);
    bh[t] = sb.h;
  }
  std::vector<Var> out(n);
  for (size_t t = 0; t < n; ++t) out[t] = tape.concat({fh[t], bh[t]});
  return out;
}

struct LinearLayer {
  Tensor* W = nullptr;  // [d x n]
  Tensor* b = nullptr;  // [n]

  static LinearLayer create(ParamStore& store, const std::string& prefix, size_t in_dim,
                            size_t out_dim, Partition part, Rng& rng) {
    LinearLayer l;
    l.W = &store.create(prefix + ".W", Shape::mat(in_dim, out_dim), part);
    l.b = &store.create(prefix + ".b", Shape::vec(out_dim), part);
    init_xavier(*l.W, rng, in_dim, out_dim);
    return l;
  }

  Var apply(Tape& tape, Var x) const {
    return tape.affine({{x, tape.leaf(*W)}}, tape.leaf(*b));
  }
};

}  // namespace dtn
