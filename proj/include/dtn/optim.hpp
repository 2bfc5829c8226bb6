#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtn/errors.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

// Which task a parameter belongs to.  Updates are masked by partition:
// a batch focused on one task moves only that task's parameters plus the
// shared ones.
enum class Partition : uint8_t { Target, Source, Shared };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::Target: return "target";
    case Partition::Source: return "source";
    case Partition::Shared: return "shared";
  }
  return "?";
}

struct PartitionSet {
  bool target = false;
  bool source = false;
  bool shared = false;

  bool contains(Partition p) const {
    switch (p) {
      case Partition::Target: return target;
      case Partition::Source: return source;
      case Partition::Shared: return shared;
    }
    return false;
  }

  static PartitionSet all() { return {true, true, true}; }
  static PartitionSet focus(Partition task) {
    PartitionSet s;
    s.shared = true;
    if (task == Partition::Target) s.target = true;
    if (task == Partition::Source) s.source = true;
    return s;
  }
};

// Registry of all trainable tensors, each with a unique hierarchical name
// and a partition label.  Insertion order is the canonical order used by
// the optimizer and the checkpoint format.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Partition partition;
    bool trainable;
    std::unique_ptr<Tensor> tensor;
  };

  Tensor& create(const std::string& name, Shape shape, Partition part,
                 bool trainable = true) {
    if (index_.count(name)) throw StateError("parameter already registered: " + name);
    Entry e{name, part, trainable, std::make_unique<Tensor>(shape)};
    Tensor& t = *e.tensor;
    index_.emplace(name, entries_.size());
    entries_.push_back(std::move(e));
    return t;
  }

  Tensor* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : entries_[it->second].tensor.get();
  }
  const Tensor* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : entries_[it->second].tensor.get();
  }

  Tensor& at(const std::string& name) {
    Tensor* t = find(name);
    if (!t) throw StateError("unknown parameter: " + name);
    return *t;
  }

  Partition partition_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter: " + name);
    return entries_[it->second].partition;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  size_t total_values() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.tensor->size();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor->zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Sum of squared differences between two name-matched parameter subsets.
// Subsets are selected by prefix: every name "<prefix_a><suffix>" must pair
// with "<prefix_b><suffix>" of identical shape.  Recorded on the tape, so
// gradients flow symmetrically into both sides.
inline Var l2_distance_sq(Tape& tape, ParamStore& store, const std::string& prefix_a,
                          const std::string& prefix_b) {
  Var total = tape.zeros(Shape::scalar());
  bool any = false;
  for (const auto& e : store.entries()) {
    if (e.name.rfind(prefix_a, 0) != 0) continue;
    std::string suffix = e.name.substr(prefix_a.size());
    Tensor* other = store.find(prefix_b + suffix);
    if (!other)
      throw PairingError("l2_distance_sq: no counterpart for " + e.name + " under " +
                         prefix_b);
    if (other->shape != e.tensor->shape)
      throw PairingError("l2_distance_sq: shape mismatch at " + e.name + ": " +
                         e.tensor->shape.str() + " vs " + other->shape.str());
    Var d = tape.l2_diff_sq(tape.leaf(*e.tensor), tape.leaf(*other));
    total = tape.add(total, d);
    any = true;
  }
  if (!any) throw PairingError("l2_distance_sq: prefix matches nothing: " + prefix_a);
  return total;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // 0 disables clipping
};

// Adam with bias correction and global-norm gradient clipping.  One step
// counter for the whole run; masked-out parameters keep their moments and
// never move.  All gradients are cleared at the end of a step.
class Adam {
 public:
  Adam(const ParamStore& store, AdamConfig cfg = {}) : cfg_(cfg) {
    m_.reserve(store.size());
    v_.reserve(store.size());
    for (const auto& e : store.entries()) {
      m_.emplace_back(e.tensor->size(), 0.0);
      v_.emplace_back(e.tensor->size(), 0.0);
    }
  }

  const AdamConfig& config() const { return cfg_; }
  int64_t step_count() const { return t_; }

  void step(ParamStore& store, PartitionSet masks) {
    if (store.size() != m_.size())
      throw StateError("Adam state covers " + std::to_string(m_.size()) +
                       " parameters but store has " + std::to_string(store.size()));
    const auto& entries = store.entries();

    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (size_t i = 0; i < entries.size(); ++i) {
        const Entry& e = entries[i];
        if (!e.trainable || !masks.contains(e.partition)) continue;
        for (double g : e.tensor->grad) sq += g * g;
      }
      double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < entries.size(); ++i) {
      const Entry& e = entries[i];
      if (!e.trainable || !masks.contains(e.partition)) continue;
      Tensor& p = *e.tensor;
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < p.value.size(); ++j) {
        double g = p.grad[j] * scale;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        p.value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    store.zero_grads();
  }

 private:
  using Entry = ParamStore::Entry;
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct FdCheckResult {
  double max_rel_err = 0.0;
  size_t coords_checked = 0;
  std::string worst;  // "param#idx[coord]" of the worst coordinate
};

// Central-difference verification of the gradients currently stored in the
// given tensors.  `f` must rerun the forward pass deterministically (dropout
// off) and return the loss; the analytic gradient is read from each tensor's
// grad buffer, so run forward+backward once before calling.  Relative error
// uses a 1e-6 floor so near-zero coordinates are compared absolutely.
template <typename F>
FdCheckResult finite_diff_check(F&& f, std::span<Tensor* const> params, double step = 1e-5,
                                size_t max_coords_per_param = 0, uint64_t sample_seed = 1) {
  FdCheckResult res;
  Rng rng(sample_seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    std::vector<size_t> coords;
    if (max_coords_per_param == 0 || p.size() <= max_coords_per_param) {
      coords.resize(p.size());
      for (size_t i = 0; i < p.size(); ++i) coords[i] = i;
    } else {
      for (size_t i = 0; i < max_coords_per_param; ++i) coords.push_back(rng.index(p.size()));
    }
    for (size_t c : coords) {
      double saved = p.value[c];
      p.value[c] = saved + step;
      double fp = f();
      p.value[c] = saved - step;
      double fm = f();
      p.value[c] = saved;
      double numeric = (fp - fm) / (2.0 * step);
      double analytic = p.grad[c];
      double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-6});
      double rel = std::fabs(numeric - analytic) / denom;
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "param#" + std::to_string(pi) + "[" + std::to_string(c) + "]";
      }
    }
  }
  return res;
}

}  // namespace dtn
