#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "genieblue/tensor.hpp"

namespace genieblue {

/// Set of parameter tensors (by address) that receive gradients on a tape.
using ParamSet = std::unordered_set<const Tensor*>;

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reverse-mode tape. Nodes are appended in execution order, so ids are a
/// topological order and backward simply walks them in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  explicit Tape(const ParamSet* trainable) : trainable_(trainable) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value, const char* op = "constant");
  // Leaf bound to an externally owned parameter. It requires grad iff the
  // parameter is in the trainable set. The tensor must outlive the tape.
  Var param(const Tensor& parameter);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn,
             const char* op);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }

  // Adds g into the gradient buffer of node id (no-op if it has no grad).
  void accumulate(std::size_t id, const Tensor& g);
  // Mutable gradient buffer, allocated on first use.
  Tensor& grad_buffer(std::size_t id);

  void backward(Var loss);

  // Parameter gradients gathered after backward(); absent entries had no
  // path to the loss and are reported as zero by the caller.
  const std::unordered_map<const Tensor*, std::size_t>& param_nodes() const {
    return param_nodes_;
  }
  std::optional<Tensor> param_grad(const Tensor& parameter) const;

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    const char* op = "";
  };

  const ParamSet* trainable_ = nullptr;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> param_nodes_;
};

/// Row ranges of independent sequences stacked into one matrix.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

namespace ad {

Var matmul_nt(Var x, Var w);
// x W^T + s * (x A^T) B^T as one node (the low-rank update of a frozen or
// trainable weight).
Var lora_linear(Var x, Var w, Var a, Var b, double s);
Var add(Var a, Var b);
Var add_row_vector(Var a, Var bias);
Var scale(Var a, double s);
Var sum(Var a);
Var gelu(Var a);
Var rms_norm(Var x, Var gain);

// Multi-head scaled dot-product attention over each segment independently.
// q, k, v are [rows x width]; width is split evenly into heads.
Var attention(Var q, Var k, Var v, std::span<const Segment> segments,
              std::size_t heads, bool causal);

// out[i] = table[indices[i]]
Var gather_rows(Var table, std::vector<std::size_t> indices);

// Row i of the output comes from table[ids[i]] when inject[i] is false, and
// from the next unused row of `injected` otherwise.
Var embed_with_injection(Var table, std::vector<std::size_t> ids,
                         std::vector<bool> inject, std::optional<Var> injected);

Var take_rows(Var x, std::vector<std::size_t> rows);
// Inverse of a partition: out[a_rows[i]] = a[i], out[b_rows[j]] = b[j].
Var merge_rows(Var a, std::vector<std::size_t> a_rows, Var b,
               std::vector<std::size_t> b_rows);

// sum_i weight[i] * -log softmax(logits[i])[target[i]]. Rows with zero
// weight are skipped entirely.
Var weighted_nll(Var logits, std::vector<std::size_t> targets,
                 std::vector<double> weights);

}  // namespace ad
}  // namespace genieblue
