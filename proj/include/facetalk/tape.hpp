#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "facetalk/array.hpp"
#include "facetalk/param_store.hpp"

namespace facetalk {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
// lives.
class Var {
 public:
  Var() = default;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records array operations in execution order so gradients can be pulled
// back by reverse accumulation. Nodes are appended only after their inputs,
// so reverse index order is a valid topological order.
class Tape {
 public:
  // Accumulates the gradient of node `self` into the gradients of its inputs.
  using BackwardFn = std::function<void(Tape& tape, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);

  // Leaf bound to a parameter block. Repeated calls with the same block return
  // the same node, so a parameter used at every time step accumulates once.
  Var param(ParamStore& store, const std::string& name);

  // Parameters of `store` are recorded as constants: no gradient flows into
  // them from this tape.
  void treat_as_constant(const ParamStore& store);

  Var record(Array value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of a node, allocated as zeros on first access.
  Array& grad(std::size_t id);

  // Reverse accumulation from a scalar loss. Node gradients are reset at the
  // start; parameter gradients in the bound stores accumulate.
  void backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }

  // Running hash over the branch taken by every piecewise operation (relu
  // side, argmax index, ...). Two evaluations with equal signatures lie on
  // the same smooth piece.
  void note_branch(std::uint64_t branch);
  std::uint64_t branch_signature() const { return branch_hash_; }

 private:
  struct Node {
    Array value;
    Array grad;
    bool grad_ready = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    ParamEntry* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const ParamEntry*, std::size_t> param_nodes_;
  std::unordered_set<const ParamStore*> constant_stores_;
  std::uint64_t branch_hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace facetalk
