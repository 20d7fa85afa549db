#include "facetalk/tape.hpp"

#include "facetalk/error.hpp"

namespace facetalk {

const Array& Var::value() const {
  if (!tape_) throw Error("use of an unbound Var");
  return tape_->value(id_);
}

Var Tape::constant(Array value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(ParamStore& store, const std::string& name) {
  ParamEntry& entry = store.at(name);
  if (auto it = param_nodes_.find(&entry); it != param_nodes_.end()) {
    return Var(this, it->second);
  }
  Node node;
  node.value = entry.value;
  if (!constant_stores_.contains(&store)) {
    node.requires_grad = true;
    node.param = &entry;
  }
  nodes_.push_back(std::move(node));
  param_nodes_.emplace(&entry, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

void Tape::treat_as_constant(const ParamStore& store) {
  constant_stores_.insert(&store);
}

Var Tape::record(Array value, std::vector<std::size_t> inputs,
                 BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (std::size_t in : inputs) {
    if (nodes_[in].requires_grad) node.requires_grad = true;
  }
  if (node.requires_grad) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Array& Tape::grad(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.grad_ready) {
    node.grad = Array(node.value.shape());
    node.grad_ready = true;
  }
  return node.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw Error("backward: loss recorded on another tape");
  if (value(loss.id()).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_string(value(loss.id()).shape()));
  }
  for (Node& node : nodes_) {
    if (node.grad_ready) node.grad.fill(0.0);
  }
  grad(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.grad_ready) continue;
    if (node.param) {
      Array& target = node.param->grad;
      for (std::size_t k = 0; k < target.size(); ++k) target[k] += node.grad[k];
    } else if (node.backward) {
      node.backward(*this, i);
    }
  }
}

void Tape::note_branch(std::uint64_t branch) {
  branch_hash_ ^= branch + 0x9e3779b97f4a7c15ULL + (branch_hash_ << 6) +
                  (branch_hash_ >> 2);
}

}  // namespace facetalk
