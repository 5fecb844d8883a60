#include "dcv/autograd.hpp"

#include <stdexcept>

#include "dcv/errors.hpp"

namespace dcv {

namespace detail {

void Node::accumulate(const Tensor& g) {
  if (!has_grad) {
    grad = g;
    has_grad = true;
    return;
  }
  grad.add_(g);
}

void Node::accumulate(Tensor&& g) {
  if (!has_grad) {
    grad = std::move(g);
    has_grad = true;
    return;
  }
  grad.add_(g);
}

}  // namespace detail

Var Tape::constant(Tensor value) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  return Var(std::move(node), this);
}

Var Tape::parameter(const std::string& name, const Tensor& value) {
  if (auto it = params_.find(name); it != params_.end()) return Var(it->second, this);
  auto node = std::make_shared<detail::Node>();
  node->value = value;
  apply_storage_precision(node->value);
  node->param_name = name;
  node->requires_grad = recording_;
  if (recording_) {
    params_.emplace(name, node);
    nodes_.push_back(node);
  }
  return Var(std::move(node), this);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  apply_storage_precision(node->value);
  if (!recording_) return Var(std::move(node), this);
  bool any = false;
  for (const auto& in : inputs) {
    if (in.tape_ != this) throw std::logic_error("Tape::record: input belongs to a different tape");
    any = any || in.requires_grad();
  }
  if (any && backward) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_);
    node->backward = std::move(backward);
    nodes_.push_back(node);
  }
  return Var(std::move(node), this);
}

GradMap Tape::backward(const Var& root, const Tensor& seed) {
  if (replayed_) throw std::logic_error("Tape::backward: tape already replayed; call reset() first");
  if (!recording_) throw std::logic_error("Tape::backward: tape is not recording");
  if (root.tape_ != this) throw std::logic_error("Tape::backward: root belongs to a different tape");
  if (!seed.same_shape(root.value())) {
    throw ShapeError("Tape::backward: seed shape " + shape_string(seed.shape()) + " vs root " +
                     shape_string(root.shape()));
  }
  replayed_ = true;
  GradMap grads;
  if (root.requires_grad()) root.node_->accumulate(seed);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& node = **it;
    if (!node.has_grad || !node.backward) continue;
    node.backward(node);
    // Intermediate gradients are no longer needed once propagated.
    node.grad = Tensor();
    node.has_grad = false;
  }
  for (auto& [name, node] : params_) {
    grads.emplace(name, node->has_grad ? node->grad : Tensor(node->value.shape()));
  }
  return grads;
}

GradMap Tape::backward(const Var& root) {
  return backward(root, Tensor(root.shape(), 1.0));
}

void Tape::reset() {
  nodes_.clear();
  params_.clear();
  replayed_ = false;
}

}  // namespace dcv
