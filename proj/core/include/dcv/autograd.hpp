#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dcv/tensor.hpp"

namespace dcv {

class Tape;

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::string param_name;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// grad += g, allocating a zero slot on first use.
  void accumulate(const Tensor& g);
  void accumulate(Tensor&& g);
};

}  // namespace detail

/// Handle to a value produced on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tape& tape() const { return *tape_; }
  bool valid() const noexcept { return node_ != nullptr; }

 private:
  friend class Tape;
  Var(std::shared_ptr<detail::Node> node, Tape* tape) : node_(std::move(node)), tape_(tape) {}

  std::shared_ptr<detail::Node> node_;
  Tape* tape_ = nullptr;
};

using GradMap = std::map<std::string, Tensor>;

/// Backward closure for a recorded op: receives the output node (its grad is
/// populated) and pushes gradients into inputs that require them.
using BackwardFn = std::function<void(detail::Node& out)>;

/// Ordered record of executed differentiable operations. Non-recording tapes
/// keep no history, so intermediates are freed as soon as their Var handles
/// go out of scope.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  /// Input that never receives a gradient.
  Var constant(Tensor value);
  /// Named leaf that receives a gradient slot. Requesting the same name twice
  /// returns the same Var, so gradients of shared weights accumulate.
  Var parameter(const std::string& name, const Tensor& value);

  /// Records out = op(inputs). `backward` may be empty when no input needs a
  /// gradient or when the tape is not recording.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Reverse-order replay seeded with d(root)/d(root) = seed. Returns the
  /// gradients of every parameter reached. Throws if called twice without reset().
  GradMap backward(const Var& root, const Tensor& seed);
  /// Convenience for scalar roots: seed = 1.
  GradMap backward(const Var& root);

  void reset();
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Parent nodes of an op output, for backward closures.
  static const Tensor& input_value(const detail::Node& out, std::size_t i) { return out.inputs[i]->value; }
  static bool input_needs_grad(const detail::Node& out, std::size_t i) { return out.inputs[i]->requires_grad; }

 private:
  bool recording_;
  bool replayed_ = false;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  std::map<std::string, std::shared_ptr<detail::Node>> params_;
};

}  // namespace dcv
