#include "dcv/ops.hpp"

#include <algorithm>
#include <cstring>

#include "dcv/errors.hpp"

namespace dcv::ops {

namespace {

using detail::Node;

Var conv_like(const Var& input, const Var& weight, const Var& bias, const ConvSpec& spec, bool transposed) {
  Tape& tape = input.tape();
  Tensor out = transposed ? kernels::conv_transpose3d(input.value(), weight.value(), bias.value(), spec)
                          : (spec.spatial_rank() == 2 ? kernels::conv2d(input.value(), weight.value(), bias.value(), spec)
                                                      : kernels::conv3d(input.value(), weight.value(), bias.value(), spec));
  return tape.record(std::move(out), {input, weight, bias}, [spec, transposed](Node& node) {
    const bool need_input = Tape::input_needs_grad(node, 0);
    const Tensor& x = Tape::input_value(node, 0);
    const Tensor& w = Tape::input_value(node, 1);
    kernels::ConvGrads g = transposed ? kernels::conv_transpose_backward(x, w, node.grad, spec, need_input)
                                      : kernels::conv_backward(x, w, node.grad, spec, need_input);
    if (need_input) node.inputs[0]->accumulate(std::move(g.input));
    if (Tape::input_needs_grad(node, 1)) node.inputs[1]->accumulate(std::move(g.weight));
    if (Tape::input_needs_grad(node, 2)) node.inputs[2]->accumulate(std::move(g.bias));
  });
}

}  // namespace

Var conv2d(const Var& input, const Var& weight, const Var& bias, const ConvSpec& spec) {
  if (spec.spatial_rank() != 2) throw ShapeError("ops::conv2d: spec must have 2 spatial axes");
  return conv_like(input, weight, bias, spec, false);
}

Var conv3d(const Var& input, const Var& weight, const Var& bias, const ConvSpec& spec) {
  if (spec.spatial_rank() != 3) throw ShapeError("ops::conv3d: spec must have 3 spatial axes");
  return conv_like(input, weight, bias, spec, false);
}

Var conv_transpose3d(const Var& input, const Var& weight, const Var& bias, const ConvSpec& spec) {
  return conv_like(input, weight, bias, spec, true);
}

Var instance_norm2d(const Var& input, const Var& gain, const Var& shift, double eps) {
  Tensor out = kernels::instance_norm2d(input.value(), gain.value(), shift.value(), eps);
  return input.tape().record(std::move(out), {input, gain, shift}, [eps](Node& node) {
    kernels::NormGrads g =
        kernels::instance_norm2d_backward(Tape::input_value(node, 0), Tape::input_value(node, 1), eps, node.grad);
    if (Tape::input_needs_grad(node, 0)) node.inputs[0]->accumulate(std::move(g.input));
    if (Tape::input_needs_grad(node, 1)) node.inputs[1]->accumulate(std::move(g.gain));
    if (Tape::input_needs_grad(node, 2)) node.inputs[2]->accumulate(std::move(g.shift));
  });
}

Var leaky_relu(const Var& input, double slope) {
  Tensor out = kernels::leaky_relu(input.value(), slope);
  return input.tape().record(std::move(out), {input}, [slope](Node& node) {
    node.inputs[0]->accumulate(kernels::leaky_relu_backward(Tape::input_value(node, 0), slope, node.grad));
  });
}

Var softmax(const Var& input, std::size_t axis) {
  Tensor out = kernels::softmax(input.value(), axis);
  return input.tape().record(std::move(out), {input}, [axis](Node& node) {
    node.inputs[0]->accumulate(kernels::softmax_backward(node.value, node.grad, axis));
  });
}

Var spatial_subsample(const Var& input, std::size_t factor) {
  Tensor out = kernels::spatial_subsample(input.value(), factor);
  Shape in_shape = input.shape();
  return input.tape().record(std::move(out), {input}, [factor, in_shape](Node& node) {
    node.inputs[0]->accumulate(kernels::spatial_subsample_backward(node.grad, factor, in_shape));
  });
}

Var add(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("ops::add: shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out = a.value();
  out.add_(b.value());
  return a.tape().record(std::move(out), {a, b}, [](Node& node) {
    if (Tape::input_needs_grad(node, 0)) node.inputs[0]->accumulate(node.grad);
    if (Tape::input_needs_grad(node, 1)) node.inputs[1]->accumulate(node.grad);
  });
}

Var scale(const Var& input, double factor) {
  Tensor out = input.value();
  out.scale_(factor);
  return input.tape().record(std::move(out), {input}, [factor](Node& node) {
    Tensor g = node.grad;
    g.scale_(factor);
    node.inputs[0]->accumulate(std::move(g));
  });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("ops::concat: no inputs");
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  out_shape[0] = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw ShapeError("ops::concat: trailing extents differ: " + shape_string(s) + " vs " + shape_string(first));
    }
    offsets.push_back(out_shape[0]);
    out_shape[0] += s[0];
  }
  Tensor out(out_shape);
  const std::size_t inner = out.size() / out_shape[0];
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    std::memcpy(out.ptr() + offsets[i] * inner, v.ptr(), v.size() * sizeof(double));
  }
  return parts.front().tape().record(std::move(out), parts, [offsets, inner](Node& node) {
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (!node.inputs[i]->requires_grad) continue;
      const Shape& s = node.inputs[i]->value.shape();
      Tensor g(s);
      std::memcpy(g.ptr(), node.grad.ptr() + offsets[i] * inner, g.size() * sizeof(double));
      node.inputs[i]->accumulate(std::move(g));
    }
  });
}

Var reshape(const Var& input, Shape shape) {
  Tensor out = input.value().reshaped(std::move(shape));
  Shape in_shape = input.shape();
  return input.tape().record(std::move(out), {input},
                             [in_shape](Node& node) { node.inputs[0]->accumulate(node.grad.reshaped(in_shape)); });
}

Var slice(const Var& input, std::size_t begin, std::size_t end) {
  const Shape& s = input.shape();
  if (begin >= end || end > s[0]) {
    throw ShapeError("ops::slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis of extent " + std::to_string(s[0]));
  }
  const std::size_t inner = input.value().size() / s[0];
  Shape out_shape = s;
  out_shape[0] = end - begin;
  Tensor out(out_shape);
  std::memcpy(out.ptr(), input.value().ptr() + begin * inner, out.size() * sizeof(double));
  return input.tape().record(std::move(out), {input}, [begin, inner](Node& node) {
    Tensor g(node.inputs[0]->value.shape());
    std::memcpy(g.ptr() + begin * inner, node.grad.ptr(), node.grad.size() * sizeof(double));
    node.inputs[0]->accumulate(std::move(g));
  });
}

Var sum(const Var& input) {
  Tensor out = Tensor::scalar(input.value().sum());
  return input.tape().record(std::move(out), {input}, [](Node& node) {
    node.inputs[0]->accumulate(Tensor(node.inputs[0]->value.shape(), node.grad[0]));
  });
}

}  // namespace dcv::ops
