#pragma once

#include <vector>

#include "dcv/autograd.hpp"
#include "dcv/kernels.hpp"

/// Differentiable wrappers around the tensor kernels. Each op evaluates the
/// optimized kernel and, when recording, registers its hand-written backward.
namespace dcv::ops {

Var conv2d(const Var& input, const Var& weight, const Var& bias, const ConvSpec& spec);
Var conv3d(const Var& input, const Var& weight, const Var& bias, const ConvSpec& spec);
Var conv_transpose3d(const Var& input, const Var& weight, const Var& bias, const ConvSpec& spec);
Var instance_norm2d(const Var& input, const Var& gain, const Var& shift, double eps = 1e-5);
Var leaky_relu(const Var& input, double slope = 0.1);
Var softmax(const Var& input, std::size_t axis);
Var spatial_subsample(const Var& input, std::size_t factor);

Var add(const Var& a, const Var& b);
Var scale(const Var& input, double factor);
/// Concatenation along axis 0; trailing extents must agree.
Var concat(const std::vector<Var>& parts);
Var reshape(const Var& input, Shape shape);
/// Channel range [begin, end) along axis 0.
Var slice(const Var& input, std::size_t begin, std::size_t end);
/// Sum of all elements as a [1] tensor.
Var sum(const Var& input);

}  // namespace dcv::ops
