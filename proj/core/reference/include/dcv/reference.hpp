#pragma once

#include <vector>

#include "dcv/cost_volume.hpp"
#include "dcv/kernels.hpp"
#include "dcv/tensor.hpp"

/// Straightforward nested-loop implementations used as test oracles and as
/// the benchmark baseline. No tiling, no vectorization, no threads.
namespace dcv::reference {

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);
/// Scatter form: every input element stamps the kernel into the output.
Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);
Tensor instance_norm2d(const Tensor& input, const Tensor& gain, const Tensor& shift, double eps);
Tensor softmax(const Tensor& input, std::size_t axis);
Tensor spatial_subsample(const Tensor& input, std::size_t factor);

/// Direct per-element cosine similarity with the same summation order as the
/// optimized builder.
Tensor cost_volume(const Tensor& f1, const Tensor& f2, const CostVolumeSpec& spec);

}  // namespace dcv::reference
