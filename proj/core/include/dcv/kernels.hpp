#pragma once

#include <cstddef>
#include <vector>

#include "dcv/tensor.hpp"

namespace dcv {

/// Geometry of a 2D or 3D convolution. Per-axis vectors all have the same
/// length (the spatial rank). Weights are laid out [out, in, k...] for
/// convolutions and [in, out, k...] for transposed convolutions.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::vector<std::size_t> kernel;
  std::vector<std::size_t> stride;
  std::vector<std::size_t> padding;
  std::vector<std::size_t> dilation;
  /// Extra trailing extent added by a transposed convolution; must be < stride.
  std::vector<std::size_t> output_padding;

  static ConvSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                         std::size_t padding = 0, std::size_t dilation = 1);
  static ConvSpec conv3d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                         std::size_t padding = 0, std::size_t dilation = 1);

  std::size_t spatial_rank() const noexcept { return kernel.size(); }
  void validate() const;

  /// (in + 2*pad - dilation*(k-1) - 1) / stride + 1 per axis.
  Shape output_extents(const Shape& input_extents) const;
  /// (in - 1)*stride - 2*pad + dilation*(k-1) + 1 + output_padding per axis.
  Shape transpose_output_extents(const Shape& input_extents) const;

  Shape weight_shape() const;
  Shape transpose_weight_shape() const;
};

namespace kernels {

struct ConvGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

/// Cross-correlation with zero padding. input [C_in x H x W].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);
/// input [C_in x D x H x W].
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);
/// Gradients of conv2d/conv3d. `input` gradient is left empty-shaped ([1]) if
/// need_input is false.
ConvGrads conv_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                        const ConvSpec& spec, bool need_input = true);

/// Adjoint of the strided conv3d with the same weights.
Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);
ConvGrads conv_transpose_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                                  const ConvSpec& spec, bool need_input = true);

/// Per-channel normalization over the H x W plane of a [C x H x W] tensor.
Tensor instance_norm2d(const Tensor& input, const Tensor& gain, const Tensor& shift, double eps);
struct NormGrads {
  Tensor input;
  Tensor gain;
  Tensor shift;
};
NormGrads instance_norm2d_backward(const Tensor& input, const Tensor& gain, double eps, const Tensor& grad_out);

Tensor leaky_relu(const Tensor& input, double slope);
Tensor leaky_relu_backward(const Tensor& input, double slope, const Tensor& grad_out);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& input, std::size_t axis);
/// Takes the softmax output, not its input.
Tensor softmax_backward(const Tensor& output, const Tensor& grad_out, std::size_t axis);

/// Average pooling over non-overlapping factor x factor blocks of the last two axes.
Tensor spatial_subsample(const Tensor& input, std::size_t factor);
Tensor spatial_subsample_backward(const Tensor& grad_out, std::size_t factor, const Shape& input_shape);

}  // namespace kernels
}  // namespace dcv
