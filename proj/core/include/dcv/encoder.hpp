#pragma once

#include <vector>

#include "dcv/autograd.hpp"
#include "dcv/model_params.hpp"
#include "dcv/tensor.hpp"

namespace dcv {

/// Two RGB frames [3 x H x W] with values in [-1, 1]; H and W divisible by 8.
struct ImagePair {
  Tensor first;
  Tensor second;

  /// Validates matching shapes, three channels and divisibility by 8.
  static ImagePair make(Tensor first, Tensor second);
  std::size_t height() const { return first.dim(1); }
  std::size_t width() const { return first.dim(2); }
};

/// L2-normed encoder features at strides 2 and 8.
struct FeaturePyramid {
  Tensor f_s2;  // [128 x H/2 x W/2]
  Tensor f_s8;  // [256 x H/8 x W/8]
};

struct FeatureVars {
  Var f_s2;
  Var f_s8;
};

inline constexpr std::size_t kStride2Channels = 128;
inline constexpr std::size_t kStride8Channels = 256;
inline constexpr double kFeatureNormEps = 1e-8;

/// Divides each position's channel vector by max(||v||_2, eps).
Tensor l2norm_channels(const Tensor& feat, double eps = kFeatureNormEps);
Var l2norm_channels(const Var& feat, double eps = kFeatureNormEps);

/// Residual feature encoder with instance normalization. The image Var may be
/// a constant; parameters are bound from `params` onto its tape.
FeatureVars encode(const Var& image, const ModelParams& params);
FeaturePyramid encode(const Tensor& image, const ModelParams& params);

void append_encoder_layout(std::vector<ParamSpec>& layout);

}  // namespace dcv
