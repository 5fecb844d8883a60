#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "dcv/encoder.hpp"
#include "dcv/flow_io.hpp"

namespace dcv {

enum class MotionKind { translation, affine, smooth_random };

MotionKind parse_motion_kind(const std::string& name);
std::string motion_kind_name(MotionKind kind);

inline constexpr double kMaxSyntheticMagnitude = 672.0;

struct SyntheticSpec {
  MotionKind kind = MotionKind::translation;
  /// Upper bound on |u| and |v| anywhere in the field.
  double magnitude = 16.0;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;
  /// Fixed translation instead of a random one (translation kind only).
  std::optional<std::array<double, 2>> translation;
};

struct SyntheticSample {
  ImagePair pair;
  FlowField flow;
  /// Affine kind: f(x, y) = [a0 a1; a3 a4] (p - center) + (a2, a5).
  std::array<double, 6> affine{};
};

/// Procedural value-noise texture [3 x H x W] in [-1, 1], sampled on the
/// integer grid offset by (x0, y0).
Tensor value_noise_texture(std::size_t height, std::size_t width, std::uint64_t seed, double x0 = 0.0,
                           double y0 = 0.0);

/// out(p) = image(p + offset(p)) with bilinear interpolation and clamped borders.
Tensor warp_bilinear(const Tensor& image, const Tensor& offset);

/// Textured first frame and its warp by an analytic flow; the ground truth
/// maps pixels of the first frame into the second.
SyntheticSample synthetic_pair(const SyntheticSpec& spec);

}  // namespace dcv
