#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "dcv/tensor.hpp"

namespace dcv {

/// Dense flow [2 x H x W] in input pixels: channel 0 is u (right), channel 1
/// is v (down). `valid` is an optional [H x W] mask of 0/1 values.
struct FlowField {
  Tensor data;
  std::optional<Tensor> valid;

  /// Checks shapes and finiteness.
  static FlowField make(Tensor data, std::optional<Tensor> valid = std::nullopt);
  static FlowField constant(std::size_t height, std::size_t width, double u, double v);

  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
  double u(std::size_t y, std::size_t x) const { return data[y * width() + x]; }
  double v(std::size_t y, std::size_t x) const { return data[(height() + y) * width() + x]; }
  bool is_valid(std::size_t y, std::size_t x) const { return !valid || (*valid)[y * width() + x] > 0.0; }
};

inline constexpr float kFloTag = 202021.25f;

/// Middlebury .flo: f32 tag, i32 width, i32 height, interleaved f32 (u, v).
FlowField read_flo(const std::filesystem::path& path);
void write_flo(const FlowField& field, const std::filesystem::path& path);

/// KITTI 16-bit RGB PNG: u = (R - 2^15) / 64, v = (G - 2^15) / 64, valid = B > 0.
FlowField read_kitti_png(const std::filesystem::path& path);
void write_kitti_png(const FlowField& field, const std::filesystem::path& path);

/// Interleaved 8-bit RGB raster.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  const std::uint8_t* at(std::size_t y, std::size_t x) const { return pixels.data() + 3 * (y * width + x); }
};

void write_png(const RgbImage& image, const std::filesystem::path& path);

/// PNG (any bit depth / colour type) or binary PPM (P6) as [3 x H x W] in [-1, 1].
Tensor read_image(const std::filesystem::path& path);
/// Writes a [3 x H x W] tensor in [-1, 1] as PNG or PPM by extension.
void write_image(const Tensor& image, const std::filesystem::path& path);

/// Middlebury colour coding. Magnitudes are normalized by max_magnitude, or
/// by the 99th percentile of valid magnitudes when unset.
RgbImage flow_to_color(const FlowField& field, std::optional<double> max_magnitude = std::nullopt);
/// The 55-entry colour wheel (RY 15, YG 6, GC 4, CB 11, BM 13, MR 6).
const std::vector<std::array<std::uint8_t, 3>>& color_wheel();

}  // namespace dcv
