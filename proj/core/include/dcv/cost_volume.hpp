#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dcv/autograd.hpp"
#include "dcv/tensor.hpp"

namespace dcv {

/// One (stride, dilation) sampling configuration. Candidate displacements are
/// stride * dilation * {-radius..radius} input pixels on each axis.
struct CostVolumeSpec {
  int stride = 8;
  int dilation = 1;
  int radius = 4;
  int groups = 4;

  int window() const noexcept { return 2 * radius + 1; }
  std::size_t candidates() const noexcept { return static_cast<std::size_t>(window() * window()); }
  /// Largest displacement magnitude on either axis, in input pixels.
  int reach() const noexcept { return stride * dilation * radius; }
  void validate() const;
  std::string label() const;

  bool operator==(const CostVolumeSpec&) const = default;
};

/// (s=2, d=1) followed by (s=8, d=1, 3, 5, 9, 13, 21).
const std::array<CostVolumeSpec, 7>& canonical_specs();
std::size_t canonical_index(const CostVolumeSpec& spec);

struct Displacement {
  int u = 0;  // horizontal, pixels
  int v = 0;  // vertical, pixels
  bool operator==(const Displacement&) const = default;
};

/// Row-major with v outer and u inner; entry v_idx * window + u_idx.
std::vector<Displacement> displacement_table(const CostVolumeSpec& spec);

/// Cosine similarity of `groups` equal contiguous sub-vector pairs; a zero
/// sub-vector yields 0.
std::vector<double> similarity(std::span<const double> a, std::span<const double> b, std::size_t groups);

/// data is [groups x V x U x h x w]: axis 1 indexes vertical offsets, axis 2
/// horizontal ones, so (v_idx, u_idx) flattens in displacement_table order.
struct CostVolume {
  CostVolumeSpec spec;
  Tensor data;
};

/// Samples outside the second feature map contribute exactly 0.
CostVolume build_cost_volume(const Tensor& f1, const Tensor& f2, const CostVolumeSpec& spec);
Var build_cost_volume(const Var& f1, const Var& f2, const CostVolumeSpec& spec);

/// Concatenated multi-dilation volume [D*C x U*V x H/8 x W/8].
struct CostVolumeStack {
  Tensor data;
  std::vector<CostVolumeSpec> specs;
};

/// Requires the seven canonical specs in order; the stride-2 volume is
/// average-pooled by 4 before concatenation.
CostVolumeStack assemble_stack(const std::vector<CostVolume>& volumes);
Var assemble_stack(const std::vector<Var>& volumes, const std::vector<CostVolumeSpec>& specs);

/// Debug dump: "DCV1", five little-endian u32 extents, then f64 values.
void write_volume_dump(const Tensor& volume, const std::filesystem::path& path);
Tensor read_volume_dump(const std::filesystem::path& path);

}  // namespace dcv
