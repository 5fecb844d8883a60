#include "dcv/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <string>

#include "dcv/errors.hpp"
#include "dcv/parallel.hpp"

namespace dcv {

namespace {

const char* const kAxisNames[3] = {"depth", "height", "width"};

std::string axis_name(std::size_t rank, std::size_t axis) {
  return kAxisNames[axis + (3 - rank)];
}

std::vector<std::size_t> repeat(std::size_t rank, std::size_t v) { return std::vector<std::size_t>(rank, v); }

ConvSpec make_spec(std::size_t rank, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                   std::size_t padding, std::size_t dilation) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = repeat(rank, k);
  s.stride = repeat(rank, stride);
  s.padding = repeat(rank, padding);
  s.dilation = repeat(rank, dilation);
  s.output_padding = repeat(rank, 0);
  s.validate();
  return s;
}

}  // namespace

ConvSpec ConvSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding, std::size_t dilation) {
  return make_spec(2, in, out, kernel, stride, padding, dilation);
}

ConvSpec ConvSpec::conv3d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding, std::size_t dilation) {
  return make_spec(3, in, out, kernel, stride, padding, dilation);
}

void ConvSpec::validate() const {
  const std::size_t r = kernel.size();
  if (r != 2 && r != 3) throw ShapeError("conv spec must have 2 or 3 spatial axes");
  if (stride.size() != r || padding.size() != r || dilation.size() != r || output_padding.size() != r) {
    throw ShapeError("conv spec per-axis vectors disagree in length");
  }
  if (in_channels == 0 || out_channels == 0) throw ShapeError("conv spec channel counts must be >= 1");
  for (std::size_t a = 0; a < r; ++a) {
    if (kernel[a] == 0 || stride[a] == 0 || dilation[a] == 0) {
      throw ShapeError("conv spec kernel/stride/dilation must be >= 1 on " + axis_name(r, a) + " axis");
    }
    if (output_padding[a] >= stride[a] && output_padding[a] != 0) {
      throw ShapeError("conv spec output_padding must be < stride on " + axis_name(r, a) + " axis");
    }
  }
}

Shape ConvSpec::output_extents(const Shape& input_extents) const {
  validate();
  const std::size_t r = spatial_rank();
  if (input_extents.size() != r) throw ShapeError("conv input has wrong spatial rank");
  Shape out(r);
  for (std::size_t a = 0; a < r; ++a) {
    const long long span = static_cast<long long>(input_extents[a]) + 2LL * static_cast<long long>(padding[a]) -
                           static_cast<long long>(dilation[a] * (kernel[a] - 1)) - 1;
    if (span < 0) {
      throw ShapeError("conv output extent on " + axis_name(r, a) + " axis would be < 1 (input " +
                       std::to_string(input_extents[a]) + ")");
    }
    out[a] = static_cast<std::size_t>(span) / stride[a] + 1;
  }
  return out;
}

Shape ConvSpec::transpose_output_extents(const Shape& input_extents) const {
  validate();
  const std::size_t r = spatial_rank();
  if (input_extents.size() != r) throw ShapeError("transposed conv input has wrong spatial rank");
  Shape out(r);
  for (std::size_t a = 0; a < r; ++a) {
    const long long e = (static_cast<long long>(input_extents[a]) - 1) * static_cast<long long>(stride[a]) -
                        2LL * static_cast<long long>(padding[a]) +
                        static_cast<long long>(dilation[a] * (kernel[a] - 1)) + 1 +
                        static_cast<long long>(output_padding[a]);
    if (e < 1) throw ShapeError("transposed conv output extent on " + axis_name(r, a) + " axis would be < 1");
    out[a] = static_cast<std::size_t>(e);
  }
  return out;
}

Shape ConvSpec::weight_shape() const {
  Shape s{out_channels, in_channels};
  s.insert(s.end(), kernel.begin(), kernel.end());
  return s;
}

Shape ConvSpec::transpose_weight_shape() const {
  Shape s{in_channels, out_channels};
  s.insert(s.end(), kernel.begin(), kernel.end());
  return s;
}

namespace kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

constexpr std::size_t kTileBudget = std::size_t{1} << 19;

/// A conv lifted to three spatial axes (2D convs get a unit depth axis).
struct Geometry {
  std::size_t cin = 0;
  std::size_t cout = 0;
  std::array<std::size_t, 3> in{};
  std::array<std::size_t, 3> out{};
  std::array<std::size_t, 3> k{};
  std::array<std::size_t, 3> s{};
  std::array<long long, 3> p{};
  std::array<std::size_t, 3> d{};

  std::size_t rows() const { return cin * k[0] * k[1] * k[2]; }
  std::size_t in_spatial() const { return in[0] * in[1] * in[2]; }
  std::size_t out_spatial() const { return out[0] * out[1] * out[2]; }
  bool pointwise() const {
    return k == std::array<std::size_t, 3>{1, 1, 1} && s == std::array<std::size_t, 3>{1, 1, 1} &&
           p == std::array<long long, 3>{0, 0, 0};
  }
  std::size_t tile() const {
    const std::size_t n = out_spatial();
    const std::size_t t = std::max<std::size_t>(256, kTileBudget / std::max<std::size_t>(1, rows()));
    return std::min(n, t);
  }
};

Geometry make_geometry(const ConvSpec& spec, const Shape& in_ext, const Shape& out_ext) {
  Geometry g;
  g.cin = spec.in_channels;
  g.cout = spec.out_channels;
  const std::size_t r = spec.spatial_rank();
  const std::size_t lift = 3 - r;
  g.in = {1, 1, 1};
  g.out = {1, 1, 1};
  g.k = {1, 1, 1};
  g.s = {1, 1, 1};
  g.p = {0, 0, 0};
  g.d = {1, 1, 1};
  for (std::size_t a = 0; a < r; ++a) {
    g.in[a + lift] = in_ext[a];
    g.out[a + lift] = out_ext[a];
    g.k[a + lift] = spec.kernel[a];
    g.s[a + lift] = spec.stride[a];
    g.p[a + lift] = static_cast<long long>(spec.padding[a]);
    g.d[a + lift] = spec.dilation[a];
  }
  return g;
}

/// Fills col [rows x (p1-p0)] with the receptive fields of output positions [p0, p1).
void im2col_tile(const double* x, const Geometry& g, std::size_t p0, std::size_t p1, double* col) {
  const std::size_t width = p1 - p0;
  const long long in0 = static_cast<long long>(g.in[0]);
  const long long in1 = static_cast<long long>(g.in[1]);
  const long long in2 = static_cast<long long>(g.in[2]);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
      for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++r) {
          double* dst = col + r * width;
          const long long offz = static_cast<long long>(kz * g.d[0]) - g.p[0];
          const long long offy = static_cast<long long>(ky * g.d[1]) - g.p[1];
          const long long offx = static_cast<long long>(kx * g.d[2]) - g.p[2];
          const long long sx = static_cast<long long>(g.s[2]);
          std::size_t pos = p0;
          std::size_t ox = pos % g.out[2];
          std::size_t oy = (pos / g.out[2]) % g.out[1];
          std::size_t oz = pos / (g.out[2] * g.out[1]);
          while (pos < p1) {
            const std::size_t run = std::min<std::size_t>(g.out[2] - ox, p1 - pos);
            const long long iz = static_cast<long long>(oz * g.s[0]) + offz;
            const long long iy = static_cast<long long>(oy * g.s[1]) + offy;
            if (iz < 0 || iz >= in0 || iy < 0 || iy >= in1) {
              std::memset(dst, 0, run * sizeof(double));
            } else {
              const double* row = x + ((static_cast<long long>(ci) * in0 + iz) * in1 + iy) * in2;
              // valid j: 0 <= (ox+j)*sx + offx < in2
              for (std::size_t j = 0; j < run; ++j) {
                const long long ix = static_cast<long long>(ox + j) * sx + offx;
                dst[j] = (ix >= 0 && ix < in2) ? row[ix] : 0.0;
              }
            }
            dst += run;
            pos += run;
            ox += run;
            if (ox == g.out[2]) {
              ox = 0;
              if (++oy == g.out[1]) {
                oy = 0;
                ++oz;
              }
            }
          }
        }
      }
    }
  }
}

/// Scatter-adds col [rows x (p1-p0)] back into the input-shaped buffer dx.
void col2im_tile(const double* col, const Geometry& g, std::size_t p0, std::size_t p1, double* dx) {
  const std::size_t width = p1 - p0;
  const long long in0 = static_cast<long long>(g.in[0]);
  const long long in1 = static_cast<long long>(g.in[1]);
  const long long in2 = static_cast<long long>(g.in[2]);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
      for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++r) {
          const double* src = col + r * width;
          const long long offz = static_cast<long long>(kz * g.d[0]) - g.p[0];
          const long long offy = static_cast<long long>(ky * g.d[1]) - g.p[1];
          const long long offx = static_cast<long long>(kx * g.d[2]) - g.p[2];
          const long long sx = static_cast<long long>(g.s[2]);
          std::size_t pos = p0;
          std::size_t ox = pos % g.out[2];
          std::size_t oy = (pos / g.out[2]) % g.out[1];
          std::size_t oz = pos / (g.out[2] * g.out[1]);
          while (pos < p1) {
            const std::size_t run = std::min<std::size_t>(g.out[2] - ox, p1 - pos);
            const long long iz = static_cast<long long>(oz * g.s[0]) + offz;
            const long long iy = static_cast<long long>(oy * g.s[1]) + offy;
            if (iz >= 0 && iz < in0 && iy >= 0 && iy < in1) {
              double* row = dx + ((static_cast<long long>(ci) * in0 + iz) * in1 + iy) * in2;
              for (std::size_t j = 0; j < run; ++j) {
                const long long ix = static_cast<long long>(ox + j) * sx + offx;
                if (ix >= 0 && ix < in2) row[ix] += src[j];
              }
            }
            src += run;
            pos += run;
            ox += run;
            if (ox == g.out[2]) {
              ox = 0;
              if (++oy == g.out[1]) {
                oy = 0;
                ++oz;
              }
            }
          }
        }
      }
    }
  }
}

struct Tiling {
  std::size_t tile;
  std::size_t count;
};

Tiling tiling_of(const Geometry& g) {
  const std::size_t t = g.tile();
  return {t, (g.out_spatial() + t - 1) / t};
}

/// y [cout x N] = W [cout x rows] * im2col(x).
void forward_core(const double* x, const double* w, const Geometry& g, double* y) {
  const std::size_t n = g.out_spatial();
  const std::size_t rows = g.rows();
  Eigen::Map<const RowMat> wm(w, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(rows));
  if (g.pointwise()) {
    Eigen::Map<const RowMat> xm(x, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
    Eigen::Map<RowMat> ym(y, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(n));
    ym.noalias() = wm * xm;
    return;
  }
  const Tiling tl = tiling_of(g);
  parallel_chunks(tl.count, [&](std::size_t, std::size_t t0, std::size_t t1) {
    std::vector<double> col(rows * tl.tile);
    for (std::size_t t = t0; t < t1; ++t) {
      const std::size_t p0 = t * tl.tile;
      const std::size_t p1 = std::min(n, p0 + tl.tile);
      const std::size_t width = p1 - p0;
      im2col_tile(x, g, p0, p1, col.data());
      Eigen::Map<const RowMat> cm(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width));
      StridedMap ym(y + p0, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(width),
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(n)));
      ym.noalias() = wm * cm;
    }
  });
}

/// dx (input-shaped, accumulated) += col2im(W^T * dy).
void input_grad_core(const double* dy, const double* w, const Geometry& g, double* dx) {
  const std::size_t n = g.out_spatial();
  const std::size_t rows = g.rows();
  Eigen::Map<const RowMat> wm(w, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(rows));
  if (g.pointwise()) {
    Eigen::Map<const RowMat> dym(dy, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(n));
    Eigen::Map<RowMat> dxm(dx, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
    dxm.noalias() += wm.transpose() * dym;
    return;
  }
  const Tiling tl = tiling_of(g);
  const std::size_t chunks = chunk_count(tl.count);
  const std::size_t in_size = g.cin * g.in_spatial();
  std::vector<std::vector<double>> partial(chunks > 1 ? chunks : 0);
  parallel_chunks(tl.count, [&](std::size_t chunk, std::size_t t0, std::size_t t1) {
    double* target = dx;
    if (chunks > 1) {
      partial[chunk].assign(in_size, 0.0);
      target = partial[chunk].data();
    }
    std::vector<double> col(rows * tl.tile);
    for (std::size_t t = t0; t < t1; ++t) {
      const std::size_t p0 = t * tl.tile;
      const std::size_t p1 = std::min(n, p0 + tl.tile);
      const std::size_t width = p1 - p0;
      ConstStridedMap dym(dy + p0, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(width),
                          Eigen::OuterStride<>(static_cast<Eigen::Index>(n)));
      Eigen::Map<RowMat> cm(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width));
      cm.noalias() = wm.transpose() * dym;
      col2im_tile(col.data(), g, p0, p1, target);
    }
  });
  for (const auto& part : partial) {
    for (std::size_t i = 0; i < in_size; ++i) dx[i] += part[i];
  }
}

/// dw [cout x rows] += dy * im2col(x)^T.
void weight_grad_core(const double* x, const double* dy, const Geometry& g, double* dw) {
  const std::size_t n = g.out_spatial();
  const std::size_t rows = g.rows();
  Eigen::Map<RowMat> dwm(dw, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(rows));
  if (g.pointwise()) {
    Eigen::Map<const RowMat> xm(x, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
    Eigen::Map<const RowMat> dym(dy, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(n));
    dwm.noalias() += dym * xm.transpose();
    return;
  }
  const Tiling tl = tiling_of(g);
  const std::size_t chunks = chunk_count(tl.count);
  std::vector<RowMat> partial(chunks > 1 ? chunks : 0);
  parallel_chunks(tl.count, [&](std::size_t chunk, std::size_t t0, std::size_t t1) {
    std::vector<double> col(rows * tl.tile);
    if (chunks > 1) partial[chunk] = RowMat::Zero(static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(rows));
    for (std::size_t t = t0; t < t1; ++t) {
      const std::size_t p0 = t * tl.tile;
      const std::size_t p1 = std::min(n, p0 + tl.tile);
      const std::size_t width = p1 - p0;
      im2col_tile(x, g, p0, p1, col.data());
      Eigen::Map<const RowMat> cm(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width));
      ConstStridedMap dym(dy + p0, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(width),
                          Eigen::OuterStride<>(static_cast<Eigen::Index>(n)));
      if (chunks > 1) {
        partial[chunk].noalias() += dym * cm.transpose();
      } else {
        dwm.noalias() += dym * cm.transpose();
      }
    }
  });
  for (const auto& part : partial) dwm += part;
}

Shape spatial_of(const Tensor& t) { return Shape(t.shape().begin() + 1, t.shape().end()); }

void check_conv_operands(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec,
                         bool transposed, const char* op) {
  spec.validate();
  const std::size_t r = spec.spatial_rank();
  if (input.rank() != r + 1) {
    throw ShapeError(std::string(op) + ": input rank " + std::to_string(input.rank()) + " but spec expects " +
                     std::to_string(r + 1) + " (channels + spatial)");
  }
  const std::size_t expected_in = spec.in_channels;
  if (input.dim(0) != expected_in) {
    throw ShapeError(std::string(op) + ": channel axis has " + std::to_string(input.dim(0)) + " but spec expects " +
                     std::to_string(expected_in));
  }
  const Shape ws = transposed ? spec.transpose_weight_shape() : spec.weight_shape();
  if (weight.shape() != ws) {
    throw ShapeError(std::string(op) + ": weight shape " + shape_string(weight.shape()) + " but spec expects " +
                     shape_string(ws));
  }
  if (bias.shape() != Shape{spec.out_channels}) {
    throw ShapeError(std::string(op) + ": bias shape " + shape_string(bias.shape()) + " but spec expects [" +
                     std::to_string(spec.out_channels) + "]");
  }
}

Tensor conv_forward(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec,
                    const char* op) {
  check_conv_operands(input, weight, bias, spec, false, op);
  const Shape in_ext = spatial_of(input);
  const Shape out_ext = spec.output_extents(in_ext);
  const Geometry g = make_geometry(spec, in_ext, out_ext);
  Shape out_shape{spec.out_channels};
  out_shape.insert(out_shape.end(), out_ext.begin(), out_ext.end());
  Tensor out(out_shape);
  forward_core(input.ptr(), weight.ptr(), g, out.ptr());
  const std::size_t n = g.out_spatial();
  for (std::size_t o = 0; o < g.cout; ++o) {
    double* row = out.ptr() + o * n;
    const double b = bias[o];
    for (std::size_t i = 0; i < n; ++i) row[i] += b;
  }
  return out;
}

Tensor bias_grad(const Tensor& grad_out, std::size_t channels) {
  Tensor gb({channels});
  const std::size_t n = grad_out.size() / channels;
  for (std::size_t o = 0; o < channels; ++o) {
    double s = 0.0;
    const double* row = grad_out.ptr() + o * n;
    for (std::size_t i = 0; i < n; ++i) s += row[i];
    gb[o] = s;
  }
  return gb;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  if (spec.spatial_rank() != 2) throw ShapeError("conv2d: spec must have 2 spatial axes");
  return conv_forward(input, weight, bias, spec, "conv2d");
}

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  if (spec.spatial_rank() != 3) throw ShapeError("conv3d: spec must have 3 spatial axes");
  return conv_forward(input, weight, bias, spec, "conv3d");
}

ConvGrads conv_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out, const ConvSpec& spec,
                        bool need_input) {
  const Shape in_ext = spatial_of(input);
  const Shape out_ext = spec.output_extents(in_ext);
  Shape out_shape{spec.out_channels};
  out_shape.insert(out_shape.end(), out_ext.begin(), out_ext.end());
  if (grad_out.shape() != out_shape) {
    throw ShapeError("conv_backward: grad shape " + shape_string(grad_out.shape()) + " but output is " +
                     shape_string(out_shape));
  }
  const Geometry g = make_geometry(spec, in_ext, out_ext);
  ConvGrads grads;
  grads.weight = Tensor(weight.shape());
  weight_grad_core(input.ptr(), grad_out.ptr(), g, grads.weight.ptr());
  grads.bias = bias_grad(grad_out, spec.out_channels);
  if (need_input) {
    grads.input = Tensor(input.shape());
    input_grad_core(grad_out.ptr(), weight.ptr(), g, grads.input.ptr());
  }
  return grads;
}

namespace {

/// The forward conv whose adjoint is the given transposed conv.
ConvSpec adjoint_spec(const ConvSpec& spec) {
  ConvSpec a = spec;
  a.in_channels = spec.out_channels;
  a.out_channels = spec.in_channels;
  std::fill(a.output_padding.begin(), a.output_padding.end(), 0);
  return a;
}

}  // namespace

Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  if (spec.spatial_rank() != 3) throw ShapeError("conv_transpose3d: spec must have 3 spatial axes");
  check_conv_operands(input, weight, bias, spec, true, "conv_transpose3d");
  const Shape in_ext = spatial_of(input);
  const Shape out_ext = spec.transpose_output_extents(in_ext);
  const ConvSpec adj = adjoint_spec(spec);
  // The adjoint conv maps out_ext -> in_ext.
  if (adj.output_extents(out_ext) != in_ext) {
    throw ShapeError("conv_transpose3d: output_padding inconsistent with stride");
  }
  const Geometry g = make_geometry(adj, out_ext, in_ext);
  Shape out_shape{spec.out_channels};
  out_shape.insert(out_shape.end(), out_ext.begin(), out_ext.end());
  Tensor out(out_shape);
  input_grad_core(input.ptr(), weight.ptr(), g, out.ptr());
  const std::size_t n = g.in_spatial();
  for (std::size_t o = 0; o < spec.out_channels; ++o) {
    double* row = out.ptr() + o * n;
    const double b = bias[o];
    for (std::size_t i = 0; i < n; ++i) row[i] += b;
  }
  return out;
}

ConvGrads conv_transpose_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                                  const ConvSpec& spec, bool need_input) {
  const Shape in_ext = spatial_of(input);
  const Shape out_ext = spec.transpose_output_extents(in_ext);
  Shape out_shape{spec.out_channels};
  out_shape.insert(out_shape.end(), out_ext.begin(), out_ext.end());
  if (grad_out.shape() != out_shape) {
    throw ShapeError("conv_transpose_backward: grad shape " + shape_string(grad_out.shape()) + " but output is " +
                     shape_string(out_shape));
  }
  const ConvSpec adj = adjoint_spec(spec);
  const Geometry g = make_geometry(adj, out_ext, in_ext);
  ConvGrads grads;
  grads.weight = Tensor(weight.shape());
  // Adjoint conv has input = grad_out (image side) and output = input.
  weight_grad_core(grad_out.ptr(), input.ptr(), g, grads.weight.ptr());
  grads.bias = bias_grad(grad_out, spec.out_channels);
  if (need_input) {
    grads.input = Tensor(input.shape());
    forward_core(grad_out.ptr(), weight.ptr(), g, grads.input.ptr());
  }
  return grads;
}

Tensor instance_norm2d(const Tensor& input, const Tensor& gain, const Tensor& shift, double eps) {
  if (input.rank() != 3) throw ShapeError("instance_norm2d: input must be [C x H x W]");
  const std::size_t c = input.dim(0);
  if (gain.shape() != Shape{c} || shift.shape() != Shape{c}) {
    throw ShapeError("instance_norm2d: gain/shift must be [" + std::to_string(c) + "]");
  }
  const std::size_t n = input.dim(1) * input.dim(2);
  Tensor out(input.shape());
  parallel_chunks(c, [&](std::size_t, std::size_t c0, std::size_t c1) {
    for (std::size_t ch = c0; ch < c1; ++ch) {
      const double* x = input.ptr() + ch * n;
      double* y = out.ptr() + ch * n;
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += x[i];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
      var /= static_cast<double>(n);
      const double inv = 1.0 / std::sqrt(var + eps);
      const double g = gain[ch];
      const double b = shift[ch];
      for (std::size_t i = 0; i < n; ++i) y[i] = g * ((x[i] - mean) * inv) + b;
    }
  });
  return out;
}

NormGrads instance_norm2d_backward(const Tensor& input, const Tensor& gain, double eps, const Tensor& grad_out) {
  if (!grad_out.same_shape(input)) throw ShapeError("instance_norm2d_backward: grad shape mismatch");
  const std::size_t c = input.dim(0);
  const std::size_t n = input.dim(1) * input.dim(2);
  NormGrads grads{Tensor(input.shape()), Tensor({c}), Tensor({c})};
  parallel_chunks(c, [&](std::size_t, std::size_t c0, std::size_t c1) {
    std::vector<double> xhat(n);
    for (std::size_t ch = c0; ch < c1; ++ch) {
      const double* x = input.ptr() + ch * n;
      const double* gy = grad_out.ptr() + ch * n;
      double* gx = grads.input.ptr() + ch * n;
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += x[i];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
      var /= static_cast<double>(n);
      const double inv = 1.0 / std::sqrt(var + eps);
      double sum_g = 0.0;
      double sum_gx = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        xhat[i] = (x[i] - mean) * inv;
        sum_g += gy[i];
        sum_gx += gy[i] * xhat[i];
      }
      grads.gain[ch] = sum_gx;
      grads.shift[ch] = sum_g;
      const double g = gain[ch];
      const double mg = sum_g / static_cast<double>(n);
      const double mgx = sum_gx / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) gx[i] = g * inv * (gy[i] - mg - xhat[i] * mgx);
    }
  });
  return grads;
}

Tensor leaky_relu(const Tensor& input, double slope) {
  Tensor out(input.shape());
  const std::size_t n = input.size();
  const double* x = input.ptr();
  double* y = out.ptr();
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
  return out;
}

Tensor leaky_relu_backward(const Tensor& input, double slope, const Tensor& grad_out) {
  if (!grad_out.same_shape(input)) throw ShapeError("leaky_relu_backward: grad shape mismatch");
  Tensor out(input.shape());
  const std::size_t n = input.size();
  const double* x = input.ptr();
  const double* g = grad_out.ptr();
  double* y = out.ptr();
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] >= 0.0 ? g[i] : slope * g[i];
  return out;
}

namespace {

struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t a = 0; a < axis; ++a) s.outer *= shape[a];
  for (std::size_t a = axis + 1; a < shape.size(); ++a) s.inner *= shape[a];
  return s;
}

}  // namespace

Tensor softmax(const Tensor& input, std::size_t axis) {
  const AxisSplit s = split_axis(input.shape(), axis);
  Tensor out(input.shape());
  parallel_chunks(s.outer, [&](std::size_t, std::size_t o0, std::size_t o1) {
    std::vector<double> mx(s.inner);
    std::vector<double> sum(s.inner);
    for (std::size_t o = o0; o < o1; ++o) {
      const double* x = input.ptr() + o * s.len * s.inner;
      double* y = out.ptr() + o * s.len * s.inner;
      std::copy(x, x + s.inner, mx.begin());
      for (std::size_t l = 1; l < s.len; ++l) {
        const double* row = x + l * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) mx[i] = std::max(mx[i], row[i]);
      }
      std::fill(sum.begin(), sum.end(), 0.0);
      for (std::size_t l = 0; l < s.len; ++l) {
        const double* row = x + l * s.inner;
        double* yr = y + l * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) {
          yr[i] = std::exp(row[i] - mx[i]);
          sum[i] += yr[i];
        }
      }
      for (std::size_t l = 0; l < s.len; ++l) {
        double* yr = y + l * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) yr[i] /= sum[i];
      }
    }
  });
  return out;
}

Tensor softmax_backward(const Tensor& output, const Tensor& grad_out, std::size_t axis) {
  if (!grad_out.same_shape(output)) throw ShapeError("softmax_backward: grad shape mismatch");
  const AxisSplit s = split_axis(output.shape(), axis);
  Tensor gin(output.shape());
  parallel_chunks(s.outer, [&](std::size_t, std::size_t o0, std::size_t o1) {
    std::vector<double> dotp(s.inner);
    for (std::size_t o = o0; o < o1; ++o) {
      const std::size_t base = o * s.len * s.inner;
      const double* y = output.ptr() + base;
      const double* g = grad_out.ptr() + base;
      double* gx = gin.ptr() + base;
      std::fill(dotp.begin(), dotp.end(), 0.0);
      for (std::size_t l = 0; l < s.len; ++l) {
        for (std::size_t i = 0; i < s.inner; ++i) dotp[i] += y[l * s.inner + i] * g[l * s.inner + i];
      }
      for (std::size_t l = 0; l < s.len; ++l) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t k = l * s.inner + i;
          gx[k] = y[k] * (g[k] - dotp[i]);
        }
      }
    }
  });
  return gin;
}

Tensor spatial_subsample(const Tensor& input, std::size_t factor) {
  if (factor == 0) throw ShapeError("spatial_subsample: factor must be >= 1");
  if (input.rank() < 2) throw ShapeError("spatial_subsample: input needs two spatial axes");
  const std::size_t r = input.rank();
  const std::size_t h = input.dim(r - 2);
  const std::size_t w = input.dim(r - 1);
  if (h % factor != 0) {
    throw ShapeError("spatial_subsample: height " + std::to_string(h) + " not divisible by " + std::to_string(factor));
  }
  if (w % factor != 0) {
    throw ShapeError("spatial_subsample: width " + std::to_string(w) + " not divisible by " + std::to_string(factor));
  }
  if (factor == 1) return input;
  Shape out_shape = input.shape();
  out_shape[r - 2] = h / factor;
  out_shape[r - 1] = w / factor;
  Tensor out(out_shape);
  const std::size_t planes = input.size() / (h * w);
  const std::size_t oh = h / factor;
  const std::size_t ow = w / factor;
  const double norm = 1.0 / static_cast<double>(factor * factor);
  parallel_chunks(planes, [&](std::size_t, std::size_t p0, std::size_t p1) {
    for (std::size_t p = p0; p < p1; ++p) {
      const double* x = input.ptr() + p * h * w;
      double* y = out.ptr() + p * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double s = 0.0;
          for (std::size_t dy = 0; dy < factor; ++dy) {
            const double* row = x + (oy * factor + dy) * w + ox * factor;
            for (std::size_t dx = 0; dx < factor; ++dx) s += row[dx];
          }
          y[oy * ow + ox] = s * norm;
        }
      }
    }
  });
  return out;
}

Tensor spatial_subsample_backward(const Tensor& grad_out, std::size_t factor, const Shape& input_shape) {
  if (factor == 1) return grad_out.reshaped(input_shape);
  const std::size_t r = input_shape.size();
  const std::size_t h = input_shape[r - 2];
  const std::size_t w = input_shape[r - 1];
  const std::size_t oh = h / factor;
  const std::size_t ow = w / factor;
  Tensor gin(input_shape);
  const std::size_t planes = gin.size() / (h * w);
  if (grad_out.size() != planes * oh * ow) throw ShapeError("spatial_subsample_backward: grad shape mismatch");
  const double norm = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* g = grad_out.ptr() + p * oh * ow;
    double* x = gin.ptr() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) x[y * w + xx] = g[(y / factor) * ow + xx / factor] * norm;
    }
  }
  return gin;
}

}  // namespace kernels
}  // namespace dcv
