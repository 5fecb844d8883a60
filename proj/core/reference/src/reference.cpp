#include "dcv/reference.hpp"

#include <array>
#include <cmath>
#include <limits>

#include "dcv/errors.hpp"

namespace dcv::reference {

namespace {

Tensor conv_nd(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec) {
  // Lift 2D to 3D with a unit depth axis.
  const bool is2d = spec.spatial_rank() == 2;
  const Shape ext = spec.output_extents(Shape(x.shape().begin() + 1, x.shape().end()));
  const std::size_t ci = spec.in_channels;
  const std::size_t co = spec.out_channels;
  const std::size_t D = is2d ? 1 : x.dim(1);
  const std::size_t H = x.dim(is2d ? 1 : 2);
  const std::size_t W = x.dim(is2d ? 2 : 3);
  const std::size_t OD = is2d ? 1 : ext[0];
  const std::size_t OH = ext[is2d ? 0 : 1];
  const std::size_t OW = ext[is2d ? 1 : 2];
  auto lift = [&](const std::vector<std::size_t>& v, long long depth) {
    return is2d ? std::array<long long, 3>{depth, static_cast<long long>(v[0]), static_cast<long long>(v[1])}
                : std::array<long long, 3>{static_cast<long long>(v[0]), static_cast<long long>(v[1]),
                                           static_cast<long long>(v[2])};
  };
  const auto [kd, kh, kw] = lift(spec.kernel, 1);
  const auto [sd, sh, sw] = lift(spec.stride, 1);
  const auto [pd, ph, pw] = lift(spec.padding, 0);
  const auto [dd, dh, dw] = lift(spec.dilation, 1);
  Shape out_shape{co};
  out_shape.insert(out_shape.end(), ext.begin(), ext.end());
  Tensor out(out_shape);
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t z = 0; z < OD; ++z) {
      for (std::size_t y = 0; y < OH; ++y) {
        for (std::size_t xx = 0; xx < OW; ++xx) {
          double acc = b[o];
          for (std::size_t c = 0; c < ci; ++c) {
            for (long long a = 0; a < kd; ++a) {
              const long long iz = static_cast<long long>(z) * sd - pd + a * dd;
              if (iz < 0 || iz >= static_cast<long long>(D)) continue;
              for (long long i = 0; i < kh; ++i) {
                const long long iy = static_cast<long long>(y) * sh - ph + i * dh;
                if (iy < 0 || iy >= static_cast<long long>(H)) continue;
                for (long long j = 0; j < kw; ++j) {
                  const long long ix = static_cast<long long>(xx) * sw - pw + j * dw;
                  if (ix < 0 || ix >= static_cast<long long>(W)) continue;
                  const double wv = w[(((o * ci + c) * kd + a) * kh + i) * kw + j];
                  acc += wv * x[((c * D + iz) * H + iy) * W + ix];
                }
              }
            }
          }
          out[((o * OD + z) * OH + y) * OW + xx] = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  if (spec.spatial_rank() != 2) throw ShapeError("reference::conv2d needs a 2D spec");
  return conv_nd(input, weight, bias, spec);
}

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  if (spec.spatial_rank() != 3) throw ShapeError("reference::conv3d needs a 3D spec");
  return conv_nd(input, weight, bias, spec);
}

Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  const Shape in_ext(input.shape().begin() + 1, input.shape().end());
  const Shape ext = spec.transpose_output_extents(in_ext);
  const std::size_t ci = spec.in_channels;
  const std::size_t co = spec.out_channels;
  Tensor out({co, ext[0], ext[1], ext[2]});
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t p = 0; p < ext[0] * ext[1] * ext[2]; ++p) out[o * ext[0] * ext[1] * ext[2] + p] = bias[o];
  }
  const auto k = spec.kernel;
  for (std::size_t c = 0; c < ci; ++c) {
    for (std::size_t z = 0; z < in_ext[0]; ++z) {
      for (std::size_t y = 0; y < in_ext[1]; ++y) {
        for (std::size_t x = 0; x < in_ext[2]; ++x) {
          const double v = input[((c * in_ext[0] + z) * in_ext[1] + y) * in_ext[2] + x];
          for (std::size_t o = 0; o < co; ++o) {
            for (std::size_t a = 0; a < k[0]; ++a) {
              const long long oz = static_cast<long long>(z * spec.stride[0] + a * spec.dilation[0]) -
                                   static_cast<long long>(spec.padding[0]);
              if (oz < 0 || oz >= static_cast<long long>(ext[0])) continue;
              for (std::size_t i = 0; i < k[1]; ++i) {
                const long long oy = static_cast<long long>(y * spec.stride[1] + i * spec.dilation[1]) -
                                     static_cast<long long>(spec.padding[1]);
                if (oy < 0 || oy >= static_cast<long long>(ext[1])) continue;
                for (std::size_t j = 0; j < k[2]; ++j) {
                  const long long ox = static_cast<long long>(x * spec.stride[2] + j * spec.dilation[2]) -
                                       static_cast<long long>(spec.padding[2]);
                  if (ox < 0 || ox >= static_cast<long long>(ext[2])) continue;
                  const double wv = weight[(((c * co + o) * k[0] + a) * k[1] + i) * k[2] + j];
                  out[((o * ext[0] + oz) * ext[1] + oy) * ext[2] + ox] += wv * v;
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor instance_norm2d(const Tensor& input, const Tensor& gain, const Tensor& shift, double eps) {
  const std::size_t C = input.dim(0);
  const std::size_t n = input.dim(1) * input.dim(2);
  Tensor out(input.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += input[c * n + i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (input[c * n + i] - mean) * (input[c * n + i] - mean);
    var /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[c * n + i] = gain[c] * (input[c * n + i] - mean) / std::sqrt(var + eps) + shift[c];
    }
  }
  return out;
}

Tensor softmax(const Tensor& input, std::size_t axis) {
  if (axis >= input.rank()) throw ShapeError("reference::softmax: axis out of range");
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= input.dim(a);
  for (std::size_t a = axis + 1; a < input.rank(); ++a) inner *= input.dim(a);
  const std::size_t len = input.dim(axis);
  Tensor out(input.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, input[(o * len + k) * inner + i]);
      double total = 0.0;
      for (std::size_t k = 0; k < len; ++k) total += std::exp(input[(o * len + k) * inner + i] - mx);
      for (std::size_t k = 0; k < len; ++k) {
        out[(o * len + k) * inner + i] = std::exp(input[(o * len + k) * inner + i] - mx) / total;
      }
    }
  }
  return out;
}

Tensor spatial_subsample(const Tensor& input, std::size_t factor) {
  const std::size_t r = input.rank();
  const std::size_t h = input.dim(r - 2);
  const std::size_t w = input.dim(r - 1);
  Shape s = input.shape();
  s[r - 2] = h / factor;
  s[r - 1] = w / factor;
  Tensor out(s);
  const std::size_t planes = input.size() / (h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h / factor; ++y) {
      for (std::size_t x = 0; x < w / factor; ++x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < factor; ++i) {
          for (std::size_t j = 0; j < factor; ++j) acc += input[(p * h + y * factor + i) * w + x * factor + j];
        }
        out[(p * (h / factor) + y) * (w / factor) + x] = acc / static_cast<double>(factor * factor);
      }
    }
  }
  return out;
}

Tensor cost_volume(const Tensor& f1, const Tensor& f2, const CostVolumeSpec& spec) {
  const std::size_t C = f1.dim(0);
  const std::size_t h = f1.dim(1);
  const std::size_t w = f1.dim(2);
  const auto G = static_cast<std::size_t>(spec.groups);
  const auto win = static_cast<std::size_t>(spec.window());
  const std::size_t len = C / G;
  Tensor out({G, win, win, h, w});
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t jv = 0; jv < win; ++jv) {
      for (std::size_t iu = 0; iu < win; ++iu) {
        const long long dy = spec.dilation * (static_cast<long long>(jv) - spec.radius);
        const long long dx = spec.dilation * (static_cast<long long>(iu) - spec.radius);
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const long long y2 = static_cast<long long>(y) + dy;
            const long long x2 = static_cast<long long>(x) + dx;
            double value = 0.0;
            if (y2 >= 0 && y2 < static_cast<long long>(h) && x2 >= 0 && x2 < static_cast<long long>(w)) {
              double d = 0.0;
              double na = 0.0;
              double nb = 0.0;
              for (std::size_t c = g * len; c < (g + 1) * len; ++c) {
                const double a = f1[(c * h + y) * w + x];
                const double b = f2[(c * h + static_cast<std::size_t>(y2)) * w + static_cast<std::size_t>(x2)];
                d += a * b;
                na += a * a;
                nb += b * b;
              }
              value = (na == 0.0 || nb == 0.0) ? 0.0 : d / (std::sqrt(na) * std::sqrt(nb));
            }
            out[(((g * win + jv) * win + iu) * h + y) * w + x] = value;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace dcv::reference
