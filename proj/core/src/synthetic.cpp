#include "dcv/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dcv/errors.hpp"

namespace dcv {

namespace {

struct Octave {
  double cell;
  double amplitude;
};

constexpr Octave kOctaves[] = {{16.0, 1.0}, {8.0, 0.6}, {4.0, 0.35}};

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic lattice value in [-1, 1].
double lattice(std::uint64_t key, long long ix, long long iy) {
  const std::uint64_t h = mix(key ^ mix(static_cast<std::uint64_t>(ix) ^ mix(static_cast<std::uint64_t>(iy))));
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(std::uint64_t key, double x, double y, double cell) {
  const double gx = x / cell;
  const double gy = y / cell;
  const double fx = std::floor(gx);
  const double fy = std::floor(gy);
  const auto ix = static_cast<long long>(fx);
  const auto iy = static_cast<long long>(fy);
  const double tx = smoothstep(gx - fx);
  const double ty = smoothstep(gy - fy);
  const double top = lattice(key, ix, iy) * (1.0 - tx) + lattice(key, ix + 1, iy) * tx;
  const double bottom = lattice(key, ix, iy + 1) * (1.0 - tx) + lattice(key, ix + 1, iy + 1) * tx;
  return top * (1.0 - ty) + bottom * ty;
}

double texture(std::uint64_t seed, std::size_t channel, double x, double y) {
  double sum = 0.0;
  double norm = 0.0;
  for (std::size_t o = 0; o < std::size(kOctaves); ++o) {
    const std::uint64_t key = mix(seed * 131 + channel * 7 + o);
    sum += kOctaves[o].amplitude * value_noise(key, x, y, kOctaves[o].cell);
    norm += kOctaves[o].amplitude;
  }
  return sum / norm;
}

double sample_bilinear(const double* plane, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double ty = y - static_cast<double>(y0);
  const double tx = x - static_cast<double>(x0);
  const double top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
  const double bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
  return top * (1.0 - ty) + bottom * ty;
}

struct Motion {
  MotionKind kind;
  std::array<double, 2> t{};
  std::array<double, 6> a{};
  double cx = 0, cy = 0;
  double magnitude = 0, cell = 1;
  std::uint64_t key = 0;

  std::array<double, 2> forward(double x, double y) const {
    switch (kind) {
      case MotionKind::translation:
        return t;
      case MotionKind::affine:
        return {a[0] * (x - cx) + a[1] * (y - cy) + a[2], a[3] * (x - cx) + a[4] * (y - cy) + a[5]};
      case MotionKind::smooth_random:
        return {magnitude * value_noise(key, x, y, cell), magnitude * value_noise(key + 1, x, y, cell)};
    }
    return {0.0, 0.0};
  }

  /// Source point p with p + forward(p) = q.
  std::array<double, 2> inverse(double qx, double qy) const {
    if (kind == MotionKind::affine) {
      const double m00 = 1.0 + a[0], m01 = a[1], m10 = a[3], m11 = 1.0 + a[4];
      const double det = m00 * m11 - m01 * m10;
      const double rx = qx - cx - a[2];
      const double ry = qy - cy - a[5];
      return {cx + (m11 * rx - m01 * ry) / det, cy + (-m10 * rx + m00 * ry) / det};
    }
    double px = qx;
    double py = qy;
    for (int i = 0; i < 60; ++i) {
      const auto f = forward(px, py);
      px = qx - f[0];
      py = qy - f[1];
    }
    return {px, py};
  }
};

}  // namespace

MotionKind parse_motion_kind(const std::string& name) {
  if (name == "translation") return MotionKind::translation;
  if (name == "affine") return MotionKind::affine;
  if (name == "smooth-random") return MotionKind::smooth_random;
  throw ConfigError("unknown motion kind '" + name + "' (expected translation, affine or smooth-random)");
}

std::string motion_kind_name(MotionKind kind) {
  switch (kind) {
    case MotionKind::translation:
      return "translation";
    case MotionKind::affine:
      return "affine";
    case MotionKind::smooth_random:
      return "smooth-random";
  }
  return "unknown";
}

Tensor value_noise_texture(std::size_t height, std::size_t width, std::uint64_t seed, double x0, double y0) {
  Tensor img({3, height, width});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        img[(c * height + y) * width + x] =
            texture(seed, c, x0 + static_cast<double>(x), y0 + static_cast<double>(y));
      }
    }
  }
  return img;
}

Tensor warp_bilinear(const Tensor& image, const Tensor& offset) {
  if (image.rank() != 3) throw ShapeError("warp_bilinear: image must be [C x H x W]");
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  if (offset.shape() != Shape{2, h, w}) {
    throw ShapeError("warp_bilinear: offset " + shape_string(offset.shape()) + " does not match image " +
                     shape_string(image.shape()));
  }
  Tensor out(image.shape());
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    const double* plane = image.ptr() + c * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t p = y * w + x;
        out[c * h * w + p] = sample_bilinear(plane, h, w, static_cast<double>(y) + offset[h * w + p],
                                             static_cast<double>(x) + offset[p]);
      }
    }
  }
  return out;
}

SyntheticSample synthetic_pair(const SyntheticSpec& spec) {
  if (!std::isfinite(spec.magnitude) || spec.magnitude < 0.0 || spec.magnitude > kMaxSyntheticMagnitude) {
    throw ConfigError("synthetic magnitude must lie in [0, 672], got " + std::to_string(spec.magnitude));
  }
  if (spec.height == 0 || spec.width == 0) throw ConfigError("synthetic image size must be positive");
  const std::size_t H = spec.height;
  const std::size_t W = spec.width;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  Motion m{spec.kind};
  m.cx = 0.5 * static_cast<double>(W - 1);
  m.cy = 0.5 * static_cast<double>(H - 1);
  switch (spec.kind) {
    case MotionKind::translation:
      if (spec.translation) {
        m.t = *spec.translation;
        if (std::abs(m.t[0]) > spec.magnitude || std::abs(m.t[1]) > spec.magnitude) {
          throw ConfigError("translation exceeds the stated magnitude");
        }
      } else {
        do {
          m.t = {spec.magnitude * unit(rng), spec.magnitude * unit(rng)};
        } while (std::hypot(m.t[0], m.t[1]) > spec.magnitude);
      }
      break;
    case MotionKind::affine: {
      const double half = 0.5 * static_cast<double>(std::max(H, W));
      const double lin = std::min(0.1, spec.magnitude / (4.0 * half));
      m.a = {lin * unit(rng), lin * unit(rng), 0.5 * spec.magnitude * unit(rng),
             lin * unit(rng), lin * unit(rng), 0.5 * spec.magnitude * unit(rng)};
      break;
    }
    case MotionKind::smooth_random:
      m.magnitude = spec.magnitude;
      m.cell = std::max(0.5 * static_cast<double>(std::max(H, W)), 2.0 * spec.magnitude);
      m.key = mix(rng());
      break;
  }
  const std::uint64_t texture_seed = rng();

  Tensor gt({2, H, W});
  Tensor back({2, H, W});
  double reach = 0.0;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t p = y * W + x;
      const auto f = m.forward(static_cast<double>(x), static_cast<double>(y));
      gt[p] = f[0];
      gt[H * W + p] = f[1];
      const auto src = m.inverse(static_cast<double>(x), static_cast<double>(y));
      back[p] = src[0] - static_cast<double>(x);
      back[H * W + p] = src[1] - static_cast<double>(y);
      reach = std::max({reach, std::abs(back[p]), std::abs(back[H * W + p])});
    }
  }

  // Render the first frame on a canvas wide enough that warping never clamps.
  const auto margin = static_cast<std::size_t>(std::ceil(reach)) + 2;
  const std::size_t CH = H + 2 * margin;
  const std::size_t CW = W + 2 * margin;
  const double off = static_cast<double>(margin);
  Tensor canvas = value_noise_texture(CH, CW, texture_seed, -off, -off);
  Tensor first({3, H, W});
  Tensor second({3, H, W});
  for (std::size_t c = 0; c < 3; ++c) {
    const double* plane = canvas.ptr() + c * CH * CW;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t p = y * W + x;
        first[c * H * W + p] = plane[(y + margin) * CW + x + margin];
        second[c * H * W + p] = sample_bilinear(plane, CH, CW, static_cast<double>(y) + off + back[H * W + p],
                                                static_cast<double>(x) + off + back[p]);
      }
    }
  }
  SyntheticSample s{ImagePair::make(std::move(first), std::move(second)), FlowField::make(std::move(gt)), m.a};
  return s;
}

}  // namespace dcv
