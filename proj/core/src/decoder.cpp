#include "dcv/decoder.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "dcv/errors.hpp"
#include "dcv/ops.hpp"

namespace dcv {

namespace {

using detail::Node;

constexpr double kSlope = 0.1;
constexpr std::size_t kAsppWidth = 48;
constexpr std::size_t kFusionFeatures = 32;
/// Flow magnitudes entering the upsample heads are divided by this.
constexpr double kGuideFlowScale = 1.0 / 32.0;

struct UnetWidths {
  std::size_t l0 = 32;
  std::size_t l1 = 64;
  std::size_t l2 = 96;
};
constexpr UnetWidths kUnet{};

constexpr std::size_t kFusionWidths[] = {64, 64, kFusionFeatures, kNumDilations};

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Var conv(const Var& x, const ModelParams& params, const std::string& prefix, const ConvSpec& spec) {
  ConvVars cv = bind_conv(x.tape(), params, prefix);
  return spec.spatial_rank() == 2 ? ops::conv2d(x, cv.weight, cv.bias, spec) : ops::conv3d(x, cv.weight, cv.bias, spec);
}

Var conv_act(const Var& x, const ModelParams& params, const std::string& prefix, const ConvSpec& spec) {
  return ops::leaky_relu(conv(x, params, prefix, spec), kSlope);
}

/// Stride-2 transposed 3x3x3 conv whose output matches `target` extents.
Var upconv(const Var& x, const ModelParams& params, const std::string& prefix, std::size_t in, std::size_t out,
           const Shape& target) {
  ConvSpec spec = ConvSpec::conv3d(in, out, 3, 2, 1);
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t base = 2 * x.shape()[a + 1] - 1;
    if (target[a + 1] < base || target[a + 1] > base + 1) {
      throw ShapeError("unet3d: cannot upsample " + shape_string(x.shape()) + " to " + shape_string(target));
    }
    spec.output_padding[a] = target[a + 1] - base;
  }
  ConvVars cv = bind_conv(x.tape(), params, prefix);
  return ops::leaky_relu(ops::conv_transpose3d(x, cv.weight, cv.bias, spec), kSlope);
}

void check_specs(const std::vector<CostVolumeSpec>& specs, std::size_t d, std::size_t candidates, const char* op) {
  if (specs.size() != d) {
    throw ShapeError(std::string(op) + ": " + std::to_string(specs.size()) + " specs for " + std::to_string(d) +
                     " dilations");
  }
  for (const auto& s : specs) {
    if (s.candidates() != candidates) {
      throw ShapeError(std::string(op) + ": spec (" + s.label() + ") has " + std::to_string(s.candidates()) +
                       " candidates, axis has " + std::to_string(candidates));
    }
  }
}

std::vector<CostVolumeSpec> canonical_vector() {
  const auto& c = canonical_specs();
  return {c.begin(), c.end()};
}

/// [3D x h x w]: per dilation u/(s*d*k), v/(s*d*k), entropy.
Var fusion_input(const Var& flows, const Var& entropy, const std::vector<CostVolumeSpec>& specs) {
  const Shape& fs = flows.shape();
  if (fs.size() != 4 || fs[1] != 2) throw ShapeError("fuse: flows must be [D x 2 x h x w], got " + shape_string(fs));
  if (entropy.shape() != Shape{fs[0], fs[2], fs[3]}) {
    throw ShapeError("fuse: entropy shape " + shape_string(entropy.shape()) + " does not match flows " +
                     shape_string(fs));
  }
  if (specs.size() != fs[0]) throw ShapeError("fuse: spec count does not match flows");
  const std::size_t d = fs[0];
  const std::size_t n = fs[2] * fs[3];
  std::vector<double> inv(d);
  for (std::size_t i = 0; i < d; ++i) inv[i] = specs[i].reach() > 0 ? 1.0 / specs[i].reach() : 1.0;
  Tensor out({3 * d, fs[2], fs[3]});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      const double* src = flows.value().ptr() + (i * 2 + c) * n;
      double* dst = out.ptr() + (3 * i + c) * n;
      for (std::size_t p = 0; p < n; ++p) dst[p] = src[p] * inv[i];
    }
    std::copy_n(entropy.value().ptr() + i * n, n, out.ptr() + (3 * i + 2) * n);
  }
  return flows.tape().record(std::move(out), {flows, entropy}, [inv, d, n](Node& node) {
    if (Tape::input_needs_grad(node, 0)) {
      Tensor g(node.inputs[0]->value.shape());
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t c = 0; c < 2; ++c) {
          const double* src = node.grad.ptr() + (3 * i + c) * n;
          double* dst = g.ptr() + (i * 2 + c) * n;
          for (std::size_t p = 0; p < n; ++p) dst[p] = src[p] * inv[i];
        }
      }
      node.inputs[0]->accumulate(std::move(g));
    }
    if (Tape::input_needs_grad(node, 1)) {
      Tensor g(node.inputs[1]->value.shape());
      for (std::size_t i = 0; i < d; ++i) std::copy_n(node.grad.ptr() + (3 * i + 2) * n, n, g.ptr() + i * n);
      node.inputs[1]->accumulate(std::move(g));
    }
  });
}

void append_unet_layout(std::vector<ParamSpec>& l) {
  const Shape k3{3, 3, 3};
  const Shape k1{1, 1, 1};
  add_conv_params(l, "decoder.unet.enc0", kUnet.l0, kStackChannels, k3);
  add_conv_params(l, "decoder.unet.down1", kUnet.l1, kUnet.l0, k3);
  add_conv_params(l, "decoder.unet.enc1", kUnet.l1, kUnet.l1, k3);
  add_conv_params(l, "decoder.unet.down2", kUnet.l2, kUnet.l1, k3);
  append_aspp_layout(l, "decoder.unet.aspp", kUnet.l2, kAsppWidth);
  add_conv_transpose_params(l, "decoder.unet.up1", kUnet.l2, kUnet.l1, k3);
  add_conv_params(l, "decoder.unet.dec1", kUnet.l1, 2 * kUnet.l1, k3);
  add_conv_transpose_params(l, "decoder.unet.up0", kUnet.l1, kUnet.l0, k3);
  add_conv_params(l, "decoder.unet.dec0", kUnet.l0, 2 * kUnet.l0, k3);
  add_conv_params(l, "decoder.unet.head", kNumDilations, kUnet.l0, k1);
}

}  // namespace

void append_aspp_layout(std::vector<ParamSpec>& l, const std::string& prefix, std::size_t channels,
                        std::size_t branch_width, const AsppConfig& config) {
  std::size_t branches = config.dilations.size();
  if (config.pointwise_branch) {
    add_conv_params(l, prefix + ".pointwise", branch_width, channels, {1, 1, 1});
    ++branches;
  }
  for (std::size_t i = 0; i < config.dilations.size(); ++i) {
    add_conv_params(l, prefix + ".branch" + std::to_string(i), branch_width, channels, {3, 3, 3});
  }
  add_conv_params(l, prefix + ".project", channels, branches * branch_width, {1, 1, 1});
}

void append_decoder_layout(std::vector<ParamSpec>& l) {
  append_unet_layout(l);
  std::size_t in = 3 * kNumDilations;
  for (std::size_t i = 0; i < std::size(kFusionWidths); ++i) {
    add_conv_params(l, "decoder.fusion.conv" + std::to_string(i), kFusionWidths[i], in, {3, 3});
    in = kFusionWidths[i];
  }
  add_conv_params(l, "decoder.up4.conv0", 64, kFusionFeatures + 2, {3, 3});
  add_conv_params(l, "decoder.up4.conv1", 9 * 16, 64, {1, 1});
  add_conv_params(l, "decoder.up2.conv0", 32, 2, {3, 3});
  add_conv_params(l, "decoder.up2.conv1", 32, 32, {3, 3});
  add_conv_params(l, "decoder.up2.conv2", 9 * 4, 32, {1, 1});
}

Var aspp(const Var& feat, const ModelParams& params, const std::string& prefix, std::size_t channels,
         std::size_t branch_width, const AsppConfig& config) {
  if (feat.shape().size() != 4 || feat.shape()[0] != channels) {
    throw ShapeError("aspp: expected [" + std::to_string(channels) + " x D x H x W], got " +
                     shape_string(feat.shape()));
  }
  std::vector<Var> branches;
  if (config.pointwise_branch) {
    branches.push_back(conv_act(feat, params, prefix + ".pointwise", ConvSpec::conv3d(channels, branch_width, 1)));
  }
  for (std::size_t i = 0; i < config.dilations.size(); ++i) {
    const std::size_t d = config.dilations[i];
    branches.push_back(conv_act(feat, params, prefix + ".branch" + std::to_string(i),
                                ConvSpec::conv3d(channels, branch_width, 3, 1, d, d)));
  }
  Var cat = branches.size() == 1 ? branches[0] : ops::concat(branches);
  return conv_act(cat, params, prefix + ".project", ConvSpec::conv3d(branches.size() * branch_width, channels, 1));
}

Var unet3d(const Var& stack, const ModelParams& params) {
  const Shape& s = stack.shape();
  if (s.size() != 4 || s[0] != kStackChannels || s[1] != kCandidates) {
    throw ShapeError("unet3d: expected stack [28 x 81 x h x w], got " + shape_string(s));
  }
  Var e0 = conv_act(stack, params, "decoder.unet.enc0", ConvSpec::conv3d(kStackChannels, kUnet.l0, 3, 1, 1));
  Var e1 = conv_act(e0, params, "decoder.unet.down1", ConvSpec::conv3d(kUnet.l0, kUnet.l1, 3, 2, 1));
  e1 = conv_act(e1, params, "decoder.unet.enc1", ConvSpec::conv3d(kUnet.l1, kUnet.l1, 3, 1, 1));
  Var b = conv_act(e1, params, "decoder.unet.down2", ConvSpec::conv3d(kUnet.l1, kUnet.l2, 3, 2, 1));
  b = aspp(b, params, "decoder.unet.aspp", kUnet.l2, kAsppWidth);
  Var d1 = upconv(b, params, "decoder.unet.up1", kUnet.l2, kUnet.l1, e1.shape());
  d1 = conv_act(ops::concat({d1, e1}), params, "decoder.unet.dec1", ConvSpec::conv3d(2 * kUnet.l1, kUnet.l1, 3, 1, 1));
  Var d0 = upconv(d1, params, "decoder.unet.up0", kUnet.l1, kUnet.l0, e0.shape());
  d0 = conv_act(ops::concat({d0, e0}), params, "decoder.unet.dec0", ConvSpec::conv3d(2 * kUnet.l0, kUnet.l0, 3, 1, 1));
  return conv(d0, params, "decoder.unet.head", ConvSpec::conv3d(kUnet.l0, kNumDilations, 1));
}

Tensor unet3d(const Tensor& stack, const ModelParams& params) {
  Tape tape(false);
  return unet3d(tape.constant(stack), params).value();
}

Var interpolation_weights(const Var& logits) { return ops::softmax(logits, 1); }

Tensor interpolation_weights(const Tensor& logits) { return kernels::softmax(logits, 1); }

Tensor flow_hypotheses(const Tensor& omega, const std::vector<CostVolumeSpec>& specs) {
  if (omega.rank() != 4) throw ShapeError("flow_hypotheses: omega must be [D x D' x h x w]");
  const std::size_t d = omega.dim(0);
  const std::size_t k = omega.dim(1);
  check_specs(specs, d, k, "flow_hypotheses");
  const std::size_t n = omega.dim(2) * omega.dim(3);
  Tensor out({d, 2, omega.dim(2), omega.dim(3)});
  for (std::size_t i = 0; i < d; ++i) {
    const auto table = displacement_table(specs[i]);
    double* u = out.ptr() + (2 * i) * n;
    double* v = out.ptr() + (2 * i + 1) * n;
    for (std::size_t c = 0; c < k; ++c) {
      const double* w = omega.ptr() + (i * k + c) * n;
      const double du = table[c].u;
      const double dv = table[c].v;
      for (std::size_t p = 0; p < n; ++p) {
        u[p] += w[p] * du;
        v[p] += w[p] * dv;
      }
    }
  }
  return out;
}

Var flow_hypotheses(const Var& omega, const std::vector<CostVolumeSpec>& specs) {
  Tensor out = flow_hypotheses(omega.value(), specs);
  return omega.tape().record(std::move(out), {omega}, [specs](Node& node) {
    const Shape& s = node.inputs[0]->value.shape();
    const std::size_t k = s[1];
    const std::size_t n = s[2] * s[3];
    Tensor g(s);
    for (std::size_t i = 0; i < s[0]; ++i) {
      const auto table = displacement_table(specs[i]);
      const double* gu = node.grad.ptr() + (2 * i) * n;
      const double* gv = node.grad.ptr() + (2 * i + 1) * n;
      for (std::size_t c = 0; c < k; ++c) {
        double* dst = g.ptr() + (i * k + c) * n;
        for (std::size_t p = 0; p < n; ++p) dst[p] = gu[p] * table[c].u + gv[p] * table[c].v;
      }
    }
    node.inputs[0]->accumulate(std::move(g));
  });
}

Tensor entropy_map(const Tensor& omega, double eps) {
  if (omega.rank() != 4) throw ShapeError("entropy_map: omega must be [D x D' x h x w]");
  const std::size_t k = omega.dim(1);
  const std::size_t n = omega.dim(2) * omega.dim(3);
  Tensor out({omega.dim(0), omega.dim(2), omega.dim(3)});
  for (std::size_t i = 0; i < omega.dim(0); ++i) {
    double* h = out.ptr() + i * n;
    for (std::size_t c = 0; c < k; ++c) {
      const double* w = omega.ptr() + (i * k + c) * n;
      for (std::size_t p = 0; p < n; ++p) h[p] -= w[p] * std::log(w[p] + eps);
    }
  }
  return out;
}

Var entropy_map(const Var& omega, double eps) {
  Tensor out = entropy_map(omega.value(), eps);
  return omega.tape().record(std::move(out), {omega}, [eps](Node& node) {
    const Tensor& w = node.inputs[0]->value;
    const std::size_t k = w.dim(1);
    const std::size_t n = w.dim(2) * w.dim(3);
    Tensor g(w.shape());
    for (std::size_t i = 0; i < w.dim(0); ++i) {
      const double* gh = node.grad.ptr() + i * n;
      for (std::size_t c = 0; c < k; ++c) {
        const std::size_t off = (i * k + c) * n;
        for (std::size_t p = 0; p < n; ++p) {
          const double x = w[off + p];
          g[off + p] = -gh[p] * (std::log(x + eps) + x / (x + eps));
        }
      }
    }
    node.inputs[0]->accumulate(std::move(g));
  });
}

Tensor weighted_flow_sum(const Tensor& alpha, const Tensor& flows) {
  if (flows.rank() != 4 || flows.dim(1) != 2) throw ShapeError("fuse: flows must be [D x 2 x h x w]");
  if (alpha.shape() != Shape{flows.dim(0), flows.dim(2), flows.dim(3)}) {
    throw ShapeError("fuse: alpha shape " + shape_string(alpha.shape()) + " does not match flows " +
                     shape_string(flows.shape()));
  }
  const std::size_t n = flows.dim(2) * flows.dim(3);
  Tensor out({2, flows.dim(2), flows.dim(3)});
  for (std::size_t d = 0; d < flows.dim(0); ++d) {
    const double* a = alpha.ptr() + d * n;
    for (std::size_t c = 0; c < 2; ++c) {
      const double* f = flows.ptr() + (2 * d + c) * n;
      double* o = out.ptr() + c * n;
      for (std::size_t p = 0; p < n; ++p) o[p] += a[p] * f[p];
    }
  }
  return out;
}

Var weighted_flow_sum(const Var& alpha, const Var& flows) {
  Tensor out = weighted_flow_sum(alpha.value(), flows.value());
  return alpha.tape().record(std::move(out), {alpha, flows}, [](Node& node) {
    const Tensor& a = node.inputs[0]->value;
    const Tensor& f = node.inputs[1]->value;
    const std::size_t n = f.dim(2) * f.dim(3);
    Tensor ga(a.shape());
    Tensor gf(f.shape());
    for (std::size_t d = 0; d < f.dim(0); ++d) {
      for (std::size_t c = 0; c < 2; ++c) {
        const double* g = node.grad.ptr() + c * n;
        for (std::size_t p = 0; p < n; ++p) {
          ga[d * n + p] += g[p] * f[(2 * d + c) * n + p];
          gf[(2 * d + c) * n + p] = a[d * n + p] * g[p];
        }
      }
    }
    if (Tape::input_needs_grad(node, 0)) node.inputs[0]->accumulate(std::move(ga));
    if (Tape::input_needs_grad(node, 1)) node.inputs[1]->accumulate(std::move(gf));
  });
}

FusionVars fuse(const Var& flows, const Var& entropy, const std::vector<CostVolumeSpec>& specs,
                const ModelParams& params) {
  if (flows.shape().empty() || flows.shape()[0] != kNumDilations) {
    throw ShapeError("fuse: expected " + std::to_string(kNumDilations) + " hypotheses, got " +
                     shape_string(flows.shape()));
  }
  Var x = fusion_input(flows, entropy, specs);
  std::size_t in = 3 * kNumDilations;
  Var features;
  for (std::size_t i = 0; i < std::size(kFusionWidths); ++i) {
    const ConvSpec spec = ConvSpec::conv2d(in, kFusionWidths[i], 3, 1, 1);
    const std::string name = "decoder.fusion.conv" + std::to_string(i);
    const bool last = i + 1 == std::size(kFusionWidths);
    x = last ? conv(x, params, name, spec) : conv_act(x, params, name, spec);
    if (kFusionWidths[i] == kFusionFeatures && !last) features = x;
    in = kFusionWidths[i];
  }
  Var alpha = ops::softmax(x, 0);
  return {alpha, weighted_flow_sum(alpha, flows), features};
}

Tensor convex_combine(const Tensor& flow, const Tensor& weights, std::size_t factor) {
  if (flow.rank() != 3) throw ShapeError("convex_combine: flow must be [C x h x w], got " + shape_string(flow.shape()));
  const std::size_t h = flow.dim(1);
  const std::size_t w = flow.dim(2);
  if (weights.shape() != Shape{9, factor * factor, h, w}) {
    throw ShapeError("convex_combine: weights " + shape_string(weights.shape()) + " but expected " +
                     shape_string({9, factor * factor, h, w}));
  }
  const std::size_t n = h * w;
  const std::size_t ff = factor * factor;
  const std::size_t fw = w * factor;
  Tensor out({flow.dim(0), h * factor, fw});
  for (std::size_t c = 0; c < flow.dim(0); ++c) {
    const double* src = flow.ptr() + c * n;
    double* dst = out.ptr() + c * n * ff;
    for (std::size_t k = 0; k < 9; ++k) {
      const long long ky = static_cast<long long>(k / 3) - 1;
      const long long kx = static_cast<long long>(k % 3) - 1;
      for (std::size_t s = 0; s < ff; ++s) {
        const std::size_t fy = s / factor;
        const std::size_t fx = s % factor;
        const double* wk = weights.ptr() + (k * ff + s) * n;
        for (std::size_t y = 0; y < h; ++y) {
          const auto ny = static_cast<std::size_t>(std::clamp<long long>(static_cast<long long>(y) + ky, 0, h - 1));
          double* row = dst + (y * factor + fy) * fw;
          for (std::size_t x = 0; x < w; ++x) {
            const auto nx = static_cast<std::size_t>(std::clamp<long long>(static_cast<long long>(x) + kx, 0, w - 1));
            row[x * factor + fx] += wk[y * w + x] * src[ny * w + nx];
          }
        }
      }
    }
  }
  return out;
}

Var convex_combine(const Var& flow, const Var& weights, std::size_t factor) {
  Tensor out = convex_combine(flow.value(), weights.value(), factor);
  return flow.tape().record(std::move(out), {flow, weights}, [factor](Node& node) {
    const Tensor& f = node.inputs[0]->value;
    const Tensor& wt = node.inputs[1]->value;
    const std::size_t h = f.dim(1);
    const std::size_t w = f.dim(2);
    const std::size_t n = h * w;
    const std::size_t ff = factor * factor;
    const std::size_t fw = w * factor;
    Tensor gf(f.shape());
    Tensor gw(wt.shape());
    for (std::size_t c = 0; c < f.dim(0); ++c) {
      const double* src = f.ptr() + c * n;
      const double* go = node.grad.ptr() + c * n * ff;
      double* gsrc = gf.ptr() + c * n;
      for (std::size_t k = 0; k < 9; ++k) {
        const long long ky = static_cast<long long>(k / 3) - 1;
        const long long kx = static_cast<long long>(k % 3) - 1;
        for (std::size_t s = 0; s < ff; ++s) {
          const std::size_t fy = s / factor;
          const std::size_t fx = s % factor;
          const double* wk = wt.ptr() + (k * ff + s) * n;
          double* gwk = gw.ptr() + (k * ff + s) * n;
          for (std::size_t y = 0; y < h; ++y) {
            const auto ny = static_cast<std::size_t>(std::clamp<long long>(static_cast<long long>(y) + ky, 0, h - 1));
            const double* grow = go + (y * factor + fy) * fw;
            for (std::size_t x = 0; x < w; ++x) {
              const auto nx =
                  static_cast<std::size_t>(std::clamp<long long>(static_cast<long long>(x) + kx, 0, w - 1));
              const double g = grow[x * factor + fx];
              gwk[y * w + x] += g * src[ny * w + nx];
              gsrc[ny * w + nx] += g * wk[y * w + x];
            }
          }
        }
      }
    }
    if (Tape::input_needs_grad(node, 0)) node.inputs[0]->accumulate(std::move(gf));
    if (Tape::input_needs_grad(node, 1)) node.inputs[1]->accumulate(std::move(gw));
  });
}

Var convex_upsample(const Var& flow, const Var& guide, std::size_t factor, const ModelParams& params) {
  Var logits;
  if (factor == 4) {
    if (guide.shape().size() != 3 || guide.shape()[0] != kFusionFeatures + 2) {
      throw ShapeError("convex_upsample: 4x guide must have 34 channels, got " + shape_string(guide.shape()));
    }
    Var x = conv_act(guide, params, "decoder.up4.conv0", ConvSpec::conv2d(kFusionFeatures + 2, 64, 3, 1, 1));
    logits = conv(x, params, "decoder.up4.conv1", ConvSpec::conv2d(64, 9 * 16, 1));
  } else if (factor == 2) {
    if (guide.shape().size() != 3 || guide.shape()[0] != 2) {
      throw ShapeError("convex_upsample: 2x guide must have 2 channels, got " + shape_string(guide.shape()));
    }
    Var x = conv_act(guide, params, "decoder.up2.conv0", ConvSpec::conv2d(2, 32, 3, 1, 1));
    x = conv_act(x, params, "decoder.up2.conv1", ConvSpec::conv2d(32, 32, 3, 1, 1));
    logits = conv(x, params, "decoder.up2.conv2", ConvSpec::conv2d(32, 9 * 4, 1));
  } else {
    throw ConfigError("convex_upsample: factor must be 2 or 4, got " + std::to_string(factor));
  }
  const Shape& s = logits.shape();
  Var weights = ops::softmax(ops::reshape(logits, {9, factor * factor, s[1], s[2]}), 0);
  return convex_combine(flow, weights, factor);
}

ForwardVars forward(Tape& tape, const ImagePair& pair, const ModelParams& params, PhaseTimes* times) {
  const auto start = Clock::now();
  auto t0 = start;
  Var im1 = tape.constant(pair.first);
  Var im2 = tape.constant(pair.second);
  FeatureVars a = encode(im1, params);
  FeatureVars b = encode(im2, params);
  const double t_encode = ms_since(t0);

  t0 = Clock::now();
  const std::vector<CostVolumeSpec> specs = canonical_vector();
  std::vector<Var> volumes;
  for (const auto& spec : specs) {
    volumes.push_back(spec.stride == 2 ? build_cost_volume(a.f_s2, b.f_s2, spec)
                                       : build_cost_volume(a.f_s8, b.f_s8, spec));
  }
  Var stack = assemble_stack(volumes, specs);
  volumes.clear();
  const double t_volume = ms_since(t0);

  t0 = Clock::now();
  ForwardVars out;
  out.omega = interpolation_weights(unet3d(stack, params));
  out.flows = flow_hypotheses(out.omega, specs);
  out.entropy = entropy_map(out.omega);
  FusionVars fusion = fuse(out.flows, out.entropy, specs, params);
  out.alpha = fusion.alpha;
  out.flow_coarse = fusion.flow_coarse;
  const double t_decoder = ms_since(t0);

  t0 = Clock::now();
  Var guide4 = ops::concat({fusion.features, ops::scale(out.flow_coarse, kGuideFlowScale)});
  out.flow_half = convex_upsample(out.flow_coarse, guide4, 4, params);
  out.flow_full = convex_upsample(out.flow_half, ops::scale(out.flow_half, kGuideFlowScale), 2, params);
  const double t_upsample = ms_since(t0);

  if (times) {
    times->encode_ms = t_encode;
    times->cost_volume_ms = t_volume;
    times->decoder_ms = t_decoder;
    times->upsample_ms = t_upsample;
    times->total_ms = ms_since(start);
  }
  return out;
}

Prediction predict(const ImagePair& pair, const ModelParams& params) {
  Tape tape(false);
  Prediction p;
  ForwardVars v = forward(tape, pair, params, &p.times);
  p.hypotheses = {v.omega.value(), v.flows.value(), v.entropy.value()};
  p.fusion = {v.alpha.value(), v.flow_coarse.value(), v.flow_full.value()};
  return p;
}

}  // namespace dcv
