#include "dcv/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dcv/errors.hpp"
#include "dcv/ops.hpp"

namespace dcv {

namespace {

constexpr double kSlope = 0.1;
constexpr double kNormEps = 1e-5;

struct Stage {
  const char* name;
  std::size_t in;
  std::size_t out;
  std::size_t stride;
};

constexpr Stage kStages[] = {
    {"layer1", 64, 64, 1},
    {"layer2", 64, 96, 2},
    {"layer3", 96, 128, 2},
};
constexpr std::size_t kStemWidth = 64;

void append_block_layout(std::vector<ParamSpec>& l, const std::string& p, std::size_t in, std::size_t out,
                         std::size_t stride) {
  add_conv_params(l, p + ".conv1", out, in, {3, 3}, false);
  add_norm_params(l, p + ".norm1", out);
  add_conv_params(l, p + ".conv2", out, out, {3, 3}, false);
  add_norm_params(l, p + ".norm2", out);
  if (stride != 1 || in != out) {
    add_conv_params(l, p + ".downsample", out, in, {1, 1}, false);
    add_norm_params(l, p + ".norm3", out);
  }
}

Var norm(const Var& x, const ModelParams& params, const std::string& prefix) {
  Tape& tape = x.tape();
  return ops::instance_norm2d(x, bind_param(tape, params, prefix + ".gain"), bind_param(tape, params, prefix + ".shift"),
                              kNormEps);
}

Var conv_nobias(const Var& x, const ModelParams& params, const std::string& prefix, const ConvSpec& spec) {
  ConvVars cv = bind_conv_nobias(x.tape(), params, prefix, spec.out_channels);
  return ops::conv2d(x, cv.weight, cv.bias, spec);
}

Var residual_block(const Var& x, const ModelParams& params, const std::string& p, std::size_t in, std::size_t out,
                   std::size_t stride) {
  Var y = conv_nobias(x, params, p + ".conv1", ConvSpec::conv2d(in, out, 3, stride, 1));
  y = ops::leaky_relu(norm(y, params, p + ".norm1"), kSlope);
  y = conv_nobias(y, params, p + ".conv2", ConvSpec::conv2d(out, out, 3, 1, 1));
  y = ops::leaky_relu(norm(y, params, p + ".norm2"), kSlope);
  Var shortcut = x;
  if (stride != 1 || in != out) {
    shortcut = conv_nobias(x, params, p + ".downsample", ConvSpec::conv2d(in, out, 1, stride, 0));
    shortcut = norm(shortcut, params, p + ".norm3");
  }
  return ops::leaky_relu(ops::add(shortcut, y), kSlope);
}

Var head(const Var& x, const ModelParams& params, const std::string& prefix, std::size_t in, std::size_t out) {
  ConvVars cv = bind_conv(x.tape(), params, prefix);
  return ops::conv2d(x, cv.weight, cv.bias, ConvSpec::conv2d(in, out, 1));
}

void check_image(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("image must be [3 x H x W], got " + shape_string(image.shape()));
  }
  if (image.dim(1) % 8 != 0) throw ShapeError("image height " + std::to_string(image.dim(1)) + " not divisible by 8");
  if (image.dim(2) % 8 != 0) throw ShapeError("image width " + std::to_string(image.dim(2)) + " not divisible by 8");
}

}  // namespace

ImagePair ImagePair::make(Tensor first, Tensor second) {
  check_image(first);
  check_image(second);
  if (!first.same_shape(second)) {
    throw ShapeError("image pair shapes differ: " + shape_string(first.shape()) + " vs " +
                     shape_string(second.shape()));
  }
  return ImagePair{std::move(first), std::move(second)};
}

void append_encoder_layout(std::vector<ParamSpec>& l) {
  add_conv_params(l, "encoder.stem", kStemWidth, 3, {7, 7}, false);
  add_norm_params(l, "encoder.stem_norm", kStemWidth);
  for (const auto& st : kStages) {
    const std::string p = std::string("encoder.") + st.name;
    append_block_layout(l, p + ".0", st.in, st.out, st.stride);
    append_block_layout(l, p + ".1", st.out, st.out, 1);
  }
  add_conv_params(l, "encoder.head_s2", kStride2Channels, kStages[0].out, {1, 1});
  add_conv_params(l, "encoder.head_s8", kStride8Channels, kStages[2].out, {1, 1});
}

Tensor l2norm_channels(const Tensor& feat, double eps) {
  if (feat.rank() != 3) throw ShapeError("l2norm_channels: expected [C x h x w], got " + shape_string(feat.shape()));
  const std::size_t c = feat.dim(0);
  const std::size_t n = feat.dim(1) * feat.dim(2);
  std::vector<double> norms(n, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* x = feat.ptr() + ch * n;
    for (std::size_t i = 0; i < n; ++i) norms[i] += x[i] * x[i];
  }
  for (auto& v : norms) v = std::max(std::sqrt(v), eps);
  Tensor out(feat.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* x = feat.ptr() + ch * n;
    double* y = out.ptr() + ch * n;
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] / norms[i];
  }
  return out;
}

Var l2norm_channels(const Var& feat, double eps) {
  Tensor out = l2norm_channels(feat.value(), eps);
  return feat.tape().record(std::move(out), {feat}, [eps](detail::Node& node) {
    const Tensor& x = Tape::input_value(node, 0);
    const Tensor& y = node.value;
    const Tensor& g = node.grad;
    const std::size_t c = x.dim(0);
    const std::size_t n = x.dim(1) * x.dim(2);
    std::vector<double> norm(n, 0.0);
    std::vector<double> gy(n, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < n; ++i) {
        norm[i] += x[ch * n + i] * x[ch * n + i];
        gy[i] += g[ch * n + i] * y[ch * n + i];
      }
    }
    for (auto& v : norm) v = std::sqrt(v);
    Tensor gx(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = ch * n + i;
        // Above eps the map is v/||v||; below it is the linear map v/eps.
        gx[k] = norm[i] > eps ? (g[k] - y[k] * gy[i]) / norm[i] : g[k] / eps;
      }
    }
    node.inputs[0]->accumulate(std::move(gx));
  });
}

FeatureVars encode(const Var& image, const ModelParams& params) {
  check_image(image.value());
  Var x = conv_nobias(image, params, "encoder.stem", ConvSpec::conv2d(3, kStemWidth, 7, 2, 3));
  x = ops::leaky_relu(norm(x, params, "encoder.stem_norm"), kSlope);
  Var stage1;
  for (const auto& st : kStages) {
    const std::string p = std::string("encoder.") + st.name;
    x = residual_block(x, params, p + ".0", st.in, st.out, st.stride);
    x = residual_block(x, params, p + ".1", st.out, st.out, 1);
    if (!stage1.valid()) stage1 = x;
  }
  Var s2 = head(stage1, params, "encoder.head_s2", kStages[0].out, kStride2Channels);
  Var s8 = head(x, params, "encoder.head_s8", kStages[2].out, kStride8Channels);
  return {l2norm_channels(s2), l2norm_channels(s8)};
}

FeaturePyramid encode(const Tensor& image, const ModelParams& params) {
  Tape tape(false);
  FeatureVars v = encode(tape.constant(image), params);
  return {v.f_s2.value(), v.f_s8.value()};
}

}  // namespace dcv
