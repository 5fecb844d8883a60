#pragma once

#include <string>
#include <vector>

#include "dcv/autograd.hpp"
#include "dcv/cost_volume.hpp"
#include "dcv/encoder.hpp"
#include "dcv/model_params.hpp"
#include "dcv/tensor.hpp"

namespace dcv {

inline constexpr std::size_t kNumDilations = 7;
inline constexpr std::size_t kStackChannels = 28;
inline constexpr std::size_t kCandidates = 81;
inline constexpr double kEntropyEps = 1e-12;

/// Per-dilation interpolation weights, flow hypotheses and their entropy.
struct HypothesisSet {
  Tensor omega;    // [D x D' x H' x W'], softmax over D'
  Tensor flows;    // [D x 2 x H' x W'], input pixels
  Tensor entropy;  // [D x H' x W'], nats
};

struct FusionOutput {
  Tensor alpha;        // [D x H' x W'], softmax over D
  Tensor flow_coarse;  // [2 x H' x W']
  Tensor flow_full;    // [2 x H x W]
};

struct AsppConfig {
  std::vector<std::size_t> dilations{2, 4, 8};
  bool pointwise_branch = true;
};

/// Parameters of an ASPP block named prefix.pointwise, prefix.branchN, prefix.project.
void append_aspp_layout(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t channels,
                        std::size_t branch_width, const AsppConfig& config = {});
void append_decoder_layout(std::vector<ParamSpec>& layout);

/// Parallel dilated 3x3x3 branches (dilation on all three axes) plus an
/// optional 1x1x1 branch, concatenated and projected back to `channels`.
Var aspp(const Var& feat, const ModelParams& params, const std::string& prefix, std::size_t channels,
         std::size_t branch_width, const AsppConfig& config = {});

/// [28 x 81 x h x w] stack -> [7 x 81 x h x w] logits.
Var unet3d(const Var& stack, const ModelParams& params);
Tensor unet3d(const Tensor& stack, const ModelParams& params);

/// Softmax over the candidate axis (axis 1).
Var interpolation_weights(const Var& logits);
Tensor interpolation_weights(const Tensor& logits);

/// flows[d] = sum_i omega[d, i] * displacement_table(specs[d])[i].
Var flow_hypotheses(const Var& omega, const std::vector<CostVolumeSpec>& specs);
Tensor flow_hypotheses(const Tensor& omega, const std::vector<CostVolumeSpec>& specs);

/// -sum_i omega_i ln(omega_i + eps) over axis 1.
Var entropy_map(const Var& omega, double eps = kEntropyEps);
Tensor entropy_map(const Tensor& omega, double eps = kEntropyEps);

/// out[c] = sum_d alpha[d] * flows[d, c] per position.
Var weighted_flow_sum(const Var& alpha, const Var& flows);
Tensor weighted_flow_sum(const Tensor& alpha, const Tensor& flows);

struct FusionVars {
  Var alpha;
  Var flow_coarse;
  Var features;  // penultimate 32-channel activations
};

/// Fusion CNN over (u, v, entropy) per dilation; flows enter scaled by 1/(s*d*k).
FusionVars fuse(const Var& flows, const Var& entropy, const std::vector<CostVolumeSpec>& specs,
                const ModelParams& params);

/// Convex combination of each fine pixel's 3x3 coarse neighbourhood.
/// weights is [9 x f*f x h x w] and already normalized over axis 0; borders
/// replicate the edge value.
Var convex_combine(const Var& flow, const Var& weights, std::size_t factor);
Tensor convex_combine(const Tensor& flow, const Tensor& weights, std::size_t factor);

/// Predicts the combination weights from `guide` with the factor's head and
/// applies them. factor 4 expects guide = [32 fusion features ; scaled flow],
/// factor 2 expects guide = scaled flow.
Var convex_upsample(const Var& flow, const Var& guide, std::size_t factor, const ModelParams& params);

struct PhaseTimes {
  double encode_ms = 0;
  double cost_volume_ms = 0;
  double decoder_ms = 0;
  double upsample_ms = 0;
  double total_ms = 0;
};

struct ForwardVars {
  Var omega;
  Var flows;
  Var entropy;
  Var alpha;
  Var flow_coarse;
  Var flow_half;
  Var flow_full;
};

/// Full pipeline on `tape`. A recording tape makes every parameter trainable.
ForwardVars forward(Tape& tape, const ImagePair& pair, const ModelParams& params, PhaseTimes* times = nullptr);

struct Prediction {
  HypothesisSet hypotheses;
  FusionOutput fusion;
  PhaseTimes times;
};

/// Inference without gradient bookkeeping.
Prediction predict(const ImagePair& pair, const ModelParams& params);

}  // namespace dcv
