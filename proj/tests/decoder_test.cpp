#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dcv/decoder.hpp"
#include "dcv/errors.hpp"
#include "dcv/ops.hpp"
#include "dcv/reference.hpp"
#include "support/test_support.hpp"

namespace dcv {
namespace {

using testing::random_tensor;

const ModelParams& params() {
  static const ModelParams p = ModelParams::initialize(5);
  return p;
}

std::vector<CostVolumeSpec> specs() { return {canonical_specs().begin(), canonical_specs().end()}; }

Tensor lrelu(Tensor t) {
  for (auto& v : t.data()) v = v < 0 ? 0.1 * v : v;
  return t;
}

TEST(Model, ParameterCountIsStable) {
  EXPECT_EQ(params().parameter_count(), 2437122u);
  EXPECT_NO_THROW(params().validate());
  EXPECT_EQ(ModelParams::initialize(5), params());
  EXPECT_NE(ModelParams::initialize(6), params());
}

TEST(Unet3d, OutputShape) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(unet3d(random_tensor({28, 81, 8, 8}, rng), params()).shape(), (Shape{7, 81, 8, 8}));
  EXPECT_EQ(unet3d(random_tensor({28, 81, 3, 5}, rng), params()).shape(), (Shape{7, 81, 3, 5}));
  EXPECT_THROW(unet3d(Tensor({28, 80, 8, 8}), params()), ShapeError);
}

TEST(Unet3d, ZeroWeightsGiveConstantOutput) {
  ModelParams p = params();
  std::mt19937_64 rng(2);
  for (auto& [name, t] : p.tensors()) {
    if (name.rfind("decoder.unet.", 0) != 0) continue;
    if (name.ends_with(".bias")) {
      t = random_tensor(t.shape(), rng);
    } else {
      t.fill(0.0);
    }
  }
  const Tensor out = unet3d(random_tensor({28, 81, 4, 4}, rng), p);
  const std::size_t per = 81 * 16;
  for (std::size_t d = 0; d < 7; ++d) {
    for (std::size_t i = 0; i < per; ++i) EXPECT_EQ(out[d * per + i], out[d * per]);
  }
}

TEST(Unet3d, Deterministic) {
  std::mt19937_64 rng(3);
  const Tensor s = random_tensor({28, 81, 4, 4}, rng);
  EXPECT_EQ(unet3d(s, params()), unet3d(s, params()));
}

TEST(Aspp, PreservesShape) {
  std::vector<ParamSpec> layout;
  append_aspp_layout(layout, "t", 32, 16);
  ModelParams p;
  std::mt19937_64 rng(4);
  for (const auto& s : layout) p.set(s.name, random_tensor(s.shape, rng, -0.2, 0.2));
  Tape tape(false);
  EXPECT_EQ(aspp(tape.constant(random_tensor({32, 10, 2, 2}, rng)), p, "t", 32, 16).shape(), (Shape{32, 10, 2, 2}));
}

TEST(Aspp, SingleDilationOneBranchIsPlainConv) {
  const AsppConfig config{{1}, false};
  std::vector<ParamSpec> layout;
  append_aspp_layout(layout, "t", 3, 3, config);
  ModelParams p;
  std::mt19937_64 rng(5);
  for (const auto& s : layout) p.set(s.name, random_tensor(s.shape, rng));
  // Identity projection.
  Tensor eye(p.get("t.project.weight").shape());
  for (std::size_t c = 0; c < 3; ++c) eye.at({c, c, 0, 0, 0}) = 1.0;
  p.set("t.project.weight", eye);
  p.set("t.project.bias", Tensor({3}));
  const Tensor x = random_tensor({3, 4, 5, 5}, rng);
  Tape tape(false);
  const Tensor got = aspp(tape.constant(x), p, "t", 3, 3, config).value();
  const Tensor plain = reference::conv3d(x, p.get("t.branch0.weight"), p.get("t.branch0.bias"),
                                         ConvSpec::conv3d(3, 3, 3, 1, 1, 1));
  EXPECT_LT(max_abs_diff(got, lrelu(lrelu(plain))), 1e-12);
}

TEST(Aspp, MatchesBranchByBranchOracle) {
  std::vector<ParamSpec> layout;
  append_aspp_layout(layout, "t", 4, 3);
  ModelParams p;
  std::mt19937_64 rng(6);
  for (const auto& s : layout) p.set(s.name, random_tensor(s.shape, rng));
  const Tensor x = random_tensor({4, 5, 6, 6}, rng);
  Tape tape(false);
  const Tensor got = aspp(tape.constant(x), p, "t", 4, 3).value();

  std::vector<Tensor> branches{lrelu(reference::conv3d(x, p.get("t.pointwise.weight"), p.get("t.pointwise.bias"),
                                                       ConvSpec::conv3d(4, 3, 1)))};
  const std::size_t dil[] = {2, 4, 8};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string n = "t.branch" + std::to_string(i);
    branches.push_back(lrelu(reference::conv3d(x, p.get(n + ".weight"), p.get(n + ".bias"),
                                               ConvSpec::conv3d(4, 3, 3, 1, dil[i], dil[i]))));
  }
  Tensor cat({12, 5, 6, 6});
  for (std::size_t b = 0; b < 4; ++b) std::copy(branches[b].ptr(), branches[b].ptr() + branches[b].size(), cat.ptr() + b * branches[b].size());
  const Tensor want = lrelu(reference::conv3d(cat, p.get("t.project.weight"), p.get("t.project.bias"),
                                              ConvSpec::conv3d(12, 4, 1)));
  EXPECT_LT(max_abs_diff(got, want), 1e-12);
}

TEST(InterpolationWeights, SoftmaxOverCandidates) {
  EXPECT_EQ(interpolation_weights(Tensor({7, 81, 2, 2}, 3.0)).data()[0], 1.0 / 81.0);
  std::mt19937_64 rng(7);
  const Tensor l = random_tensor({7, 81, 2, 3}, rng, -5, 5);
  EXPECT_EQ(interpolation_weights(l), reference::softmax(l, 1));
}

Tensor one_hot_omega(std::size_t h, std::size_t w, std::size_t index) {
  Tensor o({7, 81, h, w});
  for (std::size_t d = 0; d < 7; ++d) {
    for (std::size_t q = 0; q < h * w; ++q) o[(d * 81 + index) * h * w + q] = 1.0;
  }
  return o;
}

TEST(FlowHypotheses, OneHotSelectsTableEntry) {
  const auto table = displacement_table(canonical_specs()[6]);
  const auto hit = std::find(table.begin(), table.end(), Displacement{168, -336});
  ASSERT_NE(hit, table.end());
  const Tensor flows = flow_hypotheses(one_hot_omega(2, 2, static_cast<std::size_t>(hit - table.begin())), specs());
  for (std::size_t q = 0; q < 4; ++q) {
    EXPECT_EQ(flows.at({6, 0, q / 2, q % 2}), 168.0);
    EXPECT_EQ(flows.at({6, 1, q / 2, q % 2}), -336.0);
  }
}

TEST(FlowHypotheses, UniformGivesZero) {
  const Tensor flows = flow_hypotheses(Tensor({7, 81, 3, 3}, 1.0 / 81.0), specs());
  EXPECT_LT(flows.max_abs(), 1e-12);
}

TEST(FlowHypotheses, MatchesExplicitLoop) {
  std::mt19937_64 rng(8);
  const Tensor omega = reference::softmax(random_tensor({7, 81, 3, 2}, rng, -3, 3), 1);
  const Tensor flows = flow_hypotheses(omega, specs());
  for (std::size_t d = 0; d < 7; ++d) {
    const auto table = displacement_table(canonical_specs()[d]);
    for (std::size_t q = 0; q < 6; ++q) {
      double u = 0.0;
      double v = 0.0;
      for (std::size_t i = 0; i < 81; ++i) {
        u += omega[(d * 81 + i) * 6 + q] * table[i].u;
        v += omega[(d * 81 + i) * 6 + q] * table[i].v;
      }
      EXPECT_NEAR(flows[(d * 2) * 6 + q], u, 1e-10);
      EXPECT_NEAR(flows[(d * 2 + 1) * 6 + q], v, 1e-10);
    }
  }
  EXPECT_THROW(flow_hypotheses(omega, {canonical_specs()[0]}), ShapeError);
}

TEST(Entropy, UniformAndOneHot) {
  const Tensor u = entropy_map(Tensor({7, 81, 2, 2}, 1.0 / 81.0));
  for (double e : u.data()) EXPECT_NEAR(e, std::log(81.0), 1e-9);
  EXPECT_NEAR(std::log(81.0), 4.3944, 1e-4);
  EXPECT_LT(entropy_map(one_hot_omega(2, 2, 40)).max_abs(), 1e-9);
}

TEST(Entropy, MatchesLoop) {
  std::mt19937_64 rng(9);
  const Tensor omega = reference::softmax(random_tensor({7, 81, 2, 3}, rng, -3, 3), 1);
  const Tensor e = entropy_map(omega);
  for (std::size_t d = 0; d < 7; ++d) {
    for (std::size_t q = 0; q < 6; ++q) {
      double s = 0.0;
      for (std::size_t i = 0; i < 81; ++i) {
        const double w = omega[(d * 81 + i) * 6 + q];
        s -= w * std::log(w + kEntropyEps);
      }
      EXPECT_NEAR(e[d * 6 + q], s, 1e-10);
    }
  }
}

FusionVars run_fuse(Tape& tape, const Tensor& flows, const Tensor& entropy, const ModelParams& p) {
  return fuse(tape.constant(flows), tape.constant(entropy), specs(), p);
}

TEST(Fuse, OneHotLogitsSelectHypothesis) {
  ModelParams p = params();
  p.get("decoder.fusion.conv3.weight").fill(0.0);
  Tensor bias({7});
  bias[3] = 1000.0;
  p.set("decoder.fusion.conv3.bias", bias);
  std::mt19937_64 rng(10);
  const Tensor flows = random_tensor({7, 2, 3, 4}, rng, -50, 50);
  Tape tape(false);
  const FusionVars f = run_fuse(tape, flows, random_tensor({7, 3, 4}, rng, 0, 4), p);
  for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(f.flow_coarse.value()[i], flows[3 * 24 + i]);
}

TEST(Fuse, IdenticalHypothesesPassThrough) {
  std::mt19937_64 rng(11);
  const Tensor one = random_tensor({2, 3, 3}, rng, -20, 20);
  Tensor flows({7, 2, 3, 3});
  for (std::size_t d = 0; d < 7; ++d) std::copy(one.ptr(), one.ptr() + 18, flows.ptr() + d * 18);
  Tape tape(false);
  const FusionVars f = run_fuse(tape, flows, random_tensor({7, 3, 3}, rng, 0, 4), params());
  EXPECT_LT(max_abs_diff(f.flow_coarse.value(), one), 1e-12);
  EXPECT_EQ(f.features.shape(), (Shape{32, 3, 3}));
}

TEST(Fuse, WeightedSumMatchesLoop) {
  std::mt19937_64 rng(12);
  const Tensor alpha = reference::softmax(random_tensor({7, 2, 5}, rng, -3, 3), 0);
  const Tensor flows = random_tensor({7, 2, 2, 5}, rng, -100, 100);
  const Tensor got = weighted_flow_sum(alpha, flows);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t q = 0; q < 10; ++q) {
      double s = 0.0;
      for (std::size_t d = 0; d < 7; ++d) s += alpha[d * 10 + q] * flows[(d * 2 + c) * 10 + q];
      EXPECT_NEAR(got[c * 10 + q], s, 1e-10);
    }
  }
  Tape tape(false);
  EXPECT_THROW(fuse(tape.constant(Tensor({6, 2, 2, 2})), tape.constant(Tensor({6, 2, 2})), specs(), params()),
               ShapeError);
}

TEST(ConvexUpsample, ConstantFieldIsExact) {
  std::mt19937_64 rng(13);
  Tape tape(false);
  const Tensor flow({2, 3, 5}, -12.5);
  const Tensor up4 = convex_upsample(tape.constant(flow), tape.constant(random_tensor({34, 3, 5}, rng)), 4, params()).value();
  EXPECT_EQ(up4.shape(), (Shape{2, 12, 20}));
  for (double v : up4.data()) EXPECT_NEAR(v, -12.5, 1e-12);
  const Tensor up2 = convex_upsample(tape.constant(up4), tape.constant(random_tensor({2, 12, 20}, rng)), 2, params()).value();
  EXPECT_EQ(up2.shape(), (Shape{2, 24, 40}));
  for (double v : up2.data()) EXPECT_NEAR(v, -12.5, 1e-12);
}

TEST(ConvexUpsample, RejectsOtherFactors) {
  Tape tape(false);
  EXPECT_THROW(convex_upsample(tape.constant(Tensor({2, 2, 2})), tape.constant(Tensor({2, 2, 2})), 3, params()),
               ConfigError);
}

TEST(ConvexCombine, CenterWeightsReplicate) {
  std::mt19937_64 rng(14);
  const Tensor flow = random_tensor({2, 3, 4}, rng);
  for (std::size_t f : {2u, 4u}) {
    Tensor w({9, f * f, 3, 4});
    for (std::size_t s = 0; s < f * f; ++s) {
      for (std::size_t q = 0; q < 12; ++q) w[(4 * f * f + s) * 12 + q] = 1.0;
    }
    const Tensor up = convex_combine(flow, w, f);
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t y = 0; y < 3 * f; ++y) {
        for (std::size_t x = 0; x < 4 * f; ++x) EXPECT_EQ(up.at({c, y, x}), flow.at({c, y / f, x / f}));
      }
    }
  }
}

TEST(ConvexCombine, StaysWithinNeighbourhoodRange) {
  std::mt19937_64 rng(15);
  const Tensor flow = random_tensor({2, 4, 5}, rng, -9, 9);
  const Tensor w = reference::softmax(random_tensor({9, 16, 4, 5}, rng, -4, 4), 0);
  const Tensor up = convex_combine(flow, w, 4);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 20; ++x) {
        double lo = 1e9;
        double hi = -1e9;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const auto ny = static_cast<std::size_t>(std::clamp<int>(static_cast<int>(y / 4) + dy, 0, 3));
            const auto nx = static_cast<std::size_t>(std::clamp<int>(static_cast<int>(x / 4) + dx, 0, 4));
            lo = std::min(lo, flow.at({c, ny, nx}));
            hi = std::max(hi, flow.at({c, ny, nx}));
          }
        }
        EXPECT_GE(up.at({c, y, x}), lo - 1e-12);
        EXPECT_LE(up.at({c, y, x}), hi + 1e-12);
      }
    }
  }
}

TEST(Gradients, DecoderPieces) {
  std::mt19937_64 rng(16);
  const auto sp = specs();
  auto r = testing::check_gradients(
      [&](Tape&, const std::vector<Var>& v) {
        Var omega = interpolation_weights(v[0]);
        return ops::concat({ops::reshape(flow_hypotheses(omega, sp), {14, 2, 2}), entropy_map(omega)});
      },
      {random_tensor({7, 81, 2, 2}, rng, -2, 2)}, 17, 1e-5, 1e-6, 200);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;

  auto c = testing::check_gradients(
      [](Tape&, const std::vector<Var>& v) { return convex_combine(v[0], ops::softmax(v[1], 0), 2); },
      {random_tensor({2, 3, 3}, rng), random_tensor({9, 4, 3, 3}, rng)}, 18);
  EXPECT_LT(c.max_rel_error, 1e-4) << c.worst;

  auto w = testing::check_gradients(
      [](Tape&, const std::vector<Var>& v) { return weighted_flow_sum(ops::softmax(v[0], 0), v[1]); },
      {random_tensor({7, 2, 2}, rng), random_tensor({7, 2, 2, 2}, rng)}, 19);
  EXPECT_LT(w.max_rel_error, 1e-4) << w.worst;
}

TEST(Forward, ShapesAndDistributions) {
  std::mt19937_64 rng(20);
  const ImagePair pair = ImagePair::make(random_tensor({3, 64, 64}, rng), random_tensor({3, 64, 64}, rng));
  const Prediction p = predict(pair, params());
  EXPECT_EQ(p.fusion.flow_full.shape(), (Shape{2, 64, 64}));
  EXPECT_EQ(p.fusion.flow_coarse.shape(), (Shape{2, 8, 8}));
  EXPECT_EQ(p.fusion.alpha.shape(), (Shape{7, 8, 8}));
  EXPECT_EQ(p.hypotheses.omega.shape(), (Shape{7, 81, 8, 8}));
  EXPECT_EQ(p.hypotheses.flows.shape(), (Shape{7, 2, 8, 8}));
  EXPECT_EQ(p.hypotheses.entropy.shape(), (Shape{7, 8, 8}));
  EXPECT_TRUE(p.fusion.flow_full.all_finite());
  EXPECT_GT(p.times.total_ms, 0.0);
}

TEST(Forward, StructuralInvariants) {
  for (std::uint64_t seed : {1u, 2u}) {
    const auto r = testing::structural_invariants(seed, 32);
    EXPECT_LT(r.omega_sum_error, 1e-5);
    EXPECT_LT(r.alpha_sum_error, 1e-5);
    EXPECT_GE(r.min_probability, 0.0);
    EXPECT_LE(r.hypothesis_excess, 1e-9);
    EXPECT_LE(r.hull_excess, 1e-9);
    EXPECT_LT(r.mixture_residual, 1e-9);
    EXPECT_LT(r.constant_upsample_error, 1e-12);
  }
}

TEST(Forward, TapeAndInferenceAgree) {
  std::mt19937_64 rng(21);
  const ImagePair pair = ImagePair::make(random_tensor({3, 32, 32}, rng), random_tensor({3, 32, 32}, rng));
  Tape tape;
  const ForwardVars v = forward(tape, pair, params());
  EXPECT_EQ(v.flow_full.value(), predict(pair, params()).fusion.flow_full);
}

TEST(Gradients, EndToEndSampledParameters) {
  const auto r = testing::end_to_end_gradient(3, 20, 32);
  EXPECT_EQ(r.checked, 20u);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

TEST(Checkpoint, RoundtripAndValidation) {
  const auto path = std::filesystem::temp_directory_path() / "dcv_decoder_ckpt_test.bin";
  save_checkpoint(params(), path);
  EXPECT_EQ(load_checkpoint(path), params());
  std::filesystem::resize_file(path, 100);
  EXPECT_THROW(load_checkpoint(path), FormatError);
  ModelParams missing = params();
  missing.tensors().erase("decoder.up2.conv2.bias");
  save_checkpoint(missing, path);
  try {
    load_checkpoint(path);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.up2.conv2.bias"), std::string::npos);
  }
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace dcv
