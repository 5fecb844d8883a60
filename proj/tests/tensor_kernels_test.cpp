#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dcv/autograd.hpp"
#include "dcv/errors.hpp"
#include "dcv/kernels.hpp"
#include "dcv/ops.hpp"
#include "dcv/parallel.hpp"
#include "dcv/reference.hpp"
#include "support/test_support.hpp"

namespace dcv {
namespace {

using testing::check_gradients;
using testing::random_tensor;

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
  EXPECT_THROW(t.dim(3), ShapeError);
  t.at({1, 2, 3}) = 5.0;
  EXPECT_EQ(t[23], 5.0);
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
}

TEST(Tensor, StoragePrecisionRoundsToFloat) {
  Tensor t = Tensor::from({0.1});
  set_storage_precision(Precision::f32);
  apply_storage_precision(t);
  set_storage_precision(Precision::f64);
  EXPECT_EQ(t[0], static_cast<double>(0.1f));
}

TEST(Conv2d, IdentityKernelReproducesInput) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 5, 6}, rng);
  const ConvSpec spec = ConvSpec::conv2d(3, 3, 1);
  Tensor w(spec.weight_shape());
  for (std::size_t c = 0; c < 3; ++c) w.at({c, c, 0, 0}) = 1.0;
  EXPECT_EQ(kernels::conv2d(x, w, Tensor({3}), spec), x);
}

TEST(Conv2d, OnesKernelCountsTaps) {
  const ConvSpec spec = ConvSpec::conv2d(1, 1, 3, 1, 1);
  Tensor y = kernels::conv2d(Tensor({1, 5, 5}, 1.0), Tensor(spec.weight_shape(), 1.0), Tensor({1}), spec);
  EXPECT_EQ(y.at({0, 2, 2}), 9.0);
  EXPECT_EQ(y.at({0, 0, 0}), 4.0);
  EXPECT_EQ(y.at({0, 4, 4}), 4.0);
  EXPECT_EQ(y.at({0, 0, 2}), 6.0);
}

TEST(Conv2d, MatchesNaiveLoops) {
  std::mt19937_64 rng(2);
  const ConvSpec spec = ConvSpec::conv2d(2, 4, 3, 1, 1);
  Tensor x = random_tensor({2, 8, 8}, rng);
  Tensor w = random_tensor(spec.weight_shape(), rng);
  Tensor b = random_tensor({4}, rng);
  EXPECT_LT(max_abs_diff(kernels::conv2d(x, w, b, spec), reference::conv2d(x, w, b, spec)), 1e-12);
}

TEST(Conv2d, ShapeErrorsNameTheAxis) {
  const ConvSpec spec = ConvSpec::conv2d(1, 1, 5);
  try {
    kernels::conv2d(Tensor({1, 8, 3}), Tensor(spec.weight_shape()), Tensor({1}), spec);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos) << e.what();
  }
  EXPECT_THROW(kernels::conv2d(Tensor({2, 8, 8}), Tensor(spec.weight_shape()), Tensor({1}), spec), ShapeError);
  EXPECT_THROW(kernels::conv2d(Tensor({1, 8, 8}), Tensor({1, 1, 3, 3}), Tensor({1}), spec), ShapeError);
}

TEST(Conv2d, OracleSweep) {
  const auto sweep = testing::sweep_conv2d(25, 3);
  EXPECT_EQ(sweep.cases, 25u);
  EXPECT_LT(sweep.max_abs_diff, 1e-10) << sweep.worst;
}

TEST(Conv3d, IdentityKernelReproducesInput) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({2, 3, 4, 5}, rng);
  const ConvSpec spec = ConvSpec::conv3d(2, 2, 1);
  Tensor w(spec.weight_shape());
  w.at({0, 0, 0, 0, 0}) = 1.0;
  w.at({1, 1, 0, 0, 0}) = 1.0;
  EXPECT_EQ(kernels::conv3d(x, w, Tensor({2}), spec), x);
}

TEST(Conv3d, OnesKernelCountsTaps) {
  const ConvSpec spec = ConvSpec::conv3d(1, 1, 3, 1, 1);
  Tensor y = kernels::conv3d(Tensor({1, 5, 5, 5}, 1.0), Tensor(spec.weight_shape(), 1.0), Tensor({1}), spec);
  EXPECT_EQ(y.at({0, 2, 2, 2}), 27.0);
  EXPECT_EQ(y.at({0, 0, 0, 0}), 8.0);
}

TEST(Conv3d, MatchesNaiveLoops) {
  std::mt19937_64 rng(5);
  const ConvSpec spec = ConvSpec::conv3d(2, 3, 3, 1, 1);
  Tensor x = random_tensor({2, 4, 6, 6}, rng);
  Tensor w = random_tensor(spec.weight_shape(), rng);
  Tensor b = random_tensor({3}, rng);
  EXPECT_LT(max_abs_diff(kernels::conv3d(x, w, b, spec), reference::conv3d(x, w, b, spec)), 1e-12);
}

TEST(Conv3d, OracleSweep) {
  const auto sweep = testing::sweep_conv3d(25, 6);
  EXPECT_LT(sweep.max_abs_diff, 1e-10) << sweep.worst;
}

TEST(Conv3d, LargeInputUsesTilesConsistently) {
  std::mt19937_64 rng(7);
  const ConvSpec spec = ConvSpec::conv3d(28, 4, 3, 2, 1);
  Tensor x = random_tensor({28, 21, 12, 12}, rng);
  Tensor w = random_tensor(spec.weight_shape(), rng);
  Tensor b = random_tensor({4}, rng);
  EXPECT_LT(max_abs_diff(kernels::conv3d(x, w, b, spec), reference::conv3d(x, w, b, spec)), 1e-10);
}

TEST(ConvTranspose3d, IsAdjointOfStridedConv) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    ConvSpec spec = ConvSpec::conv3d(3, 2, 3, 2, 1);
    const Shape big{3, 7, 6, 5};
    const Shape small = [&] {
      Shape e = spec.output_extents({7, 6, 5});
      e.insert(e.begin(), 2);
      return e;
    }();
    // The transposed op maps 2 channels back to 3.
    ConvSpec t = spec;
    t.in_channels = 2;
    t.out_channels = 3;
    for (std::size_t a = 0; a < 3; ++a) t.output_padding[a] = big[a + 1] - (2 * small[a + 1] - 1);
    Tensor w = random_tensor(spec.weight_shape(), rng);
    Tensor x = random_tensor(big, rng);
    Tensor y = random_tensor(small, rng);
    const double lhs = dot(kernels::conv3d(x, w, Tensor({2}), spec), y);
    const double rhs = dot(x, kernels::conv_transpose3d(y, w, Tensor({3}), t));
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(ConvTranspose3d, DoublesExtents) {
  ConvSpec t = ConvSpec::conv3d(1, 1, 2, 2, 0);
  EXPECT_EQ(kernels::conv_transpose3d(Tensor({1, 1, 1, 1}, 1.0), Tensor({1, 1, 2, 2, 2}), Tensor({1}), t).shape(),
            (Shape{1, 2, 2, 2}));
  t = ConvSpec::conv3d(1, 1, 3, 2, 1);
  t.output_padding = {1, 1, 1};
  EXPECT_EQ(t.transpose_output_extents({1, 1, 1}), (Shape{2, 2, 2}));
  EXPECT_EQ(t.transpose_output_extents({4, 5, 6}), (Shape{8, 10, 12}));
}

TEST(ConvTranspose3d, ImpulseStampsKernel) {
  std::mt19937_64 rng(9);
  const ConvSpec t = ConvSpec::conv3d(1, 1, 3, 2, 0);
  Tensor w = random_tensor(t.transpose_weight_shape(), rng);
  Tensor x({1, 3, 3, 3});
  x.at({0, 1, 1, 1}) = 1.0;
  Tensor y = kernels::conv_transpose3d(x, w, Tensor({1}), t);
  ASSERT_EQ(y.shape(), (Shape{1, 7, 7, 7}));
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y.at({0, 2 + a, 2 + i, 2 + j}), w.at({0, 0, a, i, j}));
    }
  }
  EXPECT_EQ(y.at({0, 0, 0, 0}), 0.0);
  EXPECT_LT(max_abs_diff(y, reference::conv_transpose3d(x, w, Tensor({1}), t)), 1e-14);
}

TEST(InstanceNorm, ConstantChannelCollapsesToShift) {
  Tensor y = kernels::instance_norm2d(Tensor({2, 4, 4}, 3.0), Tensor({2}, 1.0), Tensor({2}), 1e-5);
  EXPECT_EQ(y.max_abs(), 0.0);
}

TEST(InstanceNorm, NormalizesEachChannel) {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({3, 6, 7}, rng, -5.0, 5.0);
  Tensor y = kernels::instance_norm2d(x, Tensor({3}, 1.0), Tensor({3}), 1e-5);
  const std::size_t n = 42;
  for (std::size_t c = 0; c < 3; ++c) {
    auto moments = [&](const Tensor& t) {
      double mean = 0.0;
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += t[c * n + i];
      mean /= n;
      for (std::size_t i = 0; i < n; ++i) var += (t[c * n + i] - mean) * (t[c * n + i] - mean);
      return std::pair{mean, var / n};
    };
    const auto [mean, var] = moments(y);
    const double input_var = moments(x).second;
    EXPECT_LT(std::abs(mean), 1e-10);
    EXPECT_NEAR(var, input_var / (input_var + 1e-5), 1e-12);
  }
}

TEST(InstanceNorm, OracleSweep) {
  const auto sweep = testing::sweep_instance_norm(25, 11);
  EXPECT_LT(sweep.max_abs_diff, 1e-12) << sweep.worst;
}

TEST(LeakyRelu, SlopePointOne) {
  EXPECT_EQ(kernels::leaky_relu(Tensor::from({-1.0, 0.0, 2.0}), 0.1), Tensor::from({-0.1, 0.0, 2.0}));
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({20}, rng);
  EXPECT_EQ(kernels::leaky_relu(x, 1.0), x);
  Tensor r = kernels::leaky_relu(x, 0.0);
  EXPECT_GE(*std::min_element(r.data().begin(), r.data().end()), 0.0);
}

TEST(Softmax, UniformLogits) {
  Tensor y = kernels::softmax(Tensor({81}, 0.7), 0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 81.0, 1e-15);
}

TEST(Softmax, SaturatesToOneHot) {
  Tensor x({5, 3});
  x.at({2, 1}) = 1000.0;
  Tensor y = kernels::softmax(x, 0);
  EXPECT_NEAR(y.at({2, 1}), 1.0, 1e-9);
  EXPECT_NEAR(y.at({0, 1}), 0.0, 1e-9);
  EXPECT_NEAR(y.at({0, 0}), 0.2, 1e-15);
}

TEST(Softmax, OracleSweepAndNormalization) {
  const auto sweep = testing::sweep_softmax(25, 13);
  EXPECT_LT(sweep.max_abs_diff, 1e-12) << sweep.worst;
  std::mt19937_64 rng(14);
  Tensor y = kernels::softmax(random_tensor({4, 7, 3}, rng, -30, 30), 1);
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) {
        EXPECT_GE(y.at({a, k, c}), 0.0);
        s += y.at({a, k, c});
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(SpatialSubsample, Cases) {
  std::mt19937_64 rng(15);
  Tensor x = random_tensor({2, 4, 8}, rng);
  EXPECT_EQ(kernels::spatial_subsample(x, 1), x);
  Tensor c = kernels::spatial_subsample(Tensor({3, 8, 8}, 2.5), 4);
  EXPECT_EQ(c.shape(), (Shape{3, 2, 2}));
  for (double v : c.data()) EXPECT_EQ(v, 2.5);
  Tensor ramp({1, 4, 4});
  std::iota(ramp.ptr(), ramp.ptr() + 16, 0.0);
  EXPECT_EQ(kernels::spatial_subsample(ramp, 4)[0], 7.5);
  EXPECT_THROW(kernels::spatial_subsample(Tensor({1, 6, 8}), 4), ShapeError);
}

TEST(Tape, SumGradientIsOnes) {
  Tape tape;
  std::mt19937_64 rng(16);
  Var x = tape.parameter("x", random_tensor({3, 4}, rng));
  GradMap g = tape.backward(ops::sum(x));
  EXPECT_EQ(g.at("x"), Tensor({3, 4}, 1.0));
}

TEST(Tape, ConstantsGetNoSlotAndUnusedParamsGetZeros) {
  Tape tape;
  Var x = tape.parameter("x", Tensor({2}, 1.0));
  Var unused = tape.parameter("unused", Tensor({3}, 1.0));
  Var c = tape.constant(Tensor({2}, 2.0));
  GradMap g = tape.backward(ops::sum(ops::add(x, c)));
  EXPECT_EQ(g.size(), 2u);
  EXPECT_EQ(g.at("unused"), Tensor({3}));
  EXPECT_FALSE(g.contains("c"));
}

TEST(Tape, SharedParameterAccumulates) {
  Tape tape;
  Var a = tape.parameter("w", Tensor({2}, 1.0));
  Var b = tape.parameter("w", Tensor({2}, 1.0));
  GradMap g = tape.backward(ops::sum(ops::add(a, b)));
  EXPECT_EQ(g.at("w"), Tensor({2}, 2.0));
}

TEST(Tape, ReplayWithoutResetThrows) {
  Tape tape;
  Var x = tape.parameter("x", Tensor({2}, 1.0));
  Var loss = ops::sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), std::logic_error);
  tape.reset();
  Var y = tape.parameter("x", Tensor({2}, 1.0));
  EXPECT_NO_THROW(tape.backward(ops::sum(y)));
}

TEST(Gradients, Conv2d) {
  std::mt19937_64 rng(20);
  const ConvSpec spec = ConvSpec::conv2d(2, 3, 3, 2, 1);
  auto r = check_gradients(
      [&](Tape&, const std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2], spec); },
      {random_tensor({2, 7, 6}, rng), random_tensor(spec.weight_shape(), rng), random_tensor({3}, rng)}, 21);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Gradients, Conv3dDilated) {
  std::mt19937_64 rng(22);
  const ConvSpec spec = ConvSpec::conv3d(2, 2, 3, 1, 2, 2);
  auto r = check_gradients(
      [&](Tape&, const std::vector<Var>& v) { return ops::conv3d(v[0], v[1], v[2], spec); },
      {random_tensor({2, 4, 5, 5}, rng), random_tensor(spec.weight_shape(), rng), random_tensor({2}, rng)}, 23);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Gradients, ConvTranspose3d) {
  std::mt19937_64 rng(24);
  ConvSpec spec = ConvSpec::conv3d(3, 2, 3, 2, 1);
  spec.output_padding = {1, 0, 1};
  auto r = check_gradients(
      [&](Tape&, const std::vector<Var>& v) { return ops::conv_transpose3d(v[0], v[1], v[2], spec); },
      {random_tensor({3, 3, 2, 3}, rng), random_tensor(spec.transpose_weight_shape(), rng), random_tensor({2}, rng)},
      25);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Gradients, InstanceNorm) {
  std::mt19937_64 rng(26);
  auto r = check_gradients(
      [&](Tape&, const std::vector<Var>& v) { return ops::instance_norm2d(v[0], v[1], v[2], 1e-5); },
      {random_tensor({3, 4, 5}, rng), random_tensor({3}, rng), random_tensor({3}, rng)}, 27);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Gradients, LeakyRelu) {
  std::mt19937_64 rng(28);
  auto r = check_gradients([&](Tape&, const std::vector<Var>& v) { return ops::leaky_relu(v[0], 0.1); },
                           {testing::away_from_zero({4, 5}, rng)}, 29);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Gradients, Softmax) {
  std::mt19937_64 rng(30);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto r = check_gradients([&](Tape&, const std::vector<Var>& v) { return ops::softmax(v[0], axis); },
                             {random_tensor({3, 4, 2}, rng, -2, 2)}, 31);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(Gradients, SpatialSubsample) {
  std::mt19937_64 rng(32);
  auto r = check_gradients([&](Tape&, const std::vector<Var>& v) { return ops::spatial_subsample(v[0], 2); },
                           {random_tensor({2, 3, 4, 6}, rng)}, 33);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Gradients, StructuralOps) {
  std::mt19937_64 rng(34);
  auto r = check_gradients(
      [&](Tape&, const std::vector<Var>& v) {
        Var cat = ops::concat({v[0], ops::scale(v[1], -2.5)});
        Var sl = ops::slice(ops::reshape(cat, {5, 6}), 1, 4);
        return ops::add(sl, ops::slice(ops::reshape(cat, {5, 6}), 0, 3));
      },
      {random_tensor({2, 6}, rng), random_tensor({3, 6}, rng)}, 35);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Gradients, ChainedConv3dLeakyReluSum) {
  std::mt19937_64 rng(36);
  const ConvSpec spec = ConvSpec::conv3d(2, 3, 3, 1, 1);
  auto r = check_gradients(
      [&](Tape&, const std::vector<Var>& v) {
        return ops::sum(ops::leaky_relu(ops::conv3d(v[0], v[1], v[2], spec), 0.1));
      },
      {random_tensor({2, 3, 4, 4}, rng), random_tensor(spec.weight_shape(), rng), random_tensor({3}, rng)}, 37);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Determinism, KernelsAreBitIdenticalAcrossRuns) {
  std::mt19937_64 rng(38);
  const ConvSpec spec = ConvSpec::conv3d(8, 8, 3, 1, 1);
  Tensor x = random_tensor({8, 9, 10, 10}, rng);
  Tensor w = random_tensor(spec.weight_shape(), rng);
  Tensor g = random_tensor({8, 9, 10, 10}, rng);
  const Tensor y1 = kernels::conv3d(x, w, Tensor({8}), spec);
  const auto b1 = kernels::conv_backward(x, w, g, spec);
  const Tensor y2 = kernels::conv3d(x, w, Tensor({8}), spec);
  const auto b2 = kernels::conv_backward(x, w, g, spec);
  EXPECT_EQ(y1, y2);
  EXPECT_EQ(b1.weight, b2.weight);
  EXPECT_EQ(b1.input, b2.input);
}

TEST(Parallel, ChunksCoverRangeOnce) {
  const int saved = num_threads();
  set_num_threads(3);
  std::vector<int> hits(10, 0);
  parallel_chunks(10, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) ++hits[i];
  });
  set_num_threads(saved);
  for (int h : hits) EXPECT_EQ(h, 1);
}

}  // namespace
}  // namespace dcv
