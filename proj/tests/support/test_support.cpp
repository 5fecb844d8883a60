#include "test_support.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dcv/cost_volume.hpp"
#include "dcv/decoder.hpp"
#include "dcv/encoder.hpp"
#include "dcv/ops.hpp"
#include "dcv/reference.hpp"
#include "dcv/synthetic.hpp"
#include "dcv/training.hpp"

namespace dcv::testing {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  return Tensor::uniform(shape, lo, hi, rng);
}

Tensor away_from_zero(const Shape& shape, std::mt19937_64& rng, double gap) {
  Tensor t = Tensor::uniform(shape, gap, 1.0, rng);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data()) v = sign(rng) ? v : -v;
  return t;
}

Var project(const Var& x, const Tensor& weights) {
  const double value = dot(x.value(), weights);
  return x.tape().record(Tensor::scalar(value), {x}, [weights](detail::Node& node) {
    Tensor g = weights;
    g.scale_(node.grad[0]);
    node.inputs[0]->accumulate(std::move(g));
  });
}

GradCheck check_gradients(const GraphFn& f, std::vector<Tensor> inputs, std::uint64_t seed, double step,
                          double floor, std::size_t max_per_input) {
  std::mt19937_64 rng(seed);
  Tensor weights;
  GradMap grads;
  {
    Tape tape;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter("in" + std::to_string(i), inputs[i]));
    Var out = f(tape, vars);
    weights = random_tensor(out.shape(), rng);
    grads = tape.backward(project(out, weights));
  }
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return dot(f(tape, vars).value(), weights);
  };
  GradCheck result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& analytic = grads.at("in" + std::to_string(i));
    std::vector<std::size_t> idx(inputs[i].size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    if (max_per_input > 0 && idx.size() > max_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_input);
    }
    for (std::size_t k : idx) {
      std::vector<Tensor> plus = inputs;
      std::vector<Tensor> minus = inputs;
      plus[i][k] += step;
      minus[i][k] -= step;
      const double numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step);
      const double a = analytic[k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        std::ostringstream os;
        os << "input " << i << " element " << k << ": analytic " << a << " numeric " << numeric;
        result.worst = os.str();
      }
    }
  }
  return result;
}

ConvSpec random_conv_spec(std::size_t rank, std::mt19937_64& rng, Shape& input_shape) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  for (;;) {
    ConvSpec s = rank == 2 ? ConvSpec::conv2d(pick(1, 3), pick(1, 4), 1) : ConvSpec::conv3d(pick(1, 3), pick(1, 4), 1);
    input_shape = {s.in_channels};
    bool ok = true;
    for (std::size_t a = 0; a < rank; ++a) {
      s.kernel[a] = pick(1, 3);
      s.stride[a] = pick(1, 2);
      s.dilation[a] = pick(1, 2);
      s.padding[a] = pick(0, 2);
      const std::size_t extent = rank == 2 ? pick(3, 9) : pick(2, 6);
      input_shape.push_back(extent);
      const long long span = static_cast<long long>(extent + 2 * s.padding[a]) -
                             static_cast<long long>(s.dilation[a] * (s.kernel[a] - 1)) - 1;
      ok = ok && span >= 0;
    }
    if (ok) return s;
  }
}

namespace {

void note(OracleSweep& sweep, double diff, const std::string& what) {
  ++sweep.cases;
  if (diff >= sweep.max_abs_diff) {
    sweep.max_abs_diff = diff;
    sweep.worst = what;
  }
}

OracleSweep sweep_conv(std::size_t rank, std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  OracleSweep sweep;
  for (std::size_t c = 0; c < cases; ++c) {
    Shape in_shape;
    const ConvSpec spec = random_conv_spec(rank, rng, in_shape);
    const Tensor x = random_tensor(in_shape, rng);
    const Tensor w = random_tensor(spec.weight_shape(), rng);
    const Tensor b = random_tensor({spec.out_channels}, rng);
    const Tensor fast = rank == 2 ? kernels::conv2d(x, w, b, spec) : kernels::conv3d(x, w, b, spec);
    const Tensor slow = rank == 2 ? reference::conv2d(x, w, b, spec) : reference::conv3d(x, w, b, spec);
    note(sweep, max_abs_diff(fast, slow), "input " + shape_string(in_shape));
  }
  return sweep;
}

}  // namespace

OracleSweep sweep_conv2d(std::size_t cases, std::uint64_t seed) { return sweep_conv(2, cases, seed); }

OracleSweep sweep_conv3d(std::size_t cases, std::uint64_t seed) { return sweep_conv(3, cases, seed); }

OracleSweep sweep_instance_norm(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> ext(1, 12);
  OracleSweep sweep;
  for (std::size_t c = 0; c < cases; ++c) {
    const Shape s{ext(rng) % 5 + 1, ext(rng), ext(rng)};
    const Tensor x = random_tensor(s, rng, -3.0, 3.0);
    const Tensor g = random_tensor({s[0]}, rng);
    const Tensor b = random_tensor({s[0]}, rng);
    note(sweep,
         max_abs_diff(kernels::instance_norm2d(x, g, b, 1e-5), reference::instance_norm2d(x, g, b, 1e-5)),
         shape_string(s));
  }
  return sweep;
}

OracleSweep sweep_softmax(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> ext(1, 9);
  OracleSweep sweep;
  for (std::size_t c = 0; c < cases; ++c) {
    Shape s(ext(rng) % 4 + 1);
    for (auto& e : s) e = ext(rng);
    const std::size_t axis = std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng);
    const Tensor x = random_tensor(s, rng, -20.0, 20.0);
    note(sweep, max_abs_diff(kernels::softmax(x, axis), reference::softmax(x, axis)),
         shape_string(s) + " axis " + std::to_string(axis));
  }
  return sweep;
}

OracleSweep sweep_cost_volume(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  OracleSweep sweep;
  for (std::size_t c = 0; c < cases; ++c) {
    CostVolumeSpec spec{8, pick(1, 3), pick(0, 4), pick(1, 4)};
    const Shape s{static_cast<std::size_t>(spec.groups * pick(1, 4)), static_cast<std::size_t>(pick(1, 12)),
                  static_cast<std::size_t>(pick(1, 12))};
    Tensor f1 = random_tensor(s, rng);
    Tensor f2 = random_tensor(s, rng);
    // Exercise the zero-norm guard.
    if (c % 5 == 0) std::fill_n(f2.ptr(), s[1] * s[2], 0.0);
    const Tensor fast = build_cost_volume(f1, f2, spec).data;
    const Tensor slow = reference::cost_volume(f1, f2, spec);
    note(sweep, max_abs_diff(fast, slow), shape_string(s) + " " + spec.label() + ",k=" + std::to_string(spec.radius));
  }
  return sweep;
}

ShiftResult shift_detection(double tu, double tv, std::uint64_t seed) {
  const auto au = static_cast<std::size_t>(std::abs(tu));
  const auto av = static_cast<std::size_t>(std::abs(tv));
  SyntheticSpec spec;
  spec.kind = MotionKind::translation;
  spec.magnitude = std::max(std::abs(tu), std::abs(tv));
  spec.width = au + (au > 0 ? 128 : 64);
  spec.height = av + (av > 0 ? 128 : 64);
  spec.translation = std::array<double, 2>{tu, tv};
  spec.seed = seed;
  const SyntheticSample sample = synthetic_pair(spec);
  const ModelParams params = ModelParams::initialize(seed);
  const FeaturePyramid a = encode(sample.pair.first, params);
  const FeaturePyramid b = encode(sample.pair.second, params);

  ShiftResult result;
  constexpr long long kMargin = 2;
  for (const auto& cv_spec : canonical_specs()) {
    const auto table = displacement_table(cv_spec);
    const auto hit = std::find(table.begin(), table.end(), Displacement{static_cast<int>(tu), static_cast<int>(tv)});
    if (hit == table.end()) continue;
    const auto target = static_cast<std::size_t>(hit - table.begin());
    const Tensor& f1 = cv_spec.stride == 2 ? a.f_s2 : a.f_s8;
    const Tensor& f2 = cv_spec.stride == 2 ? b.f_s2 : b.f_s8;
    const Tensor vol = build_cost_volume(f1, f2, cv_spec).data;
    const auto h = static_cast<long long>(f1.dim(1));
    const auto w = static_cast<long long>(f1.dim(2));
    const std::size_t n = static_cast<std::size_t>(h * w);
    const std::size_t cand = cv_spec.candidates();
    const auto cu = static_cast<long long>(tu) / cv_spec.stride;
    const auto cv = static_cast<long long>(tv) / cv_spec.stride;
    for (long long y = kMargin; y < h - kMargin; ++y) {
      for (long long x = kMargin; x < w - kMargin; ++x) {
        const long long my = y + cv;
        const long long mx = x + cu;
        if (my < kMargin || my >= h - kMargin || mx < kMargin || mx >= w - kMargin) continue;
        const auto p = static_cast<std::size_t>(y * w + x);
        std::size_t best = 0;
        double best_score = -1e300;
        for (std::size_t i = 0; i < cand; ++i) {
          double score = 0.0;
          for (int g = 0; g < cv_spec.groups; ++g) score += vol[(static_cast<std::size_t>(g) * cand + i) * n + p];
          if (score > best_score) {
            best_score = score;
            best = i;
          }
        }
        ++result.interior;
        result.correct += best == target ? 1 : 0;
      }
    }
  }
  return result;
}

std::vector<NamedGradCheck> kernel_gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<NamedGradCheck> out;
  auto add = [&](const std::string& name, const GraphFn& f, std::vector<Tensor> inputs, std::size_t max_per_input = 0) {
    out.push_back({name, check_gradients(f, std::move(inputs), rng(), 1e-5, 1e-6, max_per_input)});
  };

  const ConvSpec c2 = ConvSpec::conv2d(2, 3, 3, 2, 1);
  add("conv2d", [&](Tape&, const std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2], c2); },
      {random_tensor({2, 7, 6}, rng), random_tensor(c2.weight_shape(), rng), random_tensor({3}, rng)});
  const ConvSpec c3 = ConvSpec::conv3d(2, 2, 3, 1, 2, 2);
  add("conv3d", [&](Tape&, const std::vector<Var>& v) { return ops::conv3d(v[0], v[1], v[2], c3); },
      {random_tensor({2, 4, 5, 5}, rng), random_tensor(c3.weight_shape(), rng), random_tensor({2}, rng)});
  ConvSpec ct = ConvSpec::conv3d(3, 2, 3, 2, 1);
  ct.output_padding = {1, 0, 1};
  add("conv_transpose3d", [&](Tape&, const std::vector<Var>& v) { return ops::conv_transpose3d(v[0], v[1], v[2], ct); },
      {random_tensor({3, 3, 2, 3}, rng), random_tensor(ct.transpose_weight_shape(), rng), random_tensor({2}, rng)});
  add("instance_norm2d", [](Tape&, const std::vector<Var>& v) { return ops::instance_norm2d(v[0], v[1], v[2], 1e-5); },
      {random_tensor({3, 4, 5}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
  add("leaky_relu", [](Tape&, const std::vector<Var>& v) { return ops::leaky_relu(v[0], 0.1); },
      {away_from_zero({4, 5}, rng)});
  for (std::size_t axis = 0; axis < 3; ++axis) {
    add("softmax_axis" + std::to_string(axis), [axis](Tape&, const std::vector<Var>& v) { return ops::softmax(v[0], axis); },
        {random_tensor({3, 4, 2}, rng, -2, 2)});
  }
  add("spatial_subsample", [](Tape&, const std::vector<Var>& v) { return ops::spatial_subsample(v[0], 2); },
      {random_tensor({2, 3, 4, 6}, rng)});
  add("l2norm_channels", [](Tape&, const std::vector<Var>& v) { return l2norm_channels(v[0]); },
      {random_tensor({4, 3, 3}, rng)});
  const CostVolumeSpec cv{8, 1, 1, 2};
  add("cost_volume", [&](Tape&, const std::vector<Var>& v) { return build_cost_volume(v[0], v[1], cv); },
      {random_tensor({4, 3, 4}, rng), random_tensor({4, 3, 4}, rng)});
  const std::vector<CostVolumeSpec> specs(canonical_specs().begin(), canonical_specs().end());
  add("hypotheses_entropy",
      [&](Tape&, const std::vector<Var>& v) {
        Var omega = interpolation_weights(v[0]);
        return ops::concat({ops::reshape(flow_hypotheses(omega, specs), {14, 2, 2}), entropy_map(omega)});
      },
      {random_tensor({7, 81, 2, 2}, rng, -2, 2)}, 200);
  add("weighted_flow_sum", [](Tape&, const std::vector<Var>& v) { return weighted_flow_sum(ops::softmax(v[0], 0), v[1]); },
      {random_tensor({7, 2, 2}, rng), random_tensor({7, 2, 2, 2}, rng)});
  add("convex_combine", [](Tape&, const std::vector<Var>& v) { return convex_combine(v[0], ops::softmax(v[1], 0), 2); },
      {random_tensor({2, 3, 3}, rng), random_tensor({9, 4, 3, 3}, rng)});
  const FlowField gt = FlowField::make(random_tensor({2, 3, 3}, rng));
  add("l1_loss", [&](Tape&, const std::vector<Var>& v) { return l1_loss(v[0], gt); }, {random_tensor({2, 3, 3}, rng, 2, 3)});
  return out;
}

GradCheck end_to_end_gradient(std::uint64_t seed, std::size_t samples, std::size_t size) {
  std::mt19937_64 rng(seed);
  ModelParams params = ModelParams::initialize(seed);
  const ImagePair pair = ImagePair::make(random_tensor({3, size, size}, rng), random_tensor({3, size, size}, rng));
  const FlowField gt = FlowField::make(random_tensor({2, size, size}, rng, -10.0, 10.0));

  GradMap grads;
  {
    Tape tape;
    grads = tape.backward(l1_loss(forward(tape, pair, params).flow_full, gt));
  }
  auto loss_at = [&](const ModelParams& p) {
    Tape tape(false);
    return l1_loss(forward(tape, pair, p).flow_full.value(), gt);
  };

  const auto& layout = model_layout();
  std::uniform_int_distribution<std::size_t> pick_param(0, layout.size() - 1);
  constexpr double kStep = 1e-6;
  GradCheck result;
  for (std::size_t i = 0; i < samples; ++i) {
    const ParamSpec& spec = layout[pick_param(rng)];
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, shape_numel(spec.shape) - 1)(rng);
    const double original = params.get(spec.name)[k];
    params.get(spec.name)[k] = original + kStep;
    const double up = loss_at(params);
    params.get(spec.name)[k] = original - kStep;
    const double down = loss_at(params);
    params.get(spec.name)[k] = original;
    const double numeric = (up - down) / (2.0 * kStep);
    const double analytic = grads.at(spec.name)[k];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    ++result.checked;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      std::ostringstream os;
      os << spec.name << "[" << k << "]: analytic " << analytic << " numeric " << numeric;
      result.worst = os.str();
    }
  }
  return result;
}

namespace {

struct Point {
  double x;
  double y;
};

double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

double segment_distance(const Point& a, const Point& b, const Point& p) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  const double t = len2 == 0.0 ? 0.0 : std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
  return std::hypot(p.x - a.x - t * dx, p.y - a.y - t * dy);
}

/// Distance from p to the convex hull of pts (0 inside), via a monotone chain.
double outside_hull(std::vector<Point> pts, const Point& p) {
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  std::vector<Point> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k > 1 ? k - 1 : k);
  double nearest = 1e300;
  bool inside = hull.size() >= 3;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const Point& a = hull[i];
    const Point& b = hull[(i + 1) % hull.size()];
    nearest = std::min(nearest, segment_distance(a, b, p));
    if (cross(a, b, p) < 0) inside = false;
  }
  return inside ? 0.0 : nearest;
}

}  // namespace

StructuralReport structural_invariants(std::uint64_t seed, std::size_t size) {
  std::mt19937_64 rng(seed);
  const ModelParams params = ModelParams::initialize(seed);
  const ImagePair pair = ImagePair::make(random_tensor({3, size, size}, rng), random_tensor({3, size, size}, rng));
  const Prediction p = predict(pair, params);
  StructuralReport r;
  r.min_probability = 1.0;

  const Tensor& omega = p.hypotheses.omega;
  const std::size_t D = omega.dim(0);
  const std::size_t cand = omega.dim(1);
  const std::size_t n = omega.dim(2) * omega.dim(3);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t q = 0; q < n; ++q) {
      double s = 0.0;
      for (std::size_t i = 0; i < cand; ++i) {
        const double w = omega[(d * cand + i) * n + q];
        r.min_probability = std::min(r.min_probability, w);
        s += w;
      }
      r.omega_sum_error = std::max(r.omega_sum_error, std::abs(s - 1.0));
    }
  }
  const Tensor& alpha = p.fusion.alpha;
  for (std::size_t q = 0; q < n; ++q) {
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      r.min_probability = std::min(r.min_probability, alpha[d * n + q]);
      s += alpha[d * n + q];
    }
    r.alpha_sum_error = std::max(r.alpha_sum_error, std::abs(s - 1.0));
  }

  r.hypothesis_excess = -1e300;
  const Tensor& flows = p.hypotheses.flows;
  const Tensor& fused = p.fusion.flow_coarse;
  const auto& specs = canonical_specs();
  std::vector<Point> pts(D);
  for (std::size_t q = 0; q < n; ++q) {
    Point mix{0.0, 0.0};
    for (std::size_t d = 0; d < D; ++d) {
      pts[d] = {flows[(d * 2) * n + q], flows[(d * 2 + 1) * n + q]};
      for (double f : {pts[d].x, pts[d].y}) r.hypothesis_excess = std::max(r.hypothesis_excess, std::abs(f) - specs[d].reach());
      mix.x += alpha[d * n + q] * pts[d].x;
      mix.y += alpha[d * n + q] * pts[d].y;
    }
    const Point f{fused[q], fused[n + q]};
    r.hull_excess = std::max(r.hull_excess, outside_hull(pts, f));
    r.mixture_residual = std::max({r.mixture_residual, std::abs(mix.x - f.x), std::abs(mix.y - f.y)});
  }

  const std::size_t h = omega.dim(2);
  const std::size_t w = omega.dim(3);
  Tape tape(false);
  const Tensor constant({2, h, w}, 37.25);
  Var guide4 = tape.constant(random_tensor({34, h, w}, rng));
  Var up4 = convex_upsample(tape.constant(constant), guide4, 4, params);
  Var guide2 = tape.constant(random_tensor({2, 4 * h, 4 * w}, rng));
  Var up2 = convex_upsample(up4, guide2, 2, params);
  for (const Var* v : {&up4, &up2}) {
    for (double x : v->value().data()) r.constant_upsample_error = std::max(r.constant_upsample_error, std::abs(x - 37.25));
  }
  return r;
}

}  // namespace dcv::testing
