#include "dcv/cost_volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dcv/detail/binary_io.hpp"
#include "dcv/errors.hpp"
#include "dcv/kernels.hpp"
#include "dcv/ops.hpp"
#include "dcv/parallel.hpp"

namespace dcv {

void CostVolumeSpec::validate() const {
  if (stride < 1 || dilation < 1) throw ConfigError("cost volume stride and dilation must be >= 1");
  if (radius < 0) throw ConfigError("cost volume radius must be >= 0");
  if (groups < 1) throw ConfigError("cost volume group count must be >= 1");
}

std::string CostVolumeSpec::label() const {
  std::ostringstream os;
  os << "s=" << stride << ",d=" << dilation;
  return os.str();
}

const std::array<CostVolumeSpec, 7>& canonical_specs() {
  static const std::array<CostVolumeSpec, 7> specs = {{
      {2, 1, 4, 4},
      {8, 1, 4, 4},
      {8, 3, 4, 4},
      {8, 5, 4, 4},
      {8, 9, 4, 4},
      {8, 13, 4, 4},
      {8, 21, 4, 4},
  }};
  return specs;
}

std::size_t canonical_index(const CostVolumeSpec& spec) {
  const auto& specs = canonical_specs();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].stride == spec.stride && specs[i].dilation == spec.dilation) return i;
  }
  std::string valid;
  for (const auto& s : specs) valid += " (" + s.label() + ")";
  throw ConfigError("spec (" + spec.label() + ") is not canonical; valid specs:" + valid);
}

std::vector<Displacement> displacement_table(const CostVolumeSpec& spec) {
  spec.validate();
  std::vector<Displacement> table;
  table.reserve(spec.candidates());
  const int step = spec.stride * spec.dilation;
  for (int j = -spec.radius; j <= spec.radius; ++j) {
    for (int i = -spec.radius; i <= spec.radius; ++i) table.push_back({step * i, step * j});
  }
  return table;
}

std::vector<double> similarity(std::span<const double> a, std::span<const double> b, std::size_t groups) {
  if (groups == 0 || a.size() % groups != 0) {
    throw ShapeError("similarity: vector length " + std::to_string(a.size()) + " not divisible by " +
                     std::to_string(groups));
  }
  if (a.size() != b.size()) throw ShapeError("similarity: vector lengths differ");
  const std::size_t len = a.size() / groups;
  std::vector<double> out(groups, 0.0);
  for (std::size_t g = 0; g < groups; ++g) {
    double d = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = g * len; i < (g + 1) * len; ++i) {
      d += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    out[g] = (na == 0.0 || nb == 0.0) ? 0.0 : d / (std::sqrt(na) * std::sqrt(nb));
  }
  return out;
}

namespace {

struct VolumeGeometry {
  std::size_t channels;
  std::size_t groups;
  std::size_t per_group;
  std::size_t h;
  std::size_t w;
  int window;
  int radius;
  int dilation;
};

VolumeGeometry check_features(const Tensor& f1, const Tensor& f2, const CostVolumeSpec& spec) {
  spec.validate();
  if (f1.rank() != 3) throw ShapeError("cost volume: features must be [C x h x w], got " + shape_string(f1.shape()));
  if (!f1.same_shape(f2)) {
    throw ShapeError("cost volume: feature shapes differ: " + shape_string(f1.shape()) + " vs " +
                     shape_string(f2.shape()));
  }
  const auto groups = static_cast<std::size_t>(spec.groups);
  if (f1.dim(0) % groups != 0) {
    throw ShapeError("cost volume: channel count " + std::to_string(f1.dim(0)) + " not divisible by " +
                     std::to_string(groups) + " groups");
  }
  return {f1.dim(0), groups, f1.dim(0) / groups, f1.dim(1), f1.dim(2), spec.window(), spec.radius, spec.dilation};
}

/// Per-group sub-vector norms [groups x h*w], accumulated in channel order.
std::vector<double> group_norms(const Tensor& f, const VolumeGeometry& g) {
  const std::size_t n = g.h * g.w;
  std::vector<double> norms(g.groups * n, 0.0);
  for (std::size_t grp = 0; grp < g.groups; ++grp) {
    double* dst = norms.data() + grp * n;
    for (std::size_t c = grp * g.per_group; c < (grp + 1) * g.per_group; ++c) {
      const double* x = f.ptr() + c * n;
      for (std::size_t i = 0; i < n; ++i) dst[i] += x[i] * x[i];
    }
    for (std::size_t i = 0; i < n; ++i) dst[i] = std::sqrt(dst[i]);
  }
  return norms;
}

/// Valid x range [x0, x1) for which x + dx lies inside [0, w).
std::pair<std::size_t, std::size_t> valid_range(long long dx, std::size_t w) {
  const long long lo = std::max<long long>(0, -dx);
  const long long hi = std::min<long long>(static_cast<long long>(w), static_cast<long long>(w) - dx);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

namespace {

constexpr std::size_t kLanes = 8;
using Lane = double __attribute__((vector_size(kLanes * sizeof(double))));

Lane load(const double* p) {
  Lane v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

/// K horizontal offsets for one 8-pixel strip. Products accumulate in channel
/// order, matching the per-pixel reference sum.
template <std::size_t K>
void strip_dots(const double* a, const double* b, std::size_t channels, std::size_t a_stride, std::size_t b_stride,
                const std::size_t* offsets, Lane* acc) {
  Lane s[K] = {};
  for (std::size_t c = 0; c < channels; ++c) {
    const Lane av = load(a + c * a_stride);
    const double* bc = b + c * b_stride;
    for (std::size_t k = 0; k < K; ++k) s[k] += av * load(bc + offsets[k]);
  }
  for (std::size_t k = 0; k < K; ++k) acc[k] = s[k];
}

}  // namespace

CostVolume build_cost_volume(const Tensor& f1, const Tensor& f2, const CostVolumeSpec& spec) {
  const VolumeGeometry g = check_features(f1, f2, spec);
  const std::size_t n = g.h * g.w;
  const auto win = static_cast<std::size_t>(g.window);
  const std::size_t reach = static_cast<std::size_t>(g.radius) * static_cast<std::size_t>(g.dilation);
  const std::size_t wa = (g.w + kLanes - 1) / kLanes * kLanes;
  const std::size_t wb = wa + 2 * reach;
  std::vector<std::size_t> offsets(win);
  for (std::size_t iu = 0; iu < win; ++iu) offsets[iu] = iu * static_cast<std::size_t>(g.dilation);
  Tensor out({g.groups, win, win, g.h, g.w});

  // Zero-padded copies of one group's rows [per_group x width] and their norms.
  auto copy_rows = [&](const Tensor& f, std::size_t grp, std::size_t y, std::size_t width, std::size_t left,
                       std::vector<double>& rows, std::vector<double>& sq) {
    std::fill(rows.begin(), rows.end(), 0.0);
    std::fill(sq.begin(), sq.end(), 0.0);
    for (std::size_t c = 0; c < g.per_group; ++c) {
      const double* src = f.ptr() + (grp * g.per_group + c) * n + y * g.w;
      double* dst = rows.data() + c * width + left;
      std::copy_n(src, g.w, dst);
      for (std::size_t x = 0; x < g.w; ++x) sq[left + x] += dst[x] * dst[x];
    }
    for (std::size_t x = 0; x < g.w; ++x) sq[left + x] = std::sqrt(sq[left + x]);
  };

  parallel_chunks(g.groups * g.h, [&](std::size_t, std::size_t r0, std::size_t r1) {
    std::vector<double> rows_a(g.per_group * wa);
    std::vector<double> rows_b(g.per_group * wb);
    std::vector<double> sq_a(wa);
    std::vector<double> sq_b(wb);
    std::vector<Lane> acc(win);
    for (std::size_t r = r0; r < r1; ++r) {
      const std::size_t grp = r / g.h;
      const std::size_t y = r % g.h;
      copy_rows(f1, grp, y, wa, 0, rows_a, sq_a);
      for (std::size_t jv = 0; jv < win; ++jv) {
        const long long y2 = static_cast<long long>(y) +
                             static_cast<long long>(g.dilation) * (static_cast<long long>(jv) - g.radius);
        if (y2 < 0 || y2 >= static_cast<long long>(g.h)) continue;
        copy_rows(f2, grp, static_cast<std::size_t>(y2), wb, reach, rows_b, sq_b);
        for (std::size_t x0 = 0; x0 < g.w; x0 += kLanes) {
          const double* a = rows_a.data() + x0;
          const double* b = rows_b.data() + x0;
          std::size_t iu = 0;
          for (; iu + 9 <= win; iu += 9) {
            strip_dots<9>(a, b, g.per_group, wa, wb, offsets.data() + iu, acc.data() + iu);
          }
          for (; iu < win; ++iu) strip_dots<1>(a, b, g.per_group, wa, wb, offsets.data() + iu, acc.data() + iu);
          const std::size_t lanes = std::min(kLanes, g.w - x0);
          for (iu = 0; iu < win; ++iu) {
            double* dst = out.ptr() + ((grp * win + jv) * win + iu) * n + y * g.w + x0;
            const double* sb = sq_b.data() + x0 + offsets[iu];
            for (std::size_t l = 0; l < lanes; ++l) {
              const double na = sq_a[x0 + l];
              const double nb = sb[l];
              dst[l] = (na == 0.0 || nb == 0.0) ? 0.0 : acc[iu][l] / (na * nb);
            }
          }
        }
      }
    }
  });
  return {spec, std::move(out)};
}

Var build_cost_volume(const Var& f1, const Var& f2, const CostVolumeSpec& spec) {
  CostVolume cv = build_cost_volume(f1.value(), f2.value(), spec);
  return f1.tape().record(std::move(cv.data), {f1, f2}, [spec](detail::Node& node) {
    const Tensor& a_t = Tape::input_value(node, 0);
    const Tensor& b_t = Tape::input_value(node, 1);
    const VolumeGeometry g = check_features(a_t, b_t, spec);
    const std::size_t n = g.h * g.w;
    const auto win = static_cast<std::size_t>(g.window);
    const std::vector<double> n1 = group_norms(a_t, g);
    const std::vector<double> n2 = group_norms(b_t, g);
    Tensor ga(a_t.shape());
    Tensor gb(b_t.shape());
    // Groups own disjoint channel ranges, so they can run concurrently.
    parallel_chunks(g.groups, [&](std::size_t, std::size_t g0, std::size_t g1) {
      std::vector<double> c0(g.w);
      std::vector<double> ca(g.w);
      std::vector<double> cb(g.w);
      for (std::size_t grp = g0; grp < g1; ++grp) {
        for (std::size_t jv = 0; jv < win; ++jv) {
          const long long dy = static_cast<long long>(g.dilation) * (static_cast<long long>(jv) - g.radius);
          for (std::size_t iu = 0; iu < win; ++iu) {
            const long long dx = static_cast<long long>(g.dilation) * (static_cast<long long>(iu) - g.radius);
            const auto [x0, x1] = valid_range(dx, g.w);
            const std::size_t plane = ((grp * win + jv) * win + iu) * n;
            for (std::size_t y = 0; y < g.h; ++y) {
              const long long y2 = static_cast<long long>(y) + dy;
              if (y2 < 0 || y2 >= static_cast<long long>(g.h) || x0 >= x1) continue;
              const double* gr = node.grad.ptr() + plane + y * g.w;
              const double* sv = node.value.ptr() + plane + y * g.w;
              const double* na = n1.data() + grp * n + y * g.w;
              const double* nb = n2.data() + grp * n + static_cast<std::size_t>(y2) * g.w + dx;
              for (std::size_t x = x0; x < x1; ++x) {
                if (na[x] == 0.0 || nb[x] == 0.0) {
                  c0[x] = ca[x] = cb[x] = 0.0;
                  continue;
                }
                c0[x] = gr[x] / (na[x] * nb[x]);
                ca[x] = gr[x] * sv[x] / (na[x] * na[x]);
                cb[x] = gr[x] * sv[x] / (nb[x] * nb[x]);
              }
              for (std::size_t c = grp * g.per_group; c < (grp + 1) * g.per_group; ++c) {
                const std::size_t arow = c * n + y * g.w;
                const std::size_t brow = c * n + static_cast<std::size_t>(y2) * g.w;
                const double* a = a_t.ptr() + arow;
                const double* b = b_t.ptr() + brow + dx;
                double* da = ga.ptr() + arow;
                double* db = gb.ptr() + brow + dx;
                for (std::size_t x = x0; x < x1; ++x) {
                  da[x] += c0[x] * b[x] - ca[x] * a[x];
                  db[x] += c0[x] * a[x] - cb[x] * b[x];
                }
              }
            }
          }
        }
      }
    });
    if (Tape::input_needs_grad(node, 0)) node.inputs[0]->accumulate(std::move(ga));
    if (Tape::input_needs_grad(node, 1)) node.inputs[1]->accumulate(std::move(gb));
  });
}

namespace {

void check_stack_specs(const std::vector<CostVolumeSpec>& specs) {
  const auto& canon = canonical_specs();
  if (specs.size() != canon.size()) {
    throw ConfigError("cost volume stack needs exactly " + std::to_string(canon.size()) + " volumes, got " +
                      std::to_string(specs.size()));
  }
  for (std::size_t i = 0; i < canon.size(); ++i) {
    if (!(specs[i] == canon[i])) {
      throw ConfigError("cost volume stack entry " + std::to_string(i) + " is (" + specs[i].label() +
                        "), expected (" + canon[i].label() + ")");
    }
  }
}

constexpr std::size_t kFineSubsample = 4;

}  // namespace

Var assemble_stack(const std::vector<Var>& volumes, const std::vector<CostVolumeSpec>& specs) {
  check_stack_specs(specs);
  if (volumes.size() != specs.size()) throw ConfigError("cost volume stack: volume/spec count mismatch");
  std::vector<Var> parts;
  parts.reserve(volumes.size());
  parts.push_back(ops::spatial_subsample(volumes[0], kFineSubsample));
  for (std::size_t i = 1; i < volumes.size(); ++i) {
    if (volumes[i].shape() != parts[0].shape()) {
      throw ShapeError("cost volume stack: volume (" + specs[i].label() + ") has shape " +
                       shape_string(volumes[i].shape()) + ", expected " + shape_string(parts[0].shape()));
    }
    parts.push_back(volumes[i]);
  }
  Var cat = ops::concat(parts);
  const Shape& s = cat.shape();
  return ops::reshape(cat, {s[0], s[1] * s[2], s[3], s[4]});
}

CostVolumeStack assemble_stack(const std::vector<CostVolume>& volumes) {
  Tape tape(false);
  std::vector<Var> vars;
  std::vector<CostVolumeSpec> specs;
  for (const auto& v : volumes) {
    vars.push_back(tape.constant(v.data));
    specs.push_back(v.spec);
  }
  Var stacked = assemble_stack(vars, specs);
  return {stacked.value(), specs};
}

void write_volume_dump(const Tensor& volume, const std::filesystem::path& path) {
  if (volume.rank() != 5) throw ShapeError("volume dump expects a rank-5 tensor, got " + shape_string(volume.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  os.write("DCV1", 4);
  for (auto e : volume.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  for (double v : volume.data()) detail::write_le<double>(os, v);
  if (!os) throw FormatError("failed writing volume dump: " + path.string());
}

Tensor read_volume_dump(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open volume dump: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "DCV1") throw FormatError("bad volume dump magic");
  Shape shape(5);
  for (auto& e : shape) {
    e = detail::read_le<std::uint32_t>(is, "volume extent");
    if (e == 0) throw FormatError("zero extent in volume dump");
  }
  Tensor t(shape);
  for (auto& v : t.data()) v = detail::read_le<double>(is, "volume data");
  return t;
}

}  // namespace dcv
