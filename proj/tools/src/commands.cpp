#include "dcv/cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "dcv/cost_volume.hpp"
#include "dcv/errors.hpp"
#include "dcv/flow_io.hpp"
#include "dcv/kernels.hpp"
#include "dcv/metrics.hpp"
#include "dcv/parallel.hpp"
#include "dcv/reference.hpp"
#include "dcv/training.hpp"
#include "manifest.hpp"

namespace dcv::cli {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

fs::path with_suffix(const fs::path& prefix, const std::string& suffix) {
  fs::path p = prefix;
  p += suffix;
  return p;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Tensor crop(const Tensor& t, std::size_t h, std::size_t w) {
  const std::size_t H = t.dim(1);
  const std::size_t W = t.dim(2);
  if (H == h && W == w) return t;
  Tensor out({t.dim(0), h, w});
  for (std::size_t c = 0; c < t.dim(0); ++c) {
    for (std::size_t y = 0; y < h; ++y) std::copy_n(t.ptr() + (c * H + y) * W, w, out.ptr() + (c * h + y) * w);
  }
  return out;
}

double median_magnitude(const FlowField& f) {
  std::vector<double> m(f.height() * f.width());
  for (std::size_t y = 0; y < f.height(); ++y) {
    for (std::size_t x = 0; x < f.width(); ++x) m[y * f.width() + x] = std::hypot(f.u(y, x), f.v(y, x));
  }
  std::nth_element(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(m.size() / 2), m.end());
  return m[m.size() / 2];
}

std::pair<Tensor, Tensor> read_pair(const fs::path& a, const fs::path& b) {
  Tensor first = read_image(a);
  Tensor second = read_image(b);
  if (!first.same_shape(second)) {
    throw ShapeError("image sizes differ: " + shape_string(first.shape()) + " vs " + shape_string(second.shape()));
  }
  return {std::move(first), std::move(second)};
}

ModelParams load_params(const fs::path& path) {
  if (!fs::exists(path)) throw FormatError("checkpoint not found: " + path.string());
  return load_checkpoint(path);
}

TimingStats time_it(std::size_t repeats, const std::function<void()>& fn) {
  std::vector<double> ms;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
    const auto t0 = Clock::now();
    fn();
    ms.push_back(elapsed_ms(t0));
  }
  std::sort(ms.begin(), ms.end());
  return {ms[ms.size() / 2], ms.front()};
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

std::size_t up8(std::size_t n) { return (n + 7) / 8 * 8; }

}  // namespace

Tensor reflect_pad8(const Tensor& image) {
  const std::size_t H = image.dim(1);
  const std::size_t W = image.dim(2);
  const std::size_t h = up8(H);
  const std::size_t w = up8(W);
  if (h == H && w == W) return image;
  auto mirror = [](std::size_t i, std::size_t n) {
    if (n == 1) return std::size_t{0};
    const std::size_t period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Tensor out({image.dim(0), h, w});
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out.at({c, y, x}) = image.at({c, mirror(y, H), mirror(x, W)});
    }
  }
  return out;
}

int cmd_flow(const GlobalOptions& global, const FlowOptions& o, std::ostream& out, std::ostream& err) {
  Manifest manifest(with_suffix(o.out_prefix, ".manifest.json"), "flow");
  manifest.set_seed(global.seed.value_or(0));
  manifest.config() = {{"image1", o.image1.string()},
                       {"image2", o.image2.string()},
                       {"checkpoint", o.checkpoint.string()},
                       {"out_prefix", o.out_prefix.string()},
                       {"auto_pad", o.auto_pad}};
  return guarded(manifest, err, [&] {
    manifest.add_input(o.image1);
    manifest.add_input(o.image2);
    manifest.add_input(o.checkpoint);
    auto [first, second] = read_pair(o.image1, o.image2);
    const std::size_t H = first.dim(1);
    const std::size_t W = first.dim(2);
    if (H % 8 != 0 || W % 8 != 0) {
      if (!o.auto_pad) {
        throw ConfigError("image size " + std::to_string(W) + "x" + std::to_string(H) +
                          " is not divisible by 8; pass --auto-pad to reflect-pad");
      }
      first = reflect_pad8(first);
      second = reflect_pad8(second);
    }
    manifest.extra()["padding"] = {{"mode", "reflect"},
                                   {"bottom", first.dim(1) - H},
                                   {"right", first.dim(2) - W}};
    const ModelParams params = load_params(o.checkpoint);
    const Prediction p = predict(ImagePair::make(std::move(first), std::move(second)), params);
    manifest.set_timing(p.times);
    const Tensor flow = crop(p.fusion.flow_full, H, W);
    if (!flow.all_finite()) throw NumericalError("predicted flow contains non-finite values");
    const FlowField field = FlowField::make(flow);
    const fs::path flo = with_suffix(o.out_prefix, ".flo");
    const fs::path png = with_suffix(o.out_prefix, ".png");
    write_flo(field, flo);
    write_png(flow_to_color(field), png);
    manifest.add_output(flo);
    manifest.add_output(png);
    const double med = median_magnitude(field);
    manifest.extra()["median_magnitude"] = med;
    out << "size=" << W << "x" << H << "\n"
        << "median_magnitude=" << fmt("%.6f", med) << "\n"
        << "encode_ms=" << fmt("%.3f", p.times.encode_ms) << "\n"
        << "cost_volume_ms=" << fmt("%.3f", p.times.cost_volume_ms) << "\n"
        << "decoder_ms=" << fmt("%.3f", p.times.decoder_ms) << "\n"
        << "upsample_ms=" << fmt("%.3f", p.times.upsample_ms) << "\n"
        << "total_ms=" << fmt("%.3f", p.times.total_ms) << "\n"
        << "wrote " << flo.string() << " " << png.string() << "\n";
  });
}

int cmd_train_toy(const GlobalOptions& global, const TrainOptions& o, std::ostream& out, std::ostream& err) {
  std::error_code ec;
  fs::create_directories(o.out_dir, ec);
  Manifest manifest(o.out_dir / "manifest.json", "train-toy");
  return guarded(manifest, err, [&] {
    if (ec) throw FormatError("cannot create " + o.out_dir.string() + ": " + ec.message());
    TrainConfig config;
    if (o.config) {
      manifest.add_input(*o.config);
      config = TrainConfig::parse(read_text(*o.config));
    }
    if (global.seed) config.seed = *global.seed;
    config.validate();
    manifest.set_seed(config.seed);
    for (const auto& [k, v] : config.to_map()) manifest.config()[k] = v;

    const auto t0 = Clock::now();
    const auto dataset = translation_dataset(config.pairs, config.image_size, config.max_translation, config.seed);
    std::ofstream log(o.out_dir / "metrics.log");
    if (!log) throw FormatError("cannot write " + (o.out_dir / "metrics.log").string());
    TrainHooks hooks;
    hooks.on_step = [&](const StepRecord& r) {
      const std::string line = format_step(r);
      log << line << '\n';
      if (r.step % 100 == 0 || r.step + 1 == config.steps) out << line << '\n';
    };
    const TrainResult result = train_toy(dataset, config, hooks);
    log.close();

    const fs::path ckpt = o.out_dir / "checkpoint.dcvw";
    save_checkpoint(result.params, ckpt);
    double head = 0.0;
    const std::size_t n = std::min<std::size_t>(10, result.log.size());
    for (std::size_t i = 0; i < n; ++i) head += result.log[i].loss;
    head /= static_cast<double>(n);
    const std::string digest = sha256_file(ckpt);
    std::ofstream summary(o.out_dir / "summary.txt");
    summary << "steps=" << result.log.size() << "\n"
            << "final_epe=" << fmt("%.6f", result.final_epe) << "\n"
            << "final_loss=" << fmt("%.6e", result.log.back().loss) << "\n"
            << "initial_loss_mean=" << fmt("%.6e", head) << "\n"
            << "checkpoint_sha256=" << digest << "\n";
    summary.close();
    out << "final_epe=" << fmt("%.6f", result.final_epe) << "\n"
        << "checkpoint=" << ckpt.string() << "\n";

    PhaseTimes t;
    t.total_ms = elapsed_ms(t0);
    manifest.set_timing(t);
    manifest.extra()["final_epe"] = result.final_epe;
    manifest.extra()["final_loss"] = result.log.back().loss;
    manifest.extra()["initial_loss_mean"] = head;
    manifest.add_output(ckpt);
    manifest.add_output(o.out_dir / "metrics.log");
    manifest.add_output(o.out_dir / "summary.txt");
  });
}

namespace {

std::map<std::string, fs::path> list_flow_files(const fs::path& dir, const std::set<std::string>& exts) {
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
  std::map<std::string, fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !exts.contains(entry.path().extension().string())) continue;
    files[entry.path().stem().string()] = entry.path();
  }
  return files;
}

}  // namespace

int cmd_eval(const GlobalOptions& global, const EvalOptions& o, std::ostream& out, std::ostream& err) {
  Manifest manifest(with_suffix(o.out, ".manifest.json"), "eval");
  manifest.set_seed(global.seed.value_or(0));
  manifest.config() = {{"pred_dir", o.pred_dir.string()},
                       {"gt_dir", o.gt_dir.string()},
                       {"format", o.format},
                       {"out", o.out.string()}};
  return guarded(manifest, err, [&] {
    std::string format = o.format;
    if (format.empty()) {
      const auto all = list_flow_files(o.pred_dir, {".flo", ".png"});
      const auto gts = list_flow_files(o.gt_dir, {".flo", ".png"});
      std::set<std::string> exts;
      for (const auto* m : {&all, &gts}) {
        for (const auto& [stem, p] : *m) exts.insert(p.extension().string());
      }
      if (exts.size() > 1) throw ConfigError("mixed .flo and .png files; pass --format flo or --format kitti");
      format = exts.contains(".png") ? "kitti" : "flo";
    }
    if (format != "flo" && format != "kitti") throw ConfigError("unknown format '" + format + "' (flo or kitti)");
    const std::string ext = format == "flo" ? ".flo" : ".png";
    const auto preds = list_flow_files(o.pred_dir, {ext});
    const auto gts = list_flow_files(o.gt_dir, {ext});
    auto load = [&](const fs::path& p) { return format == "flo" ? read_flo(p) : read_kitti_png(p); };

    std::ostringstream report;
    report << "format=" << format << "\n";
    std::vector<std::string> unpaired;
    double sum_epe = 0.0;
    double sum_fl = 0.0;
    std::size_t pairs = 0;
    for (const auto& [stem, pred_path] : preds) {
      const auto gt = gts.find(stem);
      if (gt == gts.end()) {
        unpaired.push_back(pred_path.string());
        continue;
      }
      const FlowField pred = load(pred_path);
      const FlowField truth = load(gt->second);
      const EpeResult e = epe(pred, truth);
      const double fl = fl_all(pred, truth);
      report << "file=" << stem << " epe=" << fmt("%.6f", e.mean) << " fl_all=" << fmt("%.4f", fl)
             << " valid=" << e.valid_pixels << "\n";
      sum_epe += e.mean;
      sum_fl += fl;
      ++pairs;
    }
    for (const auto& [stem, gt_path] : gts) {
      if (!preds.contains(stem)) unpaired.push_back(gt_path.string());
    }
    report << "pairs=" << pairs << "\n";
    report << "mean_epe=" << fmt("%.6f", pairs ? sum_epe / pairs : 0.0) << "\n";
    report << "mean_fl_all=" << fmt("%.4f", pairs ? sum_fl / pairs : 0.0) << "\n";
    for (const auto& u : unpaired) report << "unpaired=" << u << "\n";
    out << report.str();
    std::ofstream(o.out) << report.str();
    manifest.add_output(o.out);
    manifest.extra()["pairs"] = pairs;
    manifest.extra()["mean_epe"] = pairs ? sum_epe / pairs : 0.0;
    if (!unpaired.empty()) {
      std::string msg = "unpaired files:";
      for (const auto& u : unpaired) msg += " " + u;
      throw ConfigError(msg);
    }
  });
}

BenchReport run_bench(const BenchOptions& o, std::uint64_t seed) {
  BenchReport report;
  report.repeats = std::max<std::size_t>(1, o.repeats);
  report.threads = num_threads();
  std::ostringstream machine;
  machine << "hardware_threads=" << std::thread::hardware_concurrency() << " compiler=\"" << __VERSION__ << "\"";
  report.machine = machine.str();
  std::mt19937_64 rng(seed);
  const ModelParams params = o.forward ? ModelParams::initialize(seed) : ModelParams{};
  for (const auto& [w, h] : o.sizes) {
    BenchRow row;
    row.width = w;
    row.height = h;
    row.padded_width = up8(w);
    row.padded_height = up8(h);
    const std::size_t H = row.padded_height;
    const std::size_t W = row.padded_width;
    const Tensor a2 = l2norm_channels(Tensor::uniform({kStride2Channels, H / 2, W / 2}, -1, 1, rng));
    const Tensor b2 = l2norm_channels(Tensor::uniform({kStride2Channels, H / 2, W / 2}, -1, 1, rng));
    const Tensor a8 = l2norm_channels(Tensor::uniform({kStride8Channels, H / 8, W / 8}, -1, 1, rng));
    const Tensor b8 = l2norm_channels(Tensor::uniform({kStride8Channels, H / 8, W / 8}, -1, 1, rng));
    std::vector<CostVolume> volumes;
    row.cost_volume = time_it(report.repeats, [&] {
      volumes.clear();
      for (const auto& spec : canonical_specs()) {
        volumes.push_back(spec.stride == 2 ? build_cost_volume(a2, b2, spec) : build_cost_volume(a8, b8, spec));
      }
    });
    if (o.naive) {
      row.cost_volume_naive = time_it(report.repeats, [&] {
        for (const auto& spec : canonical_specs()) {
          const Tensor v = spec.stride == 2 ? reference::cost_volume(a2, b2, spec) : reference::cost_volume(a8, b8, spec);
          if (v.size() == 0) throw NumericalError("empty volume");
        }
      });
    }
    const Tensor stack = assemble_stack(volumes).data;
    volumes.clear();
    const ConvSpec spec = ConvSpec::conv3d(kStackChannels, 32, 3, 1, 1);
    const Tensor weight = Tensor::normal(spec.weight_shape(), 0.05, rng);
    const Tensor bias({32});
    row.conv3d = time_it(report.repeats, [&] { (void)kernels::conv3d(stack, weight, bias, spec); });
    if (o.forward) {
      const ImagePair pair = ImagePair::make(Tensor::uniform({3, H, W}, -1, 1, rng), Tensor::uniform({3, H, W}, -1, 1, rng));
      std::vector<double> enc, cv, dec, up, total;
      row.forward = time_it(report.repeats, [&] {
        const Prediction p = predict(pair, params);
        enc.push_back(p.times.encode_ms);
        cv.push_back(p.times.cost_volume_ms);
        dec.push_back(p.times.decoder_ms);
        up.push_back(p.times.upsample_ms);
        total.push_back(p.times.total_ms);
      });
      row.phases = {median_of(enc), median_of(cv), median_of(dec), median_of(up), median_of(total)};
    }
    report.rows.push_back(row);
  }
  return report;
}

std::string format_bench(const BenchReport& r) {
  std::ostringstream os;
  os << "machine: " << r.machine << "\n"
     << "threads=" << r.threads << "\n"
     << "repeats=" << r.repeats << "\n";
  auto stat = [&](const std::string& key, const TimingStats& t) {
    os << key << "_median_ms=" << fmt("%.3f", t.median_ms) << "\n" << key << "_min_ms=" << fmt("%.3f", t.min_ms) << "\n";
  };
  for (const auto& row : r.rows) {
    os << "\nsize=" << row.width << "x" << row.height << "\n"
       << "padded=" << row.padded_width << "x" << row.padded_height << "\n";
    stat("cost_volume", row.cost_volume);
    if (row.cost_volume_naive) {
      stat("cost_volume_naive", *row.cost_volume_naive);
      os << "cost_volume_speedup=" << fmt("%.2f", row.cost_volume_naive->median_ms / row.cost_volume.median_ms) << "\n";
    }
    stat("conv3d", row.conv3d);
    if (row.forward) {
      stat("forward", *row.forward);
      const PhaseTimes& p = row.phases;
      const double sum = p.encode_ms + p.cost_volume_ms + p.decoder_ms + p.upsample_ms;
      os << "phase_encode_ms=" << fmt("%.3f", p.encode_ms) << "\n"
         << "phase_cost_volume_ms=" << fmt("%.3f", p.cost_volume_ms) << "\n"
         << "phase_decoder_ms=" << fmt("%.3f", p.decoder_ms) << "\n"
         << "phase_upsample_ms=" << fmt("%.3f", p.upsample_ms) << "\n"
         << "phase_sum_ms=" << fmt("%.3f", sum) << "\n"
         << "phase_total_ms=" << fmt("%.3f", p.total_ms) << "\n";
    }
  }
  return os.str();
}

int cmd_bench(const GlobalOptions& global, const BenchOptions& o, std::ostream& out, std::ostream& err) {
  Manifest manifest(with_suffix(o.out, ".manifest.json"), "bench");
  const std::uint64_t seed = global.seed.value_or(0);
  manifest.set_seed(seed);
  nlohmann::json sizes = nlohmann::json::array();
  for (const auto& [w, h] : o.sizes) sizes.push_back(std::to_string(w) + "x" + std::to_string(h));
  manifest.config() = {{"sizes", sizes}, {"repeats", o.repeats}, {"naive", o.naive}, {"forward", o.forward}};
  return guarded(manifest, err, [&] {
    const BenchReport report = run_bench(o, seed);
    const std::string text = format_bench(report);
    out << text;
    std::ofstream(o.out) << text;
    manifest.add_output(o.out);
    if (!report.rows.empty()) manifest.set_timing(report.rows.front().phases);
  });
}

int cmd_costvol_dump(const GlobalOptions& global, const CostvolOptions& o, std::ostream& out, std::ostream& err) {
  Manifest manifest(with_suffix(o.out, ".manifest.json"), "costvol-dump");
  const std::uint64_t seed = global.seed.value_or(0);
  manifest.set_seed(seed);
  manifest.config() = {{"image1", o.image1.string()}, {"image2", o.image2.string()},
                       {"stride", o.stride},          {"dilation", o.dilation},
                       {"x", o.x},                    {"y", o.y},
                       {"out", o.out.string()}};
  if (o.checkpoint) manifest.config()["checkpoint"] = o.checkpoint->string();
  return guarded(manifest, err, [&] {
    const CostVolumeSpec spec{o.stride, o.dilation};
    canonical_index(spec);
    manifest.add_input(o.image1);
    manifest.add_input(o.image2);
    if (o.checkpoint) manifest.add_input(*o.checkpoint);
    auto [first, second] = read_pair(o.image1, o.image2);
    const ImagePair pair = ImagePair::make(std::move(first), std::move(second));
    const ModelParams params = o.checkpoint ? load_params(*o.checkpoint) : ModelParams::initialize(seed);

    const auto t0 = Clock::now();
    const FeaturePyramid a = encode(pair.first, params);
    const FeaturePyramid b = encode(pair.second, params);
    PhaseTimes times;
    times.encode_ms = elapsed_ms(t0);
    const auto t1 = Clock::now();
    const Tensor& f1 = spec.stride == 2 ? a.f_s2 : a.f_s8;
    const Tensor& f2 = spec.stride == 2 ? b.f_s2 : b.f_s8;
    const Tensor vol = build_cost_volume(f1, f2, spec).data;
    times.cost_volume_ms = elapsed_ms(t1);
    times.total_ms = elapsed_ms(t0);
    manifest.set_timing(times);

    const std::size_t h = f1.dim(1);
    const std::size_t w = f1.dim(2);
    if (o.x >= w || o.y >= h) {
      throw ConfigError("position (" + std::to_string(o.x) + ", " + std::to_string(o.y) + ") outside the " +
                        std::to_string(w) + "x" + std::to_string(h) + " feature grid of " + spec.label());
    }
    const auto G = static_cast<std::size_t>(spec.groups);
    const std::size_t win = static_cast<std::size_t>(spec.window());
    const std::size_t cand = spec.candidates();
    Tensor slice({G, win, win, 1, 1});
    std::vector<double> score(cand, 0.0);
    for (std::size_t g = 0; g < G; ++g) {
      for (std::size_t i = 0; i < cand; ++i) {
        const double v = vol[((g * cand + i) * h + o.y) * w + o.x];
        slice[g * cand + i] = v;
        score[i] += v;
      }
    }
    write_volume_dump(slice, o.out);
    manifest.add_output(o.out);

    const auto table = displacement_table(spec);
    out << "spec " << spec.label() << ",k=" << spec.radius << " position x=" << o.x << " y=" << o.y << "\n";
    out << "displacements (u,v) px and summed similarity, v outer:\n";
    for (std::size_t j = 0; j < win; ++j) {
      for (std::size_t i = 0; i < win; ++i) {
        const auto& d = table[j * win + i];
        out << "(" << d.u << "," << d.v << ")=" << fmt("%.4f", score[j * win + i]) << (i + 1 < win ? " " : "\n");
      }
    }
    const std::size_t best = static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
    out << "argmax u=" << table[best].u << " v=" << table[best].v << " score=" << fmt("%.6f", score[best]) << "\n";
    manifest.extra()["argmax"] = {{"u", table[best].u}, {"v", table[best].v}, {"score", score[best]}};
  });
}

}  // namespace dcv::cli
