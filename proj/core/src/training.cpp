#include "dcv/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "dcv/decoder.hpp"
#include "dcv/errors.hpp"
#include "dcv/metrics.hpp"

namespace dcv {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size() || !std::isfinite(v)) {
    throw ConfigError("config key '" + key + "': '" + value + "' is not a number");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  if (value.empty() || !std::all_of(value.begin(), value.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw ConfigError("config key '" + key + "': '" + value + "' is not a non-negative integer");
  }
  try {
    return std::stoull(value);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + value + "' is out of range");
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be > 0");
  };
  auto probability = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
  };
  positive(peak_lr, "peak_lr");
  if (!(warmup > 0.0 && warmup < 1.0)) throw ConfigError("warmup must lie in (0, 1)");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  positive(clip_norm, "clip_norm");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in (0, 1)");
  positive(adam_eps, "adam_eps");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  positive(start_div, "start_div");
  positive(end_div, "end_div");
  probability(hflip_prob, "hflip_prob");
  probability(vflip_prob, "vflip_prob");
  if (crop_height % 8 != 0 || crop_width % 8 != 0) throw ConfigError("crop size must be divisible by 8");
  if (pairs < 1) throw ConfigError("pairs must be >= 1");
  if (image_size < 8 || image_size % 8 != 0) throw ConfigError("image_size must be a positive multiple of 8");
  if (!(max_translation >= 0.0 && max_translation <= kMaxSyntheticMagnitude)) {
    throw ConfigError("max_translation must lie in [0, 672]");
  }
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  const std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters = {
      {"peak_lr", [&](auto& k, auto& v) { c.peak_lr = parse_double(k, v); }},
      {"warmup", [&](auto& k, auto& v) { c.warmup = parse_double(k, v); }},
      {"steps", [&](auto& k, auto& v) { c.steps = parse_uint(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { c.batch_size = parse_uint(k, v); }},
      {"clip_norm", [&](auto& k, auto& v) { c.clip_norm = parse_double(k, v); }},
      {"beta1", [&](auto& k, auto& v) { c.beta1 = parse_double(k, v); }},
      {"beta2", [&](auto& k, auto& v) { c.beta2 = parse_double(k, v); }},
      {"adam_eps", [&](auto& k, auto& v) { c.adam_eps = parse_double(k, v); }},
      {"weight_decay", [&](auto& k, auto& v) { c.weight_decay = parse_double(k, v); }},
      {"start_div", [&](auto& k, auto& v) { c.start_div = parse_double(k, v); }},
      {"end_div", [&](auto& k, auto& v) { c.end_div = parse_double(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = parse_uint(k, v); }},
      {"crop_height", [&](auto& k, auto& v) { c.crop_height = parse_uint(k, v); }},
      {"crop_width", [&](auto& k, auto& v) { c.crop_width = parse_uint(k, v); }},
      {"hflip_prob", [&](auto& k, auto& v) { c.hflip_prob = parse_double(k, v); }},
      {"vflip_prob", [&](auto& k, auto& v) { c.vflip_prob = parse_double(k, v); }},
      {"pairs", [&](auto& k, auto& v) { c.pairs = parse_uint(k, v); }},
      {"image_size", [&](auto& k, auto& v) { c.image_size = parse_uint(k, v); }},
      {"max_translation", [&](auto& k, auto& v) { c.max_translation = parse_double(k, v); }},
  };
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> unknown;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) {
      unknown.push_back(key);
      continue;
    }
    it->second(key, value);
  }
  if (!unknown.empty()) {
    std::string msg = "unknown config key(s):";
    for (const auto& k : unknown) msg += " '" + k + "'";
    throw ConfigError(msg);
  }
  c.validate();
  return c;
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"peak_lr", fmt(peak_lr)},
      {"warmup", fmt(warmup)},
      {"steps", std::to_string(steps)},
      {"batch_size", std::to_string(batch_size)},
      {"clip_norm", fmt(clip_norm)},
      {"beta1", fmt(beta1)},
      {"beta2", fmt(beta2)},
      {"adam_eps", fmt(adam_eps)},
      {"weight_decay", fmt(weight_decay)},
      {"start_div", fmt(start_div)},
      {"end_div", fmt(end_div)},
      {"seed", std::to_string(seed)},
      {"crop_height", std::to_string(crop_height)},
      {"crop_width", std::to_string(crop_width)},
      {"hflip_prob", fmt(hflip_prob)},
      {"vflip_prob", fmt(vflip_prob)},
      {"pairs", std::to_string(pairs)},
      {"image_size", std::to_string(image_size)},
      {"max_translation", fmt(max_translation)},
  };
}

double l1_loss(const Tensor& pred, const FlowField& gt) {
  if (!pred.same_shape(gt.data)) {
    throw ShapeError("l1_loss: prediction " + shape_string(pred.shape()) + " vs ground truth " +
                     shape_string(gt.data.shape()));
  }
  const std::size_t n = gt.height() * gt.width();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < n; ++p) {
    if (gt.valid && (*gt.valid)[p] <= 0.0) continue;
    total += std::abs(pred[p] - gt.data[p]) + std::abs(pred[n + p] - gt.data[n + p]);
    count += 2;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

Var l1_loss(const Var& pred, const FlowField& gt) {
  const double value = l1_loss(pred.value(), gt);
  std::shared_ptr<const FlowField> target = std::make_shared<FlowField>(gt);
  return pred.tape().record(Tensor::scalar(value), {pred}, [target](detail::Node& node) {
    const Tensor& p = node.inputs[0]->value;
    const std::size_t n = target->height() * target->width();
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) count += (!target->valid || (*target->valid)[i] > 0.0) ? 2 : 0;
    Tensor g(p.shape());
    if (count > 0) {
      const double s = node.grad[0] / static_cast<double>(count);
      for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
          if (target->valid && (*target->valid)[i] <= 0.0) continue;
          const double d = p[c * n + i] - target->data[c * n + i];
          g[c * n + i] = d > 0.0 ? s : (d < 0.0 ? -s : 0.0);
        }
      }
    }
    node.inputs[0]->accumulate(std::move(g));
  });
}

double onecycle_lr(std::size_t step, const TrainConfig& config) {
  if (config.steps < 1) throw ConfigError("onecycle_lr: total steps must be >= 1");
  if (step >= config.steps) {
    throw ConfigError("onecycle_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(config.steps) +
                      ")");
  }
  const double peak = config.peak_lr;
  if (config.steps == 1) return peak;
  const std::size_t last = config.steps - 1;
  const auto rounded = static_cast<std::size_t>(std::llround(config.warmup * static_cast<double>(last)));
  const std::size_t peak_step = std::min(last, std::max<std::size_t>(1, rounded));
  const double start = peak / config.start_div;
  const double end = peak / config.end_div;
  if (step <= peak_step) {
    return start + (peak - start) * static_cast<double>(step) / static_cast<double>(peak_step);
  }
  return peak + (end - peak) * static_cast<double>(step - peak_step) / static_cast<double>(last - peak_step);
}

bool decays(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return !(ends_with(".bias") || ends_with(".gain") || ends_with(".shift"));
}

void adamw_step(ModelParams& params, const GradMap& grads, AdamState& state, double lr, const TrainConfig& config) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw ConfigError("adamw_step: gradient for unknown parameter '" + name + "'");
    if (!g.same_shape(params.get(name))) {
      throw ShapeError("adamw_step: gradient '" + name + "' has shape " + shape_string(g.shape()) + ", parameter " +
                       shape_string(params.get(name).shape()));
    }
  }
  for (const auto& [name, p] : params.tensors()) {
    if (!grads.contains(name)) throw ConfigError("adamw_step: no gradient for parameter '" + name + "'");
  }
  ++state.step;
  const double b1 = config.beta1;
  const double b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, p] : params.tensors()) {
    const Tensor& g = grads.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, p.shape());
    auto [vit, v_new] = state.v.try_emplace(name, p.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    const double decay = decays(name) ? 1.0 - lr * config.weight_decay : 1.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] = p[i] * decay - lr * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
    apply_storage_precision(p);
  }
}

double global_norm(const GradMap& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double x : g.data()) sq += x * x;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(GradMap& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads) g.scale_(s);
  }
  return norm;
}

namespace {

Tensor crop_flip(const Tensor& t, std::size_t y0, std::size_t x0, std::size_t ch, std::size_t cw, bool hflip,
                 bool vflip) {
  const std::size_t c = t.dim(0);
  const std::size_t h = t.dim(1);
  const std::size_t w = t.dim(2);
  Tensor out({c, ch, cw});
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < ch; ++y) {
      const std::size_t sy = y0 + (vflip ? ch - 1 - y : y);
      for (std::size_t x = 0; x < cw; ++x) {
        const std::size_t sx = x0 + (hflip ? cw - 1 - x : x);
        out[(k * ch + y) * cw + x] = t[(k * h + sy) * w + sx];
      }
    }
  }
  return out;
}

}  // namespace

TrainSample augment(const TrainSample& sample, const TrainConfig& config, std::mt19937_64& rng) {
  const std::size_t h = sample.pair.height();
  const std::size_t w = sample.pair.width();
  const std::size_t ch = config.crop_height == 0 ? h : config.crop_height;
  const std::size_t cw = config.crop_width == 0 ? w : config.crop_width;
  if (ch > h || cw > w || ch % 8 != 0 || cw % 8 != 0) {
    throw ConfigError("augment: crop " + std::to_string(ch) + "x" + std::to_string(cw) + " invalid for image " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  std::uniform_int_distribution<std::size_t> oy(0, h - ch);
  std::uniform_int_distribution<std::size_t> ox(0, w - cw);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const std::size_t y0 = oy(rng);
  const std::size_t x0 = ox(rng);
  const bool hflip = coin(rng) < config.hflip_prob;
  const bool vflip = coin(rng) < config.vflip_prob;
  Tensor flow = crop_flip(sample.flow.data, y0, x0, ch, cw, hflip, vflip);
  const std::size_t n = ch * cw;
  if (hflip) std::transform(flow.ptr(), flow.ptr() + n, flow.ptr(), [](double u) { return -u; });
  if (vflip) std::transform(flow.ptr() + n, flow.ptr() + 2 * n, flow.ptr() + n, [](double v) { return -v; });
  std::optional<Tensor> valid;
  if (sample.flow.valid) {
    valid = crop_flip(sample.flow.valid->reshaped({1, h, w}), y0, x0, ch, cw, hflip, vflip).reshaped({ch, cw});
  }
  return TrainSample{
      ImagePair::make(crop_flip(sample.pair.first, y0, x0, ch, cw, hflip, vflip),
                      crop_flip(sample.pair.second, y0, x0, ch, cw, hflip, vflip)),
      FlowField::make(std::move(flow), std::move(valid)),
  };
}

std::vector<TrainSample> translation_dataset(std::size_t count, std::size_t size, double max_translation,
                                             std::uint64_t seed) {
  std::vector<TrainSample> out;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticSpec spec;
    spec.kind = MotionKind::translation;
    spec.magnitude = max_translation;
    spec.height = size;
    spec.width = size;
    spec.seed = rng();
    SyntheticSample s = synthetic_pair(spec);
    out.push_back({std::move(s.pair), std::move(s.flow)});
  }
  return out;
}

std::string format_step(const StepRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "step=%zu lr=%.6e loss=%.6e grad_norm=%.6e wall_ms=%.3f", r.step, r.lr, r.loss,
                r.grad_norm, r.wall_ms);
  return buf;
}

double mean_epe(const std::vector<TrainSample>& dataset, const ModelParams& params) {
  if (dataset.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : dataset) {
    Prediction p = predict(s.pair, params);
    total += epe(FlowField::make(std::move(p.fusion.flow_full)), s.flow).mean;
  }
  return total / static_cast<double>(dataset.size());
}

TrainResult train_toy(const std::vector<TrainSample>& dataset, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (dataset.empty()) throw ConfigError("train_toy: dataset is empty");
  TrainResult result;
  result.params = ModelParams::initialize(config.seed);
  for (auto& [name, t] : result.params.tensors()) apply_storage_precision(t);
  AdamState state;
  std::mt19937_64 rng(config.seed ^ 0x5eed5eedULL);
  std::vector<std::size_t> order(dataset.size());
  std::size_t cursor = order.size();
  using Clock = std::chrono::steady_clock;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto t0 = Clock::now();
    GradMap total;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const TrainSample sample = augment(dataset[order[cursor++]], config, rng);
      Tape tape;
      ForwardVars fv = forward(tape, sample.pair, result.params);
      Var loss = l1_loss(fv.flow_full, sample.flow);
      loss_sum += loss.value()[0];
      GradMap g = tape.backward(loss);
      for (auto& [name, t] : g) {
        auto [it, inserted] = total.try_emplace(name, std::move(t));
        if (!inserted) it->second.add_(t);
      }
    }
    const double inv = 1.0 / static_cast<double>(config.batch_size);
    for (auto& [name, t] : total) t.scale_(inv);
    const double loss = loss_sum * inv;
    const double norm = clip_grad_norm(total, config.clip_norm);
    if (!std::isfinite(loss) || !std::isfinite(norm)) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": loss " + fmt(loss) +
                           ", gradient norm " + fmt(norm));
    }
    const double lr = onecycle_lr(step, config);
    adamw_step(result.params, total, state, lr, config);
    StepRecord rec{step, lr, loss, norm, std::chrono::duration<double, std::milli>(Clock::now() - t0).count()};
    result.log.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
  }
  result.final_epe = mean_epe(dataset, result.params);
  return result;
}

}  // namespace dcv
