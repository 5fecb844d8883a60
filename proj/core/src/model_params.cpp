#include "dcv/model_params.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "dcv/decoder.hpp"
#include "dcv/detail/binary_io.hpp"
#include "dcv/encoder.hpp"
#include "dcv/errors.hpp"

namespace dcv {

void add_conv_params(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t out, std::size_t in,
                     const Shape& kernel, bool with_bias) {
  Shape w{out, in};
  w.insert(w.end(), kernel.begin(), kernel.end());
  layout.push_back({prefix + ".weight", w, ParamKind::conv_weight, in * shape_numel(kernel)});
  if (with_bias) layout.push_back({prefix + ".bias", {out}, ParamKind::bias, 1});
}

void add_conv_transpose_params(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t in,
                               std::size_t out, const Shape& kernel) {
  Shape w{in, out};
  w.insert(w.end(), kernel.begin(), kernel.end());
  layout.push_back({prefix + ".weight", w, ParamKind::conv_weight, in * shape_numel(kernel)});
  layout.push_back({prefix + ".bias", {out}, ParamKind::bias, 1});
}

void add_norm_params(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t channels) {
  layout.push_back({prefix + ".gain", {channels}, ParamKind::norm_gain, 1});
  layout.push_back({prefix + ".shift", {channels}, ParamKind::norm_shift, 1});
}

const std::vector<ParamSpec>& model_layout() {
  static const std::vector<ParamSpec> layout = [] {
    std::vector<ParamSpec> l;
    append_encoder_layout(l);
    append_decoder_layout(l);
    return l;
  }();
  return layout;
}

ModelParams ModelParams::initialize(std::uint64_t seed) {
  ModelParams p;
  std::mt19937_64 rng(seed);
  for (const auto& spec : model_layout()) {
    switch (spec.kind) {
      case ParamKind::conv_weight:
        p.tensors_.emplace(spec.name,
                           Tensor::normal(spec.shape, std::sqrt(2.0 / static_cast<double>(spec.fan_in)), rng));
        break;
      case ParamKind::bias:
      case ParamKind::norm_shift:
        p.tensors_.emplace(spec.name, Tensor(spec.shape, 0.0));
        break;
      case ParamKind::norm_gain:
        p.tensors_.emplace(spec.name, Tensor(spec.shape, 1.0));
        break;
    }
  }
  return p;
}

const Tensor& ModelParams::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("model parameters not initialized: missing '" + name + "'");
  return it->second;
}

Tensor& ModelParams::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("model parameters not initialized: missing '" + name + "'");
  return it->second;
}

void ModelParams::set(const std::string& name, Tensor value) { tensors_.insert_or_assign(name, std::move(value)); }

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.size();
  return n;
}

void ModelParams::validate() const {
  const auto& layout = model_layout();
  for (const auto& [name, t] : tensors_) {
    const bool known = std::any_of(layout.begin(), layout.end(), [&](const ParamSpec& s) { return s.name == name; });
    if (!known) throw ConfigError("unexpected parameter '" + name + "'");
  }
  for (const auto& spec : model_layout()) {
    auto it = tensors_.find(spec.name);
    if (it == tensors_.end()) throw ConfigError("missing parameter '" + spec.name + "'");
    if (it->second.shape() != spec.shape) {
      throw ConfigError("parameter '" + spec.name + "' has shape " + shape_string(it->second.shape()) +
                        ", expected " + shape_string(spec.shape));
    }
  }
}

Var bind_param(Tape& tape, const ModelParams& params, const std::string& name) {
  return tape.parameter(name, params.get(name));
}

ConvVars bind_conv(Tape& tape, const ModelParams& params, const std::string& prefix) {
  return {bind_param(tape, params, prefix + ".weight"), bind_param(tape, params, prefix + ".bias")};
}

ConvVars bind_conv_nobias(Tape& tape, const ModelParams& params, const std::string& prefix,
                          std::size_t out_channels) {
  return {bind_param(tape, params, prefix + ".weight"), tape.constant(Tensor({out_channels}))};
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
  os.write("DCVW", 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.tensors().size()));
  for (const auto& [name, t] : params.tensors()) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    for (double v : t.data()) detail::write_le<double>(os, v);
  }
  if (!os) throw FormatError("failed writing checkpoint: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "DCVW") {
    throw FormatError("not a DCVW checkpoint: " + path.string());
  }
  const auto version = detail::read_le<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::read_le<std::uint32_t>(is, "checkpoint entry count");
  ModelParams params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_le<std::uint32_t>(is, "parameter name length");
    if (len == 0 || len > 4096) throw FormatError("implausible parameter name length " + std::to_string(len));
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated parameter name");
    const auto rank = detail::read_le<std::uint32_t>(is, "parameter rank");
    if (rank == 0 || rank > 8) throw FormatError("implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& e : shape) {
      e = detail::read_le<std::uint32_t>(is, "parameter extent");
      if (e == 0) throw FormatError("zero extent for '" + name + "'");
    }
    Tensor t(shape);
    for (auto& v : t.data()) v = detail::read_le<double>(is, "parameter data");
    params.set(name, std::move(t));
  }
  params.validate();
  return params;
}

}  // namespace dcv
