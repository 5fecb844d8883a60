#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dcv/autograd.hpp"
#include "dcv/tensor.hpp"

namespace dcv {

enum class ParamKind { conv_weight, bias, norm_gain, norm_shift };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
  std::size_t fan_in = 1;
};

/// Layout helpers used by the modules to declare their parameters.
void add_conv_params(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t out, std::size_t in,
                     const Shape& kernel, bool with_bias = true);
/// Transposed conv weights are [in, out, k...].
void add_conv_transpose_params(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t in,
                               std::size_t out, const Shape& kernel);
void add_norm_params(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t channels);

/// Every learnable tensor of the network, in a fixed order.
const std::vector<ParamSpec>& model_layout();

/// Named learnable weights of the encoder, 3D U-Net, fusion net and
/// upsample heads.
class ModelParams {
 public:
  ModelParams() = default;

  /// Kaiming fan-in normal weights, zero biases, unit norm gains.
  static ModelParams initialize(std::uint64_t seed);

  bool contains(const std::string& name) const { return tensors_.contains(name); }
  /// Throws ConfigError naming the missing parameter.
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  void set(const std::string& name, Tensor value);

  std::map<std::string, Tensor>& tensors() noexcept { return tensors_; }
  const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }
  std::size_t parameter_count() const;

  /// Every layout name present with the expected shape; throws ConfigError otherwise.
  void validate() const;

  bool operator==(const ModelParams&) const = default;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Binds a parameter onto a tape (shared across calls with the same name).
Var bind_param(Tape& tape, const ModelParams& params, const std::string& name);
/// Weight + bias pair named prefix.weight / prefix.bias.
struct ConvVars {
  Var weight;
  Var bias;
};
ConvVars bind_conv(Tape& tape, const ModelParams& params, const std::string& prefix);
/// Conv without a bias term: the bias is a zero constant.
ConvVars bind_conv_nobias(Tape& tape, const ModelParams& params, const std::string& prefix, std::size_t out_channels);

/// Checkpoint archive: "DCVW", u32 version, u32 count, then per entry
/// u32 name length, UTF-8 name, u32 rank, u32 extents, f64 little-endian data.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
/// Loads and validates against model_layout(); throws FormatError / ConfigError.
ModelParams load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace dcv
