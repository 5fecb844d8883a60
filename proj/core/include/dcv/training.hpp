#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dcv/autograd.hpp"
#include "dcv/flow_io.hpp"
#include "dcv/model_params.hpp"
#include "dcv/synthetic.hpp"

namespace dcv {

struct TrainConfig {
  double peak_lr = 4e-4;
  double warmup = 0.05;
  std::size_t steps = 1500;
  std::size_t batch_size = 1;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-5;
  double start_div = 25.0;
  double end_div = 1e4;
  std::uint64_t seed = 0;
  /// 0 keeps the full extent.
  std::size_t crop_height = 0;
  std::size_t crop_width = 0;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  // Synthetic dataset used by train-toy.
  std::size_t pairs = 8;
  std::size_t image_size = 64;
  double max_translation = 16.0;

  void validate() const;
  /// key = value lines; '#' starts a comment. Unknown keys throw ConfigError.
  static TrainConfig parse(const std::string& text);
  std::map<std::string, std::string> to_map() const;
};

/// Mean |pred - gt| over valid pixels and both channels.
Var l1_loss(const Var& pred, const FlowField& gt);
double l1_loss(const Tensor& pred, const FlowField& gt);

double onecycle_lr(std::size_t step, const TrainConfig& config);

struct AdamState {
  std::size_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  bool operator==(const AdamState&) const = default;
};

/// Biases and normalization gains/shifts are not decayed.
bool decays(const std::string& param_name);

/// Decoupled weight decay, then the bias-corrected Adam update.
void adamw_step(ModelParams& params, const GradMap& grads, AdamState& state, double lr, const TrainConfig& config);

/// Scales every gradient by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
double clip_grad_norm(GradMap& grads, double max_norm);
double global_norm(const GradMap& grads);

struct TrainSample {
  ImagePair pair;
  FlowField flow;
};

/// Synchronized random crop and flips; flipping negates the matching flow channel.
TrainSample augment(const TrainSample& sample, const TrainConfig& config, std::mt19937_64& rng);

/// Constant-translation pairs with |t| <= max_translation.
std::vector<TrainSample> translation_dataset(std::size_t count, std::size_t size, double max_translation,
                                             std::uint64_t seed);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double grad_norm = 0;
  double wall_ms = 0;
};

std::string format_step(const StepRecord& record);

struct TrainResult {
  ModelParams params;
  std::vector<StepRecord> log;
  /// Mean EPE over the un-augmented dataset after training.
  double final_epe = 0.0;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
};

/// Deterministic per seed; throws NumericalError if the loss goes non-finite.
TrainResult train_toy(const std::vector<TrainSample>& dataset, const TrainConfig& config,
                      const TrainHooks& hooks = {});

double mean_epe(const std::vector<TrainSample>& dataset, const ModelParams& params);

}  // namespace dcv
