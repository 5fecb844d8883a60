#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dcv/decoder.hpp"
#include "dcv/tensor.hpp"

namespace dcv::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

struct GlobalOptions {
  /// 0 means hardware concurrency.
  int threads = 0;
  std::optional<std::uint64_t> seed;
  Precision precision = Precision::f64;
};

struct FlowOptions {
  std::filesystem::path image1;
  std::filesystem::path image2;
  std::filesystem::path checkpoint;
  std::filesystem::path out_prefix;
  bool auto_pad = false;
};

struct TrainOptions {
  std::optional<std::filesystem::path> config;
  std::filesystem::path out_dir;
};

struct EvalOptions {
  std::filesystem::path pred_dir;
  std::filesystem::path gt_dir;
  /// "flo", "kitti", or empty to infer from a single shared extension.
  std::string format;
  std::filesystem::path out;
};

struct BenchOptions {
  /// (width, height) pairs; sizes not divisible by 8 are padded up.
  std::vector<std::array<std::size_t, 2>> sizes{{1024, 436}};
  std::size_t repeats = 3;
  bool naive = true;
  bool forward = true;
  std::filesystem::path out;
};

struct CostvolOptions {
  std::filesystem::path image1;
  std::filesystem::path image2;
  std::optional<std::filesystem::path> checkpoint;
  int stride = 8;
  int dilation = 1;
  /// Position on the chosen stride's feature grid.
  std::size_t x = 0;
  std::size_t y = 0;
  std::filesystem::path out;
};

struct TimingStats {
  double median_ms = 0;
  double min_ms = 0;
};

struct BenchRow {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t padded_width = 0;
  std::size_t padded_height = 0;
  TimingStats cost_volume;
  std::optional<TimingStats> cost_volume_naive;
  TimingStats conv3d;
  std::optional<TimingStats> forward;
  /// Medians of each phase over the forward repeats.
  PhaseTimes phases;
};

struct BenchReport {
  std::size_t repeats = 0;
  int threads = 0;
  std::string machine;
  std::vector<BenchRow> rows;
};

BenchReport run_bench(const BenchOptions& options, std::uint64_t seed);
/// key=value lines, one block per size.
std::string format_bench(const BenchReport& report);

/// Reflect-pads the last two axes up to multiples of 8.
Tensor reflect_pad8(const Tensor& image);

std::string sha256_file(const std::filesystem::path& path);

int cmd_flow(const GlobalOptions& global, const FlowOptions& options, std::ostream& out, std::ostream& err);
int cmd_train_toy(const GlobalOptions& global, const TrainOptions& options, std::ostream& out, std::ostream& err);
int cmd_eval(const GlobalOptions& global, const EvalOptions& options, std::ostream& out, std::ostream& err);
int cmd_bench(const GlobalOptions& global, const BenchOptions& options, std::ostream& out, std::ostream& err);
int cmd_costvol_dump(const GlobalOptions& global, const CostvolOptions& options, std::ostream& out,
                     std::ostream& err);

/// Parses argv and dispatches to a subcommand.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace dcv::cli
