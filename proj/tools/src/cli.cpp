#include <regex>

#include "CLI11.hpp"

#include "dcv/cli/commands.hpp"
#include "dcv/parallel.hpp"
#include "dcv/tensor.hpp"
#include "manifest.hpp"

namespace dcv::cli {

namespace {

std::array<std::size_t, 2> parse_size(const std::string& text) {
  static const std::regex pattern(R"((\d+)x(\d+))");
  std::smatch m;
  if (!std::regex_match(text, m, pattern)) throw CLI::ValidationError("--size", "expected WIDTHxHEIGHT, got " + text);
  const std::size_t w = std::stoul(m[1]);
  const std::size_t h = std::stoul(m[2]);
  if (w == 0 || h == 0) throw CLI::ValidationError("--size", "extents must be positive");
  return {w, h};
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dilated cost volume optical flow"};
  app.set_version_flag("--version", code_version());
  app.require_subcommand(1);

  GlobalOptions global;
  std::uint64_t seed = 0;
  std::string precision = "f64";
  app.add_option("--threads", global.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  app.add_option("--precision", precision, "Storage precision")
      ->check(CLI::IsMember({"f32", "f64"}));

  FlowOptions flow;
  auto* flow_cmd = app.add_subcommand("flow", "Estimate flow between two images");
  flow_cmd->add_option("image1", flow.image1, "First frame (PPM or PNG)")->required();
  flow_cmd->add_option("image2", flow.image2, "Second frame")->required();
  flow_cmd->add_option("--checkpoint", flow.checkpoint, "Model weights")->required();
  flow_cmd->add_option("--out", flow.out_prefix, "Output prefix")->required();
  flow_cmd->add_flag("--auto-pad", flow.auto_pad, "Reflect-pad to multiples of 8");

  TrainOptions train;
  std::filesystem::path config_path;
  auto* train_cmd = app.add_subcommand("train-toy", "Train on synthetic translations");
  auto* config_opt = train_cmd->add_option("--config", config_path, "key = value config file");
  train_cmd->add_option("--out-dir", train.out_dir, "Output directory")->required();

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score predicted flow against ground truth");
  eval_cmd->add_option("pred_dir", eval.pred_dir, "Predicted flow files")->required();
  eval_cmd->add_option("gt_dir", eval.gt_dir, "Ground-truth flow files")->required();
  eval_cmd->add_option("--format", eval.format, "flo or kitti")->check(CLI::IsMember({"flo", "kitti"}));
  eval_cmd->add_option("--out", eval.out, "Report file")->required();

  BenchOptions bench;
  std::vector<std::string> sizes;
  bool no_naive = false;
  bool no_forward = false;
  auto* bench_cmd = app.add_subcommand("bench", "Time cost volumes, conv3d and a full forward pass");
  bench_cmd->add_option("--size", sizes, "WIDTHxHEIGHT, repeatable (default 1024x436)");
  bench_cmd->add_option("--repeats", bench.repeats, "Timed repetitions")->check(CLI::PositiveNumber);
  bench_cmd->add_flag("--no-naive", no_naive, "Skip the naive cost volume");
  bench_cmd->add_flag("--no-forward", no_forward, "Skip the full forward pass");
  bench_cmd->add_option("--out", bench.out, "Report file")->required();

  CostvolOptions costvol;
  std::filesystem::path costvol_ckpt;
  auto* costvol_cmd = app.add_subcommand("costvol-dump", "Dump one cost volume slice");
  costvol_cmd->add_option("image1", costvol.image1, "First frame")->required();
  costvol_cmd->add_option("image2", costvol.image2, "Second frame")->required();
  auto* costvol_ckpt_opt = costvol_cmd->add_option("--checkpoint", costvol_ckpt, "Model weights (default: seeded init)");
  costvol_cmd->add_option("--stride", costvol.stride, "2 or 8");
  costvol_cmd->add_option("--dilation", costvol.dilation, "Dilation");
  costvol_cmd->add_option("--x", costvol.x, "Column on the feature grid");
  costvol_cmd->add_option("--y", costvol.y, "Row on the feature grid");
  costvol_cmd->add_option("--out", costvol.out, "Dump file")->required();

  try {
    app.parse(argc, argv);
    if (!sizes.empty()) {
      bench.sizes.clear();
      for (const auto& s : sizes) bench.sizes.push_back(parse_size(s));
    }
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << code_version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  if (*seed_opt) global.seed = seed;
  global.precision = precision == "f32" ? Precision::f32 : Precision::f64;
  set_num_threads(global.threads);
  set_storage_precision(global.precision);

  if (*flow_cmd) return cmd_flow(global, flow, out, err);
  if (*train_cmd) {
    if (*config_opt) train.config = config_path;
    return cmd_train_toy(global, train, out, err);
  }
  if (*eval_cmd) return cmd_eval(global, eval, out, err);
  if (*bench_cmd) {
    bench.naive = !no_naive;
    bench.forward = !no_forward;
    return cmd_bench(global, bench, out, err);
  }
  if (*costvol_cmd) {
    if (*costvol_ckpt_opt) costvol.checkpoint = costvol_ckpt;
    return cmd_costvol_dump(global, costvol, out, err);
  }
  return kExitUsage;
}

}  // namespace dcv::cli
