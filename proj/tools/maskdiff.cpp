// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: training, inference, evaluation, ablation,
// robustness sweeps and synthetic data export.

#include "maskdiff/harness.hpp"
#include "maskdiff/image_io.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace maskdiff;

namespace {

void log_line(const std::string& s) { std::cerr << s << std::endl; }

// "synthetic" selects the generated held-out split of `config`.
Dataset resolve_eval_data(const std::string& spec, const TrainConfig& config) {
  if (spec == "synthetic") {
    DataConfig d = config.data;
    d.dir.clear();
    return load_splits(d).heldout;
  }
  std::vector<std::string> unpaired;
  Dataset data = load_folder(spec, &unpaired);
  for (const auto& f : unpaired) log_line("warning: no partner for " + f + ", skipped");
  return data;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, bool resume) {
  const TrainConfig config = load_train_config(config_path);
  const DatasetSplits splits = load_splits(config.data);
  log_line("config fingerprint " + config_fingerprint(config) + ", " + std::to_string(splits.train.size()) +
           " training images");
  std::unique_ptr<MaskDiffusionModel<float>> model;
  long start = 0;
  if (resume && fs::exists(fs::path(out_dir) / "weights.bin")) {
    Checkpoint<float> ck = load_checkpoint<float>(out_dir);
    model = std::move(ck.model);
    start = ck.step;
  } else {
    model = std::make_unique<MaskDiffusionModel<float>>(config.effective_model(), config.seed);
  }
  Trainer<float> trainer(config, *model, planned_steps(config, splits.train.size()));
  if (start > 0) {
    load_optimizer_state(out_dir, trainer.optimizer());
    trainer.set_step(start);
    log_line("resumed at step " + std::to_string(start));
  }
  const auto t0 = std::chrono::steady_clock::now();
  train(trainer, splits.train, [&](const StepStats& s) {
    if ((s.step + 1) % 10 == 0 || s.step + 1 == trainer.total_steps()) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "step " << s.step + 1 << "/" << trainer.total_steps() << " loss " << s.loss << " lr " << s.lr
                << " grad_norm " << s.grad_norm << " (" << secs << " s)" << std::endl;
    }
    if ((s.step + 1) % 200 == 0) save_checkpoint(out_dir, *model, config, s.step + 1, &trainer.optimizer());
  });
  save_checkpoint(out_dir, *model, config, trainer.step(), &trainer.optimizer());
  log_line("saved checkpoint to " + out_dir);
  if (!splits.heldout.empty()) std::cout << format_report(evaluate(*model, splits.heldout, config, config.seed));
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image_path, int ensemble, bool trace, const std::string& out,
              std::uint64_t seed) {
  Checkpoint<float> ck = load_checkpoint<float>(ckpt);
  const Tensor<float> image = to_tensor(read_png(image_path, 3));
  const DiffusionSchedule sched(ck.config.T_train, ck.config.snr_shift);
  SampleOptions opt = sample_options(ck.config, seed);
  Tensor<float> prob;
  if (trace) {
    const SampleResult<float> r = sample(*ck.model, image, sched, opt);
    const fs::path base = fs::path(out).replace_extension();
    render_trace(r.trace, base.string() + "_trace.png");
    write_trace_csv(r.trace, base.string() + "_trace.csv");
    prob = ensemble > 1 ? sample_ensemble(*ck.model, image, sched, opt, ensemble) : r.prob_map;
  } else {
    prob = sample_ensemble(*ck.model, image, sched, opt, ensemble);
  }
  write_png(out, to_image(prob));
  log_line("wrote " + out);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_spec, const std::string& csv, std::uint64_t seed) {
  Checkpoint<float> ck = load_checkpoint<float>(ckpt);
  const Dataset data = resolve_eval_data(data_spec, ck.config);
  const EvalReport report = evaluate(*ck.model, data, ck.config, seed);
  std::cout << format_report(report);
  if (!csv.empty()) write_report_csv(csv, report);
  return 0;
}

int cmd_ablate(const std::string& data_spec, const std::string& config_path, long steps, const std::string& out_dir) {
  TrainConfig base = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
  if (steps > 0) base.max_steps = steps;
  DatasetSplits splits;
  if (data_spec == "synthetic") {
    base.data.dir.clear();
  } else {
    base.data.dir = data_spec;
  }
  splits = load_splits(base.data);
  if (splits.heldout.empty()) throw std::runtime_error("ablate: the held-out split is empty (set data.eval_n)");
  AblationOptions opt;
  opt.checkpoint_root = out_dir;
  opt.eval_seed = base.seed;
  opt.log = log_line;
  const auto rows = run_ablation(splits.train, splits.heldout, base, opt);
  std::cout << format_ablation(rows);
  write_ablation_csv(fs::path(out_dir) / "ablation.csv", rows);
  return 0;
}

int cmd_attack(const std::string& ckpt, const std::string& data_spec, const std::string& grid_spec,
               const std::string& out_dir, std::uint64_t seed) {
  Checkpoint<float> ck = load_checkpoint<float>(ckpt);
  const Dataset data = resolve_eval_data(data_spec, ck.config);
  const auto grid = grid_spec == "default" ? default_attack_grid(seed) : read_attack_grid(grid_spec, seed);
  const RobustnessReport report = run_robustness(*ck.model, data, ck.config, grid, seed);
  write_robustness_csv(fs::path(out_dir) / "robustness.csv", report);
  render_robustness_plot(fs::path(out_dir) / "robustness.png", report);
  std::cout << "# config_fingerprint: " << report.fingerprint << "\n# auc_aggregation: " << kAucAggregation << "\n";
  std::cout << "clean " << report.clean.mean << "\n";
  for (const auto& p : report.points) {
    std::cout << to_string(p.attack.kind) << " " << p.attack.strength << " " << p.summary.mean << "\n";
  }
  return 0;
}

int cmd_gen_data(int n, int size, std::uint64_t seed, const std::string& out) {
  export_folder(generate_synthetic(n, size, seed), out);
  log_line("wrote " + std::to_string(n) + " samples to " + out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based tampered-region localisation"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "checkpoint";
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  train_cmd->add_option("--config", config_path, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out_dir, "Checkpoint directory");
  train_cmd->add_flag("--resume", resume, "Continue from the checkpoint in --out");

  std::string ckpt, image_path, infer_out = "prob.png";
  int ensemble = 1;
  bool trace = false;
  std::uint64_t seed = 0;
  auto* infer_cmd = app.add_subcommand("infer", "Predict a tamper-probability map for one PNG");
  infer_cmd->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  infer_cmd->add_option("--image", image_path, "Input PNG")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--ensemble", ensemble, "Number of averaged samples")->check(CLI::PositiveNumber);
  infer_cmd->add_flag("--trace", trace, "Also write the sampling trace grid and CSV");
  infer_cmd->add_option("--out", infer_out, "Output PNG");
  infer_cmd->add_option("--seed", seed, "Sampling seed");

  std::string data_spec, csv;
  auto* eval_cmd = app.add_subcommand("eval", "Pixel AUC on a folder dataset or 'synthetic'");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", data_spec, "Folder with images/ and masks/, or 'synthetic'")->required();
  eval_cmd->add_option("--csv", csv, "Per-image CSV output");
  eval_cmd->add_option("--seed", seed, "Sampling seed");

  long steps = 0;
  std::string ablate_out = "ablation";
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and score the DMFE x edge-supervision grid");
  ablate_cmd->add_option("--data", data_spec, "Folder dataset or 'synthetic'")->required();
  ablate_cmd->add_option("--config", config_path, "Base training config");
  ablate_cmd->add_option("--steps", steps, "Training steps per cell");
  ablate_cmd->add_option("--out", ablate_out, "Directory for per-cell checkpoints and the CSV");

  std::string grid_spec, attack_out = "robustness";
  auto* attack_cmd = app.add_subcommand("attack", "Robustness curves under image attacks");
  attack_cmd->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  attack_cmd->add_option("--data", data_spec, "Folder dataset or 'synthetic'")->required();
  attack_cmd->add_option("--grid", grid_spec, "Attack grid file (kind,strength per line) or 'default'")->required();
  attack_cmd->add_option("--out", attack_out, "Output directory for CSV and plot");
  attack_cmd->add_option("--seed", seed, "Attack and sampling seed");

  int n = 0, size = 64;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset as images/ and masks/ PNGs");
  gen_cmd->add_option("--n", n, "Number of samples")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", size, "Image side (multiple of 32)")->required();
  gen_cmd->add_option("--seed", seed, "Generator seed")->required();
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(config_path, out_dir, resume);
    if (*infer_cmd) return cmd_infer(ckpt, image_path, ensemble, trace, infer_out, seed);
    if (*eval_cmd) return cmd_eval(ckpt, data_spec, csv, seed);
    if (*ablate_cmd) return cmd_ablate(data_spec, config_path, steps, ablate_out);
    if (*attack_cmd) return cmd_attack(ckpt, data_spec, grid_spec, attack_out, seed);
    if (*gen_cmd) return cmd_gen_data(n, size, seed, gen_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
