// Command line front end: train, evaluate, demo-swap, synth-data, ablate, config.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "fpanet/fpanet.hpp"

namespace fs = std::filesystem;
using namespace fpanet;

namespace {

TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  TrainConfig c = path.empty() ? TrainConfig{} : load_config(path);
  std::string text;
  for (const auto& kv : overrides) text += kv + "\n";
  c = parse_config(text, c);
  c.validate();
  return c;
}

void print_summary(const metrics::MetricsReport& rep) {
  for (const auto& [name, s] : rep.aggregate()) {
    std::cout << name << "\t" << fmt_metric(s.mean) << "\t(std " << fmt_metric(s.std) << ", n " << s.count << ")\n";
  }
  if (rep.fvd) std::cout << "fvd\t" << fmt_metric(*rep.fvd) << "\n";
  for (const auto& n : rep.non_comparable) std::cout << "note\t" << n << " uses a random backbone (non-comparable)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FPANet video demoireing: training, evaluation and tooling"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "only warnings and errors");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model from a key=value config");
  std::string train_cfg;
  std::vector<std::string> train_set;
  train_cmd->add_option("--config", train_cfg, "config file (defaults apply to missing keys)");
  train_cmd->add_option("--set", train_set, "override, e.g. --set optim.lr=5e-4 (repeatable)");

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a dataset split");
  EvalOptions eo;
  std::string metric_list;
  std::string eval_ckpt, eval_data, eval_out;
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "dataset root")->required();
  eval_cmd->add_option("--split", eo.split, "split directory")->capture_default_str();
  eval_cmd->add_flag("--single-frame", eo.single_frame, "feed the reference frame as all three inputs");
  eval_cmd->add_option("--metrics", metric_list, "comma list of psnr,ssim,lpips,fsim,fvd,y_psnr,hist_corr");
  eval_cmd->add_option("--out", eval_out, "report directory (default <ckpt dir>/eval_<split>)");
  eval_cmd->add_flag("!--no-edge-padding", eo.edge_padding, "skip the first and last frame of each sequence");
  eval_cmd->add_option("--lpips-weights", eo.lpips_weights, "checkpoint holding features.* backbone weights");
  eval_cmd->add_option("--backbone-seed", eo.backbone_seed, "seed of the random fallback backbones")->capture_default_str();

  // demo-swap
  auto* swap_cmd = app.add_subcommand("demo-swap", "swap Fourier amplitude and phase between two images");
  std::string swap_a, swap_b, swap_out;
  swap_cmd->add_option("a", swap_a, "first image (png)")->required();
  swap_cmd->add_option("b", swap_b, "second image (png)")->required();
  swap_cmd->add_option("out", swap_out, "output directory")->required();

  // synth-data
  auto* synth_cmd = app.add_subcommand("synth-data", "generate a synthetic moire benchmark");
  BenchmarkOptions bo;
  int test_n = 0;
  std::string synth_out = "data/synthetic";
  synth_cmd->add_option("--n", bo.n_sequences, "number of training sequences")->required();
  synth_cmd->add_option("--seed", bo.seed, "generator seed")->required();
  synth_cmd->add_option("--out", synth_out, "dataset root")->capture_default_str();
  synth_cmd->add_option("--frames", bo.frames_per_sequence, "frames per sequence")->capture_default_str();
  synth_cmd->add_option("--height", bo.height, "frame height")->capture_default_str();
  synth_cmd->add_option("--width", bo.width, "frame width")->capture_default_str();
  synth_cmd->add_option("--test-n", test_n, "sequences in the test split (seeded from seed+1)")->capture_default_str();

  // ablate
  auto* abl_cmd = app.add_subcommand("ablate", "train and evaluate one ablation variant");
  int abl_model = 6;
  std::string abl_cfg, abl_metrics = "psnr,ssim";
  std::vector<std::string> abl_set;
  abl_cmd->add_option("--model", abl_model, "variant 1..6")->required()->check(CLI::Range(1, 6));
  abl_cmd->add_option("--config", abl_cfg, "base config; outputs go to <run.output_dir>/model<id>");
  abl_cmd->add_option("--set", abl_set, "override (repeatable)");
  abl_cmd->add_option("--metrics", abl_metrics, "evaluation metrics")->capture_default_str();

  // config
  auto* cfg_cmd = app.add_subcommand("config", "print the documented default config");

  CLI11_PARSE(app, argc, argv);
  if (quiet) log::threshold() = log::Level::warn;

  try {
    if (*train_cmd) {
      const auto c = resolve_config(train_cfg, train_set);
      const auto s = train(c);
      std::cout << "checkpoint\t" << s.checkpoint.string() << "\n";
    } else if (*eval_cmd) {
      eo.checkpoint = eval_ckpt;
      eo.data_root = eval_data;
      if (!metric_list.empty()) eo.metrics = parse_metric_list(metric_list);
      eo.output_dir = eval_out.empty() ? fs::path(eval_ckpt).parent_path() / ("eval_" + eo.split) : fs::path(eval_out);
      const auto rep = evaluate(eo);
      print_summary(rep);
      std::cout << "report\t" << (eo.output_dir / "report.jsonl").string() << "\n";
    } else if (*swap_cmd) {
      fs::create_directories(swap_out);
      demo_swap(read_png(swap_a), read_png(swap_b), swap_out);
      std::ofstream(fs::path(swap_out) / "swap_config.txt") << "a = " << swap_a << "\nb = " << swap_b << "\n";
    } else if (*synth_cmd) {
      bo.split = "train";
      make_synthetic_benchmark(synth_out, bo);
      if (test_n > 0) {
        BenchmarkOptions t = bo;
        t.n_sequences = test_n;
        t.seed = bo.seed + 1;
        t.split = "test";
        make_synthetic_benchmark(synth_out, t);
      }
      std::ofstream(fs::path(synth_out) / "synth_config.txt")
          << "n = " << bo.n_sequences << "\nseed = " << bo.seed << "\nframes = " << bo.frames_per_sequence
          << "\nheight = " << bo.height << "\nwidth = " << bo.width << "\ntest_n = " << test_n << "\n";
      std::cout << "dataset\t" << synth_out << "\n";
    } else if (*abl_cmd) {
      const auto base = resolve_config(abl_cfg, abl_set);
      const auto run = ablate(base, abl_model, parse_metric_list(abl_metrics));
      std::cout << "model\t" << run.model_id << "\n";
      print_summary(run.report);
    } else if (*cfg_cmd) {
      std::cout << to_text(TrainConfig{}, true);
    }
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
