// Experiment runner: trains desk-scale residual networks and measures the
// per-block refinement statistics (cosine loss, l2 ratio, block dropping,
// borderline tracking, unrolling, weight sharing).

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "resprobe/experiment.hpp"

namespace fs = std::filesystem;
using namespace resprobe;

namespace {

// default output root: --out flag, else RESPROBE_OUT, else the config value
std::string resolve_out(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("RESPROBE_OUT")) return env;
  return "";
}

runner::ExperimentConfig load_config_for_checkpoint(const std::string& config_path,
                                                    const std::string& checkpoint_path) {
  if (!config_path.empty()) return runner::ExperimentConfig::from_file(config_path);
  fs::path beside = fs::path(checkpoint_path).parent_path() / "config.json";
  if (fs::exists(beside)) return runner::ExperimentConfig::from_file(beside.string());
  throw std::runtime_error("no --config given and no config.json beside the checkpoint");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"resprobe: residual network refinement probes"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, split = "val", out_dir;
  uint64_t seed = 1;

  auto* train_cmd = app.add_subcommand("train", "train a model from a config");
  train_cmd->add_option("--config", config_path, "experiment config (json)")->required();
  train_cmd->add_option("--out", out_dir, "output root (default: $RESPROBE_OUT or config)");
  train_cmd->add_option("--seed", seed, "override the training seed");
  bool seed_given = false;
  train_cmd->callback([&] { seed_given = train_cmd->count("--seed") > 0; });

  auto* share_cmd = app.add_subcommand("share-train", "train with weight-shared stages");
  share_cmd->add_option("--config", config_path, "experiment config (json)")->required();
  share_cmd->add_option("--out", out_dir, "output root");
  share_cmd->add_option("--seed", seed, "override the training seed");

  auto* probe_cmd = app.add_subcommand("probe", "run probes on a checkpoint");
  probe_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  probe_cmd->add_option("--config", config_path, "config (default: config.json beside checkpoint)");
  probe_cmd->add_option("--split", split, "train|val|test");
  probe_cmd->add_option("--out", out_dir, "output directory");

  auto* drop_cmd = app.add_subcommand("drop-scan", "accuracy with each block removed");
  drop_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  drop_cmd->add_option("--config", config_path, "config (default: beside checkpoint)");
  drop_cmd->add_option("--split", split, "train|val|test");
  drop_cmd->add_option("--out", out_dir, "output directory");

  auto* unroll_cmd = app.add_subcommand("unroll", "unroll the last block for extra steps");
  unroll_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  unroll_cmd->add_option("--config", config_path, "config with an unroll section");
  unroll_cmd->add_option("--split", split, "train|val|test");
  unroll_cmd->add_option("--out", out_dir, "output directory");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference verification suite");
  grad_cmd->add_option("--seed", seed, "suite seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd || *share_cmd) {
      auto cfg = runner::ExperimentConfig::from_file(config_path);
      auto* cmd = *train_cmd ? train_cmd : share_cmd;
      if (cmd->count("--seed") > 0) cfg.training.seed = seed;
      if (*share_cmd && !cfg.sharing)
        throw std::runtime_error("share-train needs a sharing section in the config");
      auto result = runner::run_train(cfg, resolve_out(out_dir));
      std::cout << "run " << cfg.run_id << " finished: val accuracy "
                << runner::csv_double(result.final_val_accuracy) << " (best "
                << runner::csv_double(result.best_val_accuracy) << ")\n"
                << "outputs in " << result.run_dir.string() << "\n";
      return 0;
    }
    if (*probe_cmd || *drop_cmd || *unroll_cmd) {
      auto cfg = load_config_for_checkpoint(config_path, checkpoint_path);
      fs::path out = out_dir.empty()
                         ? (resolve_out("").empty()
                                ? fs::path(checkpoint_path).parent_path()
                                : fs::path(resolve_out("")))
                         : fs::path(out_dir);
      if (*probe_cmd) {
        runner::run_probe(checkpoint_path, cfg, split, out, std::cout);
        std::cout << "probes written to " << (out / "probes.csv").string() << "\n";
      } else if (*drop_cmd) {
        runner::run_drop_scan(checkpoint_path, cfg, split, out, std::cout);
        std::cout << "drop scan written to " << (out / "drop_scan.csv").string() << "\n";
      } else {
        runner::run_unroll(checkpoint_path, cfg, split, out, std::cout);
        std::cout << "unroll metrics written to " << (out / "unroll.csv").string() << "\n";
      }
      return 0;
    }
    if (*grad_cmd) {
      auto report = runner::run_gradcheck(seed);
      runner::print_report(report, std::cout);
      return report.pass ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
