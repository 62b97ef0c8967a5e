#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "resprobe/data.hpp"
#include "resprobe/nn.hpp"
#include "resprobe/probes.hpp"
#include "resprobe/share_unroll.hpp"
#include "resprobe/train.hpp"

namespace resprobe::runner {

// every emitted CSV carries this in its first column
inline constexpr int kCsvSchemaVersion = 1;

std::string csv_double(double v);  // locale-independent, '.' decimal point

struct ProbesConfig {
  int every_epochs = 0;  // 0: probe once, after the final epoch
  std::vector<std::string> enabled;
  int batch_size = 64;
};

struct DataConfig {
  std::string kind;  // cifar10 | cifar100 | idx | clusters | textures
  std::vector<std::string> train_paths, test_paths;
  std::string train_images, train_labels, test_images, test_labels;
  std::optional<int> subset_size;
  uint64_t seed = 0;
  // clusters
  int n_per_class = 0, test_per_class = 0, class_count = 2;
  Shape image_shape;
  double separation = 1.0;
  // textures
  data::TextureOptions textures;
};

struct ExperimentConfig {
  std::string run_id;
  std::string output_dir = "runs";
  nn::ArchitectureConfig architecture;
  train::TrainConfig training;
  std::optional<nn::SharingSpec> sharing;
  std::optional<share::UnrollSpec> unroll;
  ProbesConfig probes;
  DataConfig data;

  static ExperimentConfig from_json(const nlohmann::json& j);  // unknown keys are errors
  static ExperimentConfig from_file(const std::string& path);
  nlohmann::json to_json() const;
};

struct LoadedData {
  data::Dataset train;
  data::Dataset val;  // the held-out split; served for both "val" and "test"
};
LoadedData load_data(const DataConfig& cfg);
const data::Dataset& pick_split(const LoadedData& d, const std::string& split);

/// Builds the configured model (shared when a sharing spec is present).
nn::Model build_configured_model(const ExperimentConfig& cfg);

struct RunResult {
  std::filesystem::path run_dir;
  double final_val_accuracy = 0.0;
  double best_val_accuracy = 0.0;
};

/// Full training run: config snapshot, per-epoch metrics.csv, probe rows
/// at the configured cadence, final and best checkpoints. The run
/// directory <output_dir>/<run_id> must not already exist.
RunResult run_train(const ExperimentConfig& cfg, const std::string& out_override = "");

/// One row per (probe, block) on the requested split; probes that do not
/// apply to the architecture are skipped with a note, not an error.
void run_probe(const std::string& checkpoint_path, const ExperimentConfig& cfg,
               const std::string& split, const std::filesystem::path& out_dir,
               std::ostream& log);

/// Block-drop scan: baseline plus accuracy with each block removed.
void run_drop_scan(const std::string& checkpoint_path, const ExperimentConfig& cfg,
                   const std::string& split, const std::filesystem::path& out_dir,
                   std::ostream& log);

/// Unrolls the final block and emits unroll.csv: per-step loss, accuracy,
/// entropy, cosine and l2 ratio for the borderline/correct/all groups.
void run_unroll(const std::string& checkpoint_path, const ExperimentConfig& cfg,
                const std::string& split, const std::filesystem::path& out_dir,
                std::ostream& log);

// --- gradient checking suite --------------------------------------------

struct GradcheckReport {
  struct Entry {
    std::string name;
    double value = 0.0;      // max relative error, or slope statistic
    double tolerance = 0.0;  // bound the value is held against
    bool higher_is_better = false;
    bool pass = false;
  };
  std::vector<Entry> entries;
  bool pass = true;

  void add(const std::string& name, double value, double tolerance, bool higher_is_better = false);
};

/// Finite-difference verification of every primitive, whole desk models
/// (shared included), the first-layer gradient-step identity, and Taylor
/// convergence slopes. Deterministic in the seed.
GradcheckReport run_gradcheck(uint64_t seed);

void print_report(const GradcheckReport& report, std::ostream& os);

}  // namespace resprobe::runner
