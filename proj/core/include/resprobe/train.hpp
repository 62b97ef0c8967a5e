#pragma once

#include <cstdint>
#include <vector>

#include "resprobe/data.hpp"
#include "resprobe/nn.hpp"

namespace resprobe::train {

struct LrPoint {
  int until_epoch;  // applies while epoch < until_epoch; -1 means forever
  double lr;
};

struct Augment {
  bool flip = false;
  int translate_pixels = 0;  // pad-and-crop with zero padding
};

struct TrainConfig {
  int epochs = 1;
  int batch_size = 32;
  double momentum = 0.9;
  std::vector<LrPoint> lr_schedule;
  Augment augment;
  uint64_t seed = 0;

  void validate() const;  // schedule strictly increasing, all lr > 0
};

/// Pure schedule lookup: the first entry whose until_epoch exceeds the
/// epoch wins; a trailing until_epoch == -1 entry covers the rest.
double lr_at(const std::vector<LrPoint>& schedule, int epoch);

struct OptimizerState {
  std::vector<std::vector<double>> velocity;  // aligned with Model::parameters()
  static OptimizerState for_model(const nn::Model& model);
};

/// Classical (heavy-ball) momentum: v <- momentum*v + g; p <- p - lr*v.
/// Reads gradients from the parameters and clears them. A non-finite
/// gradient aborts with the parameter's name.
void sgd_momentum_step(std::vector<nn::Model::NamedTensor>& params, OptimizerState& state,
                       double lr, double momentum);

struct EpochMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// One full pass in a seeded shuffle order with per-sample augmentation;
/// the learning rate comes from the schedule at this epoch.
EpochMetrics train_epoch(nn::Model& model, const data::Dataset& dataset, const TrainConfig& cfg,
                         int epoch, OptimizerState& state);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> probs;  // [N, classes] row-major
};

EvalResult evaluate(nn::Model& model, const data::Dataset& dataset, int batch_size = 256);

/// Flip/translate one image in place; draws come from an rng stream
/// indexed by (seed, epoch, sample index).
void augment_image(std::vector<double>& img, int64_t c, int64_t h, int64_t w, const Augment& aug,
                   Rng& rng);

}  // namespace resprobe::train
