#pragma once

#include "resprobe/data.hpp"
#include "resprobe/nn.hpp"

namespace resprobe::share {

using nn::ArchitectureConfig;
using nn::BnShareMode;
using nn::Model;
using nn::SharingSpec;

/// Builds a model where, within each stage, blocks at index >=
/// share_from_block reference one weight set. Batch-norm state follows
/// bn_mode:
///   naive          — one shared bank for every application
///   unshared_stats — shared gamma/beta, per-application statistics
///   ubn_full       — per-application statistics and gamma/beta, with the
///                    shared applications' gamma initialized small
Model build_shared_model(const ArchitectureConfig& config, const SharingSpec& spec, uint64_t seed);

/// Closed-form trainable-parameter count for a (possibly shared) config,
/// matching what the registry walk of the built model reports.
int64_t expected_parameter_count(const ArchitectureConfig& config,
                                 const SharingSpec* sharing = nullptr);

struct UnrollSpec {
  int extra_steps = 0;
  double alpha = 1.0;  // scaling applied to the unrolled block's output

  void validate() const;
};

/// A trained model with its last block unrolled for extra steps:
/// h <- h + alpha * F(h). Each extra step owns fresh batch-norm statistic
/// banks (affine parameters stay the trained ones); they are calibrated
/// by one pass over a calibration split and then frozen.
struct UnrolledModel {
  Model* base = nullptr;
  UnrollSpec spec;
  std::vector<nn::BnBank> bn1_banks;  // one per extra step
  std::vector<nn::BnBank> bn2_banks;
};

UnrolledModel unroll_last_block(Model& model, const UnrollSpec& spec,
                                const data::Dataset& calibration, int batch_size = 128);

struct UnrollTrace {
  std::vector<Tensor> h;  // h[0] is the base model's final representation
  std::vector<Tensor> F;  // unscaled block output at each extra step
  Tensor logits;          // head applied to the last h
};

/// Forward through base model plus the extra steps. With retain set, every
/// per-step h is marked for gradient retention.
UnrollTrace unrolled_forward(Tape& tape, UnrolledModel& um, const Tensor& batch, bool retain);

struct ExplosionReport {
  std::vector<double> h_norms;       // mean per-sample L2 of every h_i (plus final)
  double max_stage_growth = 0.0;     // max over stages of per-block geometric growth
  double shared_span_growth = 0.0;   // per-application geometric growth across the
                                     // shared span (1.0 when nothing is shared)
};

/// Activation norms per depth and geometric growth factors, typically at
/// initialization. Read-only in both modes (train-statistics mode runs on
/// a snapshot and restores it).
ExplosionReport activation_explosion_probe(Model& model, const Tensor& batch,
                                           Mode mode = Mode::eval);

/// (h_norms[to] / h_norms[from]) ^ (1 / (to - from)): per-step geometric
/// growth over a span of the depth profile.
double span_growth(const std::vector<double>& h_norms, int from_h, int to_h);

}  // namespace resprobe::share
