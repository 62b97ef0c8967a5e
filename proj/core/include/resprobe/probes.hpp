#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "resprobe/data.hpp"
#include "resprobe/nn.hpp"

namespace resprobe::probes {

/// One per-block, per-epoch measurement row.
struct ProbeRecord {
  int block_index = 0;
  int stage_index = 0;
  double cosine_loss = 0.0;
  double l2_ratio = 0.0;
  double drop_accuracy = 0.0;
  double intermediate_accuracy = 0.0;
  std::string split = "train";
};

/// A batch-averaged statistic plus how many samples were excluded for
/// zero-norm vectors (never silently zeroed).
struct ProbeStat {
  double value = 0.0;
  int excluded = 0;
};

/// Mean per-sample cosine between two [N, ...] tensors, flattened per
/// sample. Zero-norm samples are excluded and counted; throws when every
/// sample is excluded. This is the statistic the cosine probe reports.
ProbeStat batch_cosine(const Tensor& a, const Tensor& b);

/// Mean per-sample ||num|| / ||den||; zero-norm denominators excluded.
ProbeStat batch_norm_ratio(const Tensor& num, const Tensor& den);

/// Margin split on precomputed softmax rows; the core of borderline_split.
struct BorderlineReport;
BorderlineReport borderline_from_probs(const std::vector<double>& probs,
                                       const std::vector<int>& labels, int classes, double tau);

/// Mean over samples of cos(F_i(h_i), dL/dh_i), where the gradient of the
/// final loss is taken at the representation entering block i with all
/// parameters held fixed. Eval-mode forward; zero-norm samples are
/// excluded and counted; throws when nothing remains.
ProbeStat cosine_loss_probe(nn::Model& model, const Tensor& batch, const std::vector<int>& labels,
                            int block);

/// Mean over samples of ||F_i(h_i)|| / ||h_i||.
ProbeStat l2_ratio_probe(nn::Model& model, const Tensor& batch, int block);

/// Both statistics for every block from one forward/backward per batch.
struct SweepResult {
  std::vector<ProbeStat> cosine;
  std::vector<ProbeStat> l2_ratio;
};
SweepResult cosine_l2_sweep(nn::Model& model, const data::Dataset& dataset, int batch_size = 64);

/// Accuracy with block `block` skipped (h_{i+1} := h_i). The model is not
/// modified; rejects indices that do not name a residual block.
double drop_block_eval(nn::Model& model, int block, const data::Dataset& dataset,
                       int batch_size = 256);

/// Accuracy of the trained classifier head applied to the representation
/// after `block`, which must lie in the final stage.
double intermediate_accuracy(nn::Model& model, int block, const data::Dataset& dataset,
                             int batch_size = 256);

/// Sample partition by prediction margin. With p the softmax output, y
/// the true class and m = p_y - max_{j!=y} p_j, a sample is borderline iff
/// |m| < 2*tau (migrating tau probability mass between the two contending
/// classes moves m by 2*tau), and correct iff m > 0.
struct BorderlineReport {
  double tau = 0.1;
  std::vector<int> borderline, correct, all;
};
BorderlineReport borderline_split(nn::Model& model, const data::Dataset& dataset, double tau = 0.1,
                                  int batch_size = 256);

struct GroupMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  double entropy = 0.0;
  int64_t count = 0;
};

/// Loss, accuracy and mean prediction entropy per example group at each
/// depth in [first_block, last_block] of the final stage, using the final
/// classifier head. Empty groups report no metrics rather than zeros.
struct GroupMetricsTable {
  std::vector<int> blocks;
  std::vector<std::string> group_names;                          // borderline, correct, all
  std::vector<std::vector<std::optional<GroupMetrics>>> values;  // [group][depth]
};
GroupMetricsTable group_metrics(nn::Model& model, const BorderlineReport& groups, int first_block,
                                int last_block, const data::Dataset& dataset, int batch_size = 256);

/// r = ||dL/dh at the first stage's first block|| / ||dL/dh at the last
/// stage's first block||, plus activation norms at every depth. Needs at
/// least two stages.
struct GradNormReport {
  double ratio = 0.0;
  bool infinite = false;
  double grad_norm_first = 0.0;
  double grad_norm_last = 0.0;
  std::vector<double> activation_norms;
};
GradNormReport grad_norm_ratio(nn::Model& model, const Tensor& batch,
                               const std::vector<int>& labels);

/// Measures how one plain-SGD step on the stem parameters moves the stem
/// output h_o against the prediction -eta * (||x||^2 + 1) * dL/dh_o.
/// Exact (up to float noise) when the stem acts as a dense map, i.e. its
/// output has 1x1 spatial extent; other stems are rejected, as are
/// batches larger than one sample. Restores the model afterwards.
struct FirstLayerCheck {
  std::vector<double> delta_h;
  std::vector<double> predicted;
  double rel_error = 0.0;
};
FirstLayerCheck first_layer_gradient_step_check(nn::Model& model, const Tensor& sample, int label,
                                                double eta);

/// Residuals R(s) = |L(h + s F(h)) - L(h) - s F(h).dL/dh| of the
/// downstream network after `block`, per sample and scale.
struct TaylorResiduals {
  std::vector<double> base_loss;               // per sample, at s = 0
  std::vector<std::vector<double>> residuals;  // [sample][scale]
  std::vector<bool> kink_free;                 // relu sign pattern stable at max scale
};

/// Readout turning downstream logits into the per-sample loss. The linear
/// readout (sum of logits) exists so first-order exactness can be verified
/// on an affine downstream path.
enum class TaylorReadout { cross_entropy, linear_sum };

TaylorResiduals taylor_residuals(nn::Model& model, const Tensor& batch,
                                 const std::vector<int>& labels, int block,
                                 const std::vector<double>& scales,
                                 TaylorReadout readout = TaylorReadout::cross_entropy);

/// Log-log slope of R(s) over s in {1, 1/2, 1/4, 1/8} per sample. Samples
/// whose relu activation pattern changes under the largest perturbation
/// are flagged, not fitted; samples with residuals at float-noise level
/// count as converged.
struct TaylorReport {
  struct Sample {
    double slope = 0.0;
    bool kink_free = true;
    bool degenerate = false;  // residuals at noise level; first order exact
  };
  std::vector<Sample> samples;
  int n_kink_free = 0;
  int n_fitted = 0;

  /// kink-free samples whose slope meets the bound (degenerate ones count)
  int n_converged(double min_slope) const;
};
TaylorReport taylor_residual_check(nn::Model& model, const Tensor& batch,
                                   const std::vector<int>& labels, int block);

}  // namespace resprobe::probes
