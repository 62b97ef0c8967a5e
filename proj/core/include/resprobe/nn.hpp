#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "resprobe/ops.hpp"
#include "resprobe/tape.hpp"
#include "resprobe/tensor.hpp"

namespace resprobe::nn {

enum class Family { original, single_repr, avg_pool, wide };
enum class ShortcutKind { conv1x1, pool, none };
enum class BnShareMode { naive, unshared_stats, ubn_full };

const char* family_name(Family f);
Family family_from_name(const std::string& name);
const char* shortcut_name(ShortcutKind k);
ShortcutKind shortcut_from_name(const std::string& name);
const char* bn_mode_name(BnShareMode m);
BnShareMode bn_mode_from_name(const std::string& name);

struct StageSpec {
  int num_blocks = 0;
  int channels = 0;
};

struct ArchitectureConfig {
  Family family = Family::single_repr;
  std::vector<StageSpec> stages;
  int stem_channels = 0;
  Shape input_shape;  // {C, H, W}
  int num_classes = 0;
  ShortcutKind shortcut = ShortcutKind::none;

  void validate() const;  // throws std::invalid_argument on violations
  int total_blocks() const;
};

/// Weight sharing within each stage: blocks at index >= share_from_block
/// reference one weight set. bn_mode controls what the per-application
/// batch-norm banks own.
struct SharingSpec {
  int share_from_block = 1;
  BnShareMode bn_mode = BnShareMode::ubn_full;
  double gamma_init_shared = 0.1;

  void validate() const;
};

/// One set of batch-norm affine parameters plus running statistics.
struct BnBank {
  Tensor gamma, beta;
  std::vector<double> running_mean, running_var;
};

struct BatchNormState {
  BnBank primary;
  std::vector<BnBank> step_banks;  // indexed by shared-application / unroll step
  double momentum = 0.1;
  double eps = 1e-5;

  int64_t channels() const { return primary.gamma.size(0); }
  /// Selects the bank for this application. step is required iff
  /// step_banks are present; out-of-range steps are rejected.
  BnBank& bank(std::optional<int> step);
};

struct Conv2dLayer {
  Tensor weight;  // OIHW
  Tensor bias;
  int stride = 1;
  int pad = 1;
};

struct DenseLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

/// BatchNorm -> ReLU -> Conv -> BatchNorm -> ReLU -> Conv, channels and
/// spatial extents preserved. The residual add lives outside the block.
struct ResidualBlock {
  BatchNormState bn1;
  Conv2dLayer conv1;
  BatchNormState bn2;
  Conv2dLayer conv2;
  int channels = 0;
};

struct Shortcut {
  ShortcutKind kind = ShortcutKind::none;
  Conv2dLayer conv;  // used when kind == conv1x1 (1x1, stride 2)
};

/// Classifier: BatchNorm -> ReLU -> global AveragePool -> Flatten -> Dense.
struct Head {
  BatchNormState bn;
  DenseLayer fc;
};

struct Model {
  ArchitectureConfig config;
  std::optional<SharingSpec> sharing;
  Conv2dLayer stem;
  std::vector<std::vector<std::shared_ptr<ResidualBlock>>> stages;
  std::vector<Shortcut> shortcuts;  // between consecutive stages
  Head head;

  int num_blocks() const;
  /// (stage index, position within stage) for a global block index.
  std::pair<int, int> stage_pos(int block) const;
  int stage_of_block(int block) const { return stage_pos(block).first; }
  int first_block_of_stage(int stage) const;
  int last_stage() const { return static_cast<int>(stages.size()) - 1; }

  /// Shared-application step for the block at this position, when its
  /// batch norm carries step banks.
  std::optional<int> bn_step_for(int stage, int pos) const;

  struct NamedTensor {
    std::string name;
    Tensor tensor;
  };
  /// Unique trainable parameters in a stable construction order. Tied
  /// weights appear once, under the owning block's name.
  std::vector<NamedTensor> parameters() const;
  int64_t parameter_count() const;

  struct StateRef {
    std::string name;
    Shape shape;
    std::vector<double>* values;
  };
  /// Parameters plus running statistics, for checkpointing. Stable order,
  /// deduplicated under weight tying.
  std::vector<StateRef> state_refs();
};

/// He-normal initialized model; deterministic in the seed.
Model build_model(const ArchitectureConfig& config, uint64_t seed);

struct CollectOptions {
  Mode mode = Mode::eval;
  bool retain_h = false;  // mark every h_i (and the final representation)
  int drop_block = -1;    // skip this block: h_{i+1} := h_i
};

struct ForwardTrace {
  Tensor logits;
  std::vector<Tensor> h;  // h[i] enters block i; h[num_blocks] feeds the head
  std::vector<Tensor> F;  // F[i] is block i's output (undefined when dropped)
};

/// Full forward pass with per-block collection. Within a stage
/// h[i+1] == h[i] + F[i] holds exactly; at stage boundaries the shortcut
/// sits between h[i] + F[i] and h[i+1].
ForwardTrace forward_collect(Tape& tape, Model& model, const Tensor& batch,
                             const CollectOptions& opts = {});

Tensor batchnorm_forward(Tape& tape, BatchNormState& state, const Tensor& x, Mode mode,
                         std::optional<int> step_index = std::nullopt);

/// One residual block's F(h): BN -> ReLU -> Conv -> BN -> ReLU -> Conv.
Tensor block_output(Tape& tape, ResidualBlock& block, const Tensor& h, Mode mode,
                    std::optional<int> step_index = std::nullopt);

/// Classifier head only, applied to a representation of the last stage.
Tensor head_logits(Tape& tape, Model& model, const Tensor& h, Mode mode);

/// Downstream map: blocks after `after_block`, shortcuts, and the head,
/// starting from a representation at block `after_block`'s output.
Tensor forward_from(Tape& tape, Model& model, int after_block, const Tensor& h, Mode mode);

/// Like forward_from, but `h` enters block `from_block` (the block itself
/// runs too). This is the network as a function of h_i.
Tensor forward_through(Tape& tape, Model& model, int from_block, const Tensor& h, Mode mode);

// --- checkpoint file ---------------------------------------------------
// Little-endian binary: magic, format version, architecture/sharing JSON,
// seed, epoch, then named flat float64 arrays in registry order.
// Round-trips bit-exactly.

void save_checkpoint(const std::string& path, Model& model, uint64_t seed, int epoch);

struct Checkpoint {
  Model model;
  uint64_t seed = 0;
  int epoch = 0;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace resprobe::nn
