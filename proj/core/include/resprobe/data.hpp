#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "resprobe/rng.hpp"
#include "resprobe/tensor.hpp"

namespace resprobe::data {

struct Dataset {
  Tensor images;  // [N, C, H, W]
  std::vector<int> labels;
  int class_count = 0;
  std::string split = "train";

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  void validate() const;  // labels in range, counts aligned
};

/// Per-channel standardization statistics, computed on the train split
/// only and reused for val/test.
struct NormStats {
  std::vector<double> mean, stddev;
};

NormStats compute_norm_stats(const Dataset& train);
void apply_norm(Dataset& d, const NormStats& stats);

// --- CIFAR binary -------------------------------------------------------
// Record layout: 1 label byte (or coarse+fine bytes for the 100-class
// variant) followed by 3072 channel-major pixel bytes. Pixels load as
// [0, 1] scaled doubles; standardization is a separate step.

struct CifarOptions {
  int classes = 10;  // 10 or 100; 100 reads the fine label
  std::optional<int> subset_size;
  uint64_t seed = 0;
  std::string split = "train";
};

Dataset load_cifar_binary(const std::vector<std::string>& paths, const CifarOptions& opts = {});

/// Raw uint8 images, CIFAR shaped; what the binary writers consume.
struct RawImages {
  std::vector<uint8_t> pixels;  // N * C*H*W, channel-major per record
  std::vector<int> labels;
  int classes = 10;
  int channels = 3, height = 32, width = 32;
};

void write_cifar_binary(const std::string& path, const RawImages& raw);

// --- IDX ----------------------------------------------------------------

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split = "train", int class_count = 10);
void write_idx(const std::string& images_path, const std::string& labels_path,
               const RawImages& raw);

// --- synthetic generators ------------------------------------------------

/// Class-conditional Gaussian blobs embedded as flat images; linearly
/// separable for large separation. The verification oracle task.
Dataset synthetic_clusters(int n_per_class, int class_count, const Shape& image_shape,
                           double separation, uint64_t seed);

/// Textured image stand-in: smooth per-class templates plus translation,
/// brightness jitter and pixel noise, quantized to uint8 so it can round-
/// trip the CIFAR binary format exactly.
struct TextureOptions {
  int classes = 10;
  int train_per_class = 500;
  int test_per_class = 200;
  double template_amplitude = 1.0;
  double noise = 0.6;
  // each sample blends in a random other class's template by up to this
  // fraction, which caps attainable accuracy and creates samples that sit
  // near decision boundaries
  double confuse = 0.0;
  int max_shift = 3;
  uint64_t seed = 7;
};

std::pair<RawImages, RawImages> synthetic_textures(const TextureOptions& opts);

/// Seeded class-balanced subset; subset_size == N is the identity.
Dataset balanced_subset(const Dataset& d, int subset_size, uint64_t seed);

/// Shuffled index batches; a fixed seed yields identical sequences.
std::vector<std::vector<int>> batch_indices(int64_t n, int batch_size, Rng& rng);

/// Gathers rows into a batch tensor plus labels.
std::pair<Tensor, std::vector<int>> gather(const Dataset& d, const std::vector<int>& idx);

}  // namespace resprobe::data
