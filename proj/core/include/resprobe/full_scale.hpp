#pragma once

#include <cstdint>

namespace resprobe::full_scale {

// Reference parameter totals for the publication-scale architecture
// variants. These are pure counting functions — nothing is allocated —
// and they deliberately follow the accounting conventions the reference
// totals were produced under, which differ between the two groups below.

// Keras-style accounting: batch norm counts 4 values per channel (gamma,
// beta and both moving statistics), convolutions carry biases, and the
// classifier applies a literal 8x8 average pool before flattening (a
// 32x32 feature map keeps a 4x4 grid of the last-stage channels).

/// Single-representation net: 3x3 stem with 100 filters, ten 100-channel
/// blocks at 32x32, then the classifier. 1,829,210 for 10 classes.
int64_t single_repr_reference_count(int classes = 10);

/// Wide net: 3x3 stem with 16 filters, then three groups at 160/320/640
/// channels. Each later group opens with a transition block (first conv
/// changes width, 1x1 projection on the skip); the four shape-preserving
/// blocks per stage follow it. 45,732,842 for 10 classes.
int64_t wide_reference_count(int classes = 10);

// Canonical pre-activation CIFAR accounting: trainable parameters only
// (gamma/beta but no moving statistics), conv biases included, stage
// transitions inside each stage's first block with a biased 1x1
// projection on the skip path.

/// Plain depth-6n+2 net over 16/32/64 channels.
int64_t preact_resnet_reference_count(int depth, int classes = 10);

/// Same net with each stage's blocks tied from block index `share_from`
/// on, and per-application batch-norm gamma/beta. Resnet-110 shared from
/// index 5 gives 570,762 for 10 classes.
int64_t preact_resnet_ubn_reference_count(int depth, int share_from = 5, int classes = 10);

}  // namespace resprobe::full_scale
