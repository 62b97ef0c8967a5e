#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "resprobe/tape.hpp"
#include "resprobe/tensor.hpp"

namespace resprobe {

enum class Mode { train, eval };

namespace ops {

// Elementwise / linear primitives. Every op records a node with its
// local-gradient rule; numerics are deterministic given inputs.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor bias_add(Tape& tape, const Tensor& x, const Tensor& bias);  // [N,K] + [K]
Tensor scale(Tape& tape, const Tensor& x, double alpha);
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);  // [M,K] x [K,N]
Tensor relu(Tape& tape, const Tensor& x);
Tensor sum(Tape& tape, const Tensor& x);  // -> scalar
Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape);
Tensor flatten(Tape& tape, const Tensor& x);  // [N, ...] -> [N, rest]

/// NCHW convolution with OIHW kernel, zero padding. bias may be an
/// undefined Tensor for no bias.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int pad);

Tensor avg_pool2d(Tape& tape, const Tensor& x, int kh, int kw, int sh, int sw);

struct BatchNormArgs {
  Mode mode = Mode::train;
  double momentum = 0.1;
  double eps = 1e-5;
  // Selected bank's running statistics; updated in train mode, read in
  // eval mode. Never differentiated through.
  std::vector<double>* running_mean = nullptr;
  std::vector<double>* running_var = nullptr;
};

/// Per-channel batch normalization over N,H,W of an NCHW input.
/// Train mode normalizes by batch statistics (biased variance) and folds
/// them into the running statistics; eval mode uses running statistics
/// only, so eval output never depends on the batch.
Tensor batchnorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 const BatchNormArgs& args);

LossValue softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                const std::vector<int>& labels);

/// Detached row-wise softmax (no tape).
std::vector<double> softmax_rows(const Tensor& logits);

struct OpAttrs {
  int stride = 1;
  int pad = 0;
  int kh = 0, kw = 0, sh = 0, sw = 0;
  double alpha = 1.0;
  Shape new_shape;
  BatchNormArgs bn;
  Tensor gamma, beta;          // batchnorm affine parameters
  std::vector<int> labels;     // softmax_cross_entropy
};

/// String-keyed dispatcher over the primitive set: add, scalar_multiply,
/// matmul, conv2d, relu, avg_pool2d, batchnorm, flatten, reshape, sum,
/// softmax_cross_entropy. Unknown op kinds are rejected.
Tensor forward_op(Tape& tape, std::string_view op_kind, const std::vector<Tensor>& inputs,
                  const OpAttrs& attrs);

namespace testing {
// Fault injection for validating that gradient checks catch a broken
// backward rule. 1.0 means no fault.
extern double bn_backward_gamma_scale;
}  // namespace testing

}  // namespace ops
}  // namespace resprobe
