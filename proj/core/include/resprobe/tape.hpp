#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "resprobe/tensor.hpp"

namespace resprobe {

/// Scalar mean loss plus the per-example losses it was averaged from.
struct LossValue {
  Tensor total;                    // scalar, lives on the tape
  std::vector<double> per_sample;  // detached copies
};

/// Reverse-mode tape. Nodes are recorded in execution order, which is a
/// valid topological order because an op's inputs always exist before its
/// output. A tape is single-writer: one forward, one backward.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    // Pulls d(loss)/d(output) from the tape and accumulates into the
    // inputs' gradient buffers.
    std::function<void(Tape&, const Node&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records one op application and stamps the output's node_id.
  Tensor record(const char* op, std::vector<Tensor> inputs, Tensor output,
                std::function<void(Tape&, const Node&)> backward);

  /// Runs reverse accumulation from a scalar. Populates impl->grad for
  /// every retain_grad-marked tensor, and for requires_grad leaves when
  /// write_leaf_grads is set. Freezes the tape; calling twice throws.
  void backward(const Tensor& scalar_root);
  void backward(const LossValue& loss) { backward(loss.total); }

  bool frozen() const { return frozen_; }
  size_t size() const { return nodes_.size(); }

  /// When false (probe mode), requires_grad leaves are left untouched by
  /// backward; only retain_grad-marked tensors receive gradients.
  bool write_leaf_grads = true;

  /// Observer invoked with every relu input during forward. Used by the
  /// local-smoothness filter that compares activation sign patterns.
  std::function<void(const Tensor& relu_input)> on_relu;

  /// Gradient buffer for an impl during backward; zero-initialised on
  /// first access. Only meaningful inside backward rules.
  std::vector<double>* find_grad_buf(const TensorImpl* t);
  std::vector<double>& grad_buf(const std::shared_ptr<TensorImpl>& t);

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const TensorImpl*, std::vector<double>> bufs_;
  bool frozen_ = false;
};

}  // namespace resprobe
