#include "resprobe/tape.hpp"

#include <stdexcept>

namespace resprobe {

Tensor Tape::record(const char* op, std::vector<Tensor> inputs, Tensor output,
                    std::function<void(Tape&, const Node&)> backward) {
  if (frozen_) throw std::logic_error("tape is frozen; create a new tape for another forward");
  Node node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node.inputs.push_back(t.impl_ptr());
  node.output = output.impl_ptr();
  node.backward = std::move(backward);
  output.impl()->node_id = static_cast<int64_t>(nodes_.size());
  nodes_.push_back(std::move(node));
  return output;
}

std::vector<double>* Tape::find_grad_buf(const TensorImpl* t) {
  auto it = bufs_.find(t);
  return it == bufs_.end() ? nullptr : &it->second;
}

std::vector<double>& Tape::grad_buf(const std::shared_ptr<TensorImpl>& t) {
  auto it = bufs_.find(t.get());
  if (it == bufs_.end()) {
    it = bufs_.emplace(t.get(), std::vector<double>(t->data.size(), 0.0)).first;
  }
  return it->second;
}

void Tape::backward(const Tensor& scalar_root) {
  if (frozen_) throw std::logic_error("backward already ran on this tape");
  if (!scalar_root.defined() || scalar_root.numel() != 1) {
    throw std::invalid_argument("backward expects a defined scalar root");
  }
  if (!scalar_root.on_tape()) {
    throw std::invalid_argument("backward root is not recorded on a tape");
  }
  grad_buf(scalar_root.impl_ptr()).assign(1, 1.0);

  // Reverse creation order is a reverse topological order. A node whose
  // output never received a gradient contributes nothing and is skipped.
  for (size_t i = nodes_.size(); i-- > 0;) {
    const Node& node = nodes_[i];
    if (!find_grad_buf(node.output.get())) continue;
    node.backward(*this, node);
  }

  for (auto& [impl, buf] : bufs_) {
    auto* t = const_cast<TensorImpl*>(impl);
    bool is_leaf = t->node_id < 0;
    if (t->retain_grad || (is_leaf && t->requires_grad && write_leaf_grads)) {
      t->grad = std::move(buf);
    }
  }
  bufs_.clear();
  frozen_ = true;
}

}  // namespace resprobe
