#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace resprobe {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

/// Dense n-dimensional array of doubles in row-major order, with an
/// optional gradient slot and an optional handle onto the tape node
/// that produced it. Copies are shallow: two Tensor values may share
/// one underlying buffer (that is how weight tying works).
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;   // empty until a backward pass populates it
  bool requires_grad = false; // leaf parameter: receives grad on backward
  bool retain_grad = false;   // marked intermediate (e.g. a block input h_i)
  int64_t node_id = -1;       // producing tape node, -1 when detached
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t size(size_t dim) const;
  int64_t numel() const;
  size_t rank() const { return shape().size(); }

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double item() const;  // requires numel() == 1

  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws when absent
  Tensor grad_tensor() const;               // detached copy of the gradient
  void clear_grad();

  void set_requires_grad(bool on);
  bool requires_grad() const;
  void set_retain_grad(bool on);
  bool retain_grad() const;

  int64_t node_id() const;
  bool on_tape() const { return defined() && impl_->node_id >= 0; }

  /// Deep copy, detached from any tape.
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

  /// True when both values share one buffer (weight tying).
  bool aliases(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend class Tape;
};

double l2_norm(const std::vector<double>& v);
double dot(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace resprobe
