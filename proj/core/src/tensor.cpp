#include "resprobe/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace resprobe {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

static void check_shape(const Shape& s) {
  for (int64_t d : s) {
    if (d <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
  }
}

Tensor Tensor::zeros(Shape shape) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (double& x : t.data()) x = value;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

static const TensorImpl& deref(const std::shared_ptr<TensorImpl>& p) {
  if (!p) throw std::logic_error("use of undefined tensor");
  return *p;
}

const Shape& Tensor::shape() const { return deref(impl_).shape; }

int64_t Tensor::size(size_t dim) const {
  const Shape& s = shape();
  if (dim >= s.size()) throw std::out_of_range("dim " + std::to_string(dim) + " out of range for " + shape_str(s));
  return s[dim];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(deref(impl_).data.size()); }

std::vector<double>& Tensor::data() {
  deref(impl_);
  return impl_->data;
}

const std::vector<double>& Tensor::data() const { return deref(impl_).data; }

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const { return Tensor::from(shape(), grad()); }

void Tensor::clear_grad() {
  deref(impl_);
  impl_->grad.clear();
}

void Tensor::set_requires_grad(bool on) {
  deref(impl_);
  impl_->requires_grad = on;
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

void Tensor::set_retain_grad(bool on) {
  deref(impl_);
  impl_->retain_grad = on;
}

bool Tensor::retain_grad() const { return defined() && impl_->retain_grad; }

int64_t Tensor::node_id() const { return deref(impl_).node_id; }

Tensor Tensor::clone() const {
  return Tensor::from(shape(), data());
}

double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace resprobe
