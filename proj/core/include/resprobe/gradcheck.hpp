#pragma once

#include <functional>

#include "resprobe/tensor.hpp"

namespace resprobe::gradcheck {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient estimate of a deterministic scalar
/// function, (fn(x + eps e_k) - fn(x - eps e_k)) / (2 eps) per component.
/// Rejects non-finite function values.
Tensor finite_diff_grad(const ScalarFn& fn, const Tensor& x, double eps = 1e-5);

/// max_k |a_k - b_k| / max(floor, |a_k|, |b_k|)
double max_rel_error(const std::vector<double>& a, const std::vector<double>& b,
                     double floor = 1e-6);

}  // namespace resprobe::gradcheck
