#include "resprobe/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace resprobe::gradcheck {

Tensor finite_diff_grad(const ScalarFn& fn, const Tensor& x, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Tensor probe = x.clone();
  Tensor grad = Tensor::zeros(x.shape());
  auto& pv = probe.data();
  auto& gv = grad.data();
  for (size_t k = 0; k < pv.size(); ++k) {
    double orig = pv[k];
    pv[k] = orig + eps;
    double up = fn(probe);
    pv[k] = orig - eps;
    double down = fn(probe);
    pv[k] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("finite_diff_grad: function value is not finite at component " +
                               std::to_string(k));
    gv[k] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  if (a.size() != b.size())
    throw std::invalid_argument("max_rel_error: length mismatch " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  double worst = 0.0;
  for (size_t k = 0; k < a.size(); ++k) {
    double denom = std::max({floor, std::fabs(a[k]), std::fabs(b[k])});
    worst = std::max(worst, std::fabs(a[k] - b[k]) / denom);
  }
  return worst;
}

}  // namespace resprobe::gradcheck
