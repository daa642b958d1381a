#pragma once

#include "mtasr/tensor.hpp"

namespace mtasr {

// Compares reverse-mode gradients of a scalar-valued function against
// central finite differences, elementwise over every parameter. Each element
// scores as the smaller of absolute and relative error, so parameters whose
// true gradient is exactly zero (e.g. attention key biases, which softmax
// shift invariance annihilates) are not penalized for finite-difference
// roundoff noise. Returns the worst score over all elements.
inline double grad_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params,
                         double eps = 1e-5) {
  if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");
  zero_grad(params);
  Tensor loss = f();
  backward(loss);
  if (!std::isfinite(loss.item()))
    throw NumericalError("grad_check: non-finite loss in analytic pass");
  double worst = 0.0;
  for (const auto& p : params) {
    std::vector<double> analytic = p.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      double orig = p.at(i);
      p.at(i) = orig + eps;
      double up = f().item();
      p.at(i) = orig - eps;
      double dn = f().item();
      p.at(i) = orig;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw NumericalError("grad_check: non-finite loss at param index " +
                             std::to_string(i));
      double numeric = (up - dn) / (2.0 * eps);
      double denom = std::max({std::abs(analytic[i]), std::abs(numeric),
                               1e-8});
      double abs_err = std::abs(analytic[i] - numeric);
      worst = std::max(worst, std::min(abs_err, abs_err / denom));
    }
  }
  return worst;
}

}  // namespace mtasr
