#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "kromhc/tensor.hpp"

namespace kromhc {

inline constexpr double kGradCheckStep = 1e-5;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of the scalar `loss` against central
// differences, coordinate by coordinate. The error for one coordinate is
// |analytic - numeric| / max(1, |numeric|). `loss` is re-evaluated after each
// perturbation and must read the current parameter values.
GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                           double h = kGradCheckStep);

}  // namespace kromhc
