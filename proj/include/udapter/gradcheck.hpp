// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "udapter/tensor.hpp"

namespace udapter {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients of the scalar `f` wrt every element of
// `params` against central differences (f(x+h) - f(x-h)) / 2h. Relative
// error is |a - n| / max(|a|, |n|, floor). `f` must rebuild its graph on
// each call.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           double h = 1e-3, double floor = 1e-6);

}  // namespace udapter
