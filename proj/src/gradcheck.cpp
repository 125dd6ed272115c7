// SPDX-License-Identifier: Apache-2.0
#include "udapter/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "udapter/error.hpp"

namespace udapter {

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h,
                           double floor) {
  for (auto& p : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: parameter does not require grad");
    p.zero_grad();
  }
  f().backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double up = f().item();
      values[i] = original - h;
      const double down = f().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace udapter
