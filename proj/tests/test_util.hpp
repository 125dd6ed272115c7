// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "udapter/rng.hpp"
#include "udapter/tensor.hpp"

namespace udapter::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero so kinked ops are differentiable at every probe.
inline Tensor random_away_from_zero(Shape shape, Rng& rng, double margin = 0.05) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    const double mag = rng.uniform(margin, 1.0);
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

inline std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace udapter::testing
