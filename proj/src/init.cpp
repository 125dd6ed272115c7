// SPDX-License-Identifier: Apache-2.0
#include "udapter/init.hpp"

#include <cmath>

namespace udapter {

Tensor uniform_tensor(Shape shape, double limit, Rng& rng, bool requires_grad) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = round_to_f32(rng.uniform(-limit, limit));
  return Tensor::from_values(std::move(shape), std::move(values), requires_grad);
}

Tensor glorot_uniform(std::size_t fan_out, std::size_t fan_in, Rng& rng, bool requires_grad) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_tensor({fan_out, fan_in}, a, rng, requires_grad);
}

}  // namespace udapter
