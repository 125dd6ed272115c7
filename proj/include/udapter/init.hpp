// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "udapter/rng.hpp"
#include "udapter/tensor.hpp"

namespace udapter {

// Glorot-uniform [fan_out, fan_in] matrix, U(-a, a) with
// a = sqrt(6 / (fan_in + fan_out)), values rounded to f32.
Tensor glorot_uniform(std::size_t fan_out, std::size_t fan_in, Rng& rng, bool requires_grad = true);

// U(-limit, limit) tensor of arbitrary shape, values rounded to f32.
Tensor uniform_tensor(Shape shape, double limit, Rng& rng, bool requires_grad = true);

}  // namespace udapter
