// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "udapter/tensor.hpp"

namespace udapter {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW with bias correction and decoupled weight decay. Parameters are
// rounded to f32 after every update; moments stay in double.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options);

  // Throws ContractError when a parameter has no gradient buffer.
  void step();
  void zero_grad();

  std::int64_t step_count() const noexcept { return step_; }
  const AdamWOptions& options() const noexcept { return options_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamWOptions options_;
  std::int64_t step_ = 0;
};

}  // namespace udapter
