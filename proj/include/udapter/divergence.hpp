// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "udapter/encoder.hpp"
#include "udapter/tensor.hpp"

namespace udapter {

enum class DivergenceKind { kMkMmd, kCmd, kCoral };
enum class MmdEstimator { kBiased, kUnbiased };

std::string to_string(DivergenceKind kind);
DivergenceKind parse_divergence_kind(const std::string& name);
std::string to_string(MmdEstimator estimator);
MmdEstimator parse_mmd_estimator(const std::string& name);

struct DivergenceSpec {
  DivergenceKind kind = DivergenceKind::kMkMmd;
  std::vector<double> kernel_multipliers{0.25, 0.5, 1.0, 2.0, 4.0};
  MmdEstimator estimator = MmdEstimator::kBiased;
  // Overrides the median heuristic when set.
  std::optional<double> base_bandwidth;
  std::size_t cmd_order = 5;
  // 1-based layer indices; empty means every layer.
  std::vector<std::size_t> layer_set;

  // ConfigError on bad multipliers, order, or layers outside [1, num_layers].
  void validate(std::size_t num_layers) const;
  std::vector<std::size_t> resolved_layers(std::size_t num_layers) const;
};

// sqrt(median pairwise squared distance / 2) over the pooled rows of x and y.
double median_bandwidth(const Tensor& x, const Tensor& y);

// Sum over the kernel ladder of squared MMD between rows of x[n, h] and y[m, h].
// Bandwidths are constants of the batch, not differentiated.
Tensor mk_mmd(const Tensor& x, const Tensor& y, const DivergenceSpec& spec = {});

Tensor coral(const Tensor& x, const Tensor& y);

// Moment range is the pooled scalar min/max of both batches. When every value
// is identical the result is 0 and *degenerate is set.
Tensor cmd(const Tensor& x, const Tensor& y, std::size_t order = 5, bool* degenerate = nullptr);

Tensor divergence(const Tensor& x, const Tensor& y, const DivergenceSpec& spec);

struct LayerDivergence {
  Tensor total;
  std::vector<std::size_t> layers;  // 1-based
  std::vector<double> per_layer;
};

// Divergence between pooled adapted representations of each selected layer.
LayerDivergence layer_divergence(const LayerTaps& source, const LayerTaps& target, Pooling pooling,
                                 const DivergenceSpec& spec);

}  // namespace udapter
