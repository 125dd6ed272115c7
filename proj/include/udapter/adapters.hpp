// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "udapter/rng.hpp"
#include "udapter/tensor.hpp"
#include "udapter/weights_io.hpp"

namespace udapter {

enum class Nonlinearity { kRelu, kTanh };

std::string to_string(Nonlinearity f);
Nonlinearity parse_nonlinearity(const std::string& name);

struct AdapterConfig {
  std::size_t reduction_factor = 16;
  Nonlinearity nonlinearity = Nonlinearity::kRelu;
  bool biases = true;
};

// floor(hidden / reduction_factor), at least 1.
std::size_t bottleneck_dim(std::size_t hidden, std::size_t reduction_factor);

// Bottleneck adapter for one layer:
//   out = up · f(down · h_in + down_bias) + up_bias + residual
struct AdapterWeights {
  Tensor down_weight;  // [d, h]
  Tensor down_bias;    // [d]; undefined without biases
  Tensor up_weight;    // [h, d]
  Tensor up_bias;      // [h]; undefined without biases
  Nonlinearity nonlinearity = Nonlinearity::kRelu;

  std::size_t hidden() const { return down_weight.dim(1); }
  std::size_t bottleneck() const { return down_weight.dim(0); }
  bool has_biases() const { return down_bias.defined(); }
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool trainable);
  AdapterWeights clone() const;
};

// Glorot-uniform down projection; zero up projection and biases, so a fresh
// adapter is the identity on the residual stream.
AdapterWeights init_adapter(std::size_t hidden, std::size_t bottleneck, Nonlinearity f, bool biases,
                            Rng& rng);
AdapterWeights init_adapter(std::size_t hidden, const AdapterConfig& config, Rng& rng);

Tensor adapter_forward(const Tensor& h_in, const Tensor& residual, const AdapterWeights& w);

// One adapter per layer for a single role (domain, task or joint). A layer
// holding std::nullopt has its adapter removed.
struct AdapterSet {
  std::string role;
  std::vector<std::optional<AdapterWeights>> layers;
  bool trainable = false;

  std::size_t num_layers() const { return layers.size(); }
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool flag);
  AdapterSet clone() const;
  // Removes adapters from the 1-based inclusive layer span.
  void remove_span(std::size_t first, std::size_t last);
  std::optional<std::size_t> bottleneck() const;
};

AdapterSet init_adapter_set(const std::string& role, std::size_t num_layers, std::size_t hidden,
                            const AdapterConfig& config, Rng& rng, bool trainable = true);

// Ordered per-layer slots built from adapter sets in application order, e.g.
// [domain (frozen), task (trainable)].
class AdapterStack {
 public:
  explicit AdapterStack(std::size_t num_layers) : num_layers_(num_layers) {}

  // ContractError on layer-count mismatch or a second trainable set.
  void push(AdapterSet set);

  std::size_t num_layers() const noexcept { return num_layers_; }
  const std::vector<AdapterSet>& sets() const noexcept { return sets_; }
  std::vector<AdapterSet>& sets() noexcept { return sets_; }
  const AdapterSet* find(const std::string& role) const;

  // Adapters present at `layer` (0-based), in application order.
  std::vector<const AdapterWeights*> slot(std::size_t layer) const;
  std::vector<Tensor> trainable_parameters() const;
  std::size_t trainable_parameter_count() const;
  std::size_t parameter_count() const;
  void freeze_all();

 private:
  std::size_t num_layers_;
  std::vector<AdapterSet> sets_;
};

// First adapter consumes (h_l, r_l); each later one consumes (previous, r_l).
// An empty slot returns r_l. When `outputs` is given it receives every
// adapter's output in order.
Tensor stack_apply(const std::vector<const AdapterWeights*>& slot, const Tensor& h_l, const Tensor& r_l,
                   std::vector<Tensor>* outputs = nullptr);

// Closed-form adapter parameter count: 2dh + d + h (2dh without biases).
std::size_t adapter_parameter_count(std::size_t hidden, std::size_t bottleneck, bool biases);

WeightFile adapter_set_to_file(const AdapterSet& set);
// Validates against the encoder's hidden size and layer count.
AdapterSet adapter_set_from_file(const WeightFile& file, std::size_t hidden, std::size_t num_layers);

void save_adapters(const AdapterSet& set, const std::filesystem::path& path);
AdapterSet load_adapters(const std::filesystem::path& path, std::size_t hidden, std::size_t num_layers);

// Frozen [domain, task] inference stack from two checkpoints. The two sets
// must share hidden size, layer count and bottleneck; FormatError otherwise.
AdapterStack compose(const std::filesystem::path& domain_path, const std::filesystem::path& task_path,
                     std::size_t hidden, std::size_t num_layers);

}  // namespace udapter
