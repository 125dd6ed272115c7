// SPDX-License-Identifier: Apache-2.0
#include "udapter/adapters.hpp"

#include "udapter/error.hpp"
#include "udapter/init.hpp"
#include "udapter/ops.hpp"

namespace udapter {

std::string to_string(Nonlinearity f) { return f == Nonlinearity::kRelu ? "relu" : "tanh"; }

Nonlinearity parse_nonlinearity(const std::string& name) {
  if (name == "relu") return Nonlinearity::kRelu;
  if (name == "tanh") return Nonlinearity::kTanh;
  throw ConfigError("unknown nonlinearity '" + name + "' (expected relu or tanh)");
}

std::size_t bottleneck_dim(std::size_t hidden, std::size_t reduction_factor) {
  if (reduction_factor < 1) throw ConfigError("reduction_factor must be >= 1");
  return std::max<std::size_t>(1, hidden / reduction_factor);
}

std::size_t adapter_parameter_count(std::size_t hidden, std::size_t bottleneck, bool biases) {
  return 2 * bottleneck * hidden + (biases ? bottleneck + hidden : 0);
}

std::vector<Tensor> AdapterWeights::parameters() const {
  std::vector<Tensor> out{down_weight};
  if (down_bias.defined()) out.push_back(down_bias);
  out.push_back(up_weight);
  if (up_bias.defined()) out.push_back(up_bias);
  return out;
}

std::size_t AdapterWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

void AdapterWeights::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.set_requires_grad(trainable);
}

AdapterWeights AdapterWeights::clone() const {
  AdapterWeights w;
  w.down_weight = down_weight.clone();
  if (down_bias.defined()) w.down_bias = down_bias.clone();
  w.up_weight = up_weight.clone();
  if (up_bias.defined()) w.up_bias = up_bias.clone();
  w.nonlinearity = nonlinearity;
  return w;
}

AdapterWeights init_adapter(std::size_t hidden, std::size_t bottleneck, Nonlinearity f, bool biases,
                            Rng& rng) {
  if (bottleneck < 1) throw ConfigError("adapter bottleneck must be >= 1");
  if (bottleneck > hidden) {
    throw ConfigError("adapter bottleneck " + std::to_string(bottleneck) + " exceeds hidden " +
                      std::to_string(hidden));
  }
  AdapterWeights w;
  w.down_weight = glorot_uniform(bottleneck, hidden, rng);
  w.up_weight = Tensor::zeros({hidden, bottleneck}, true);
  if (biases) {
    w.down_bias = Tensor::zeros({bottleneck}, true);
    w.up_bias = Tensor::zeros({hidden}, true);
  }
  w.nonlinearity = f;
  return w;
}

AdapterWeights init_adapter(std::size_t hidden, const AdapterConfig& config, Rng& rng) {
  return init_adapter(hidden, bottleneck_dim(hidden, config.reduction_factor), config.nonlinearity,
                      config.biases, rng);
}

Tensor adapter_forward(const Tensor& h_in, const Tensor& residual, const AdapterWeights& w) {
  if (h_in.shape() != residual.shape()) {
    throw DimensionError("adapter: input " + shape_to_string(h_in.shape()) + " vs residual " +
                         shape_to_string(residual.shape()));
  }
  Tensor z = linear(h_in, w.down_weight, w.down_bias);
  z = w.nonlinearity == Nonlinearity::kRelu ? relu(z) : tanh(z);
  return add(linear(z, w.up_weight, w.up_bias), residual);
}

std::vector<Tensor> AdapterSet::parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers) {
    if (!layer) continue;
    for (auto& p : layer->parameters()) out.push_back(p);
  }
  return out;
}

std::size_t AdapterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers)
    if (layer) n += layer->parameter_count();
  return n;
}

void AdapterSet::set_trainable(bool flag) {
  trainable = flag;
  for (auto& layer : layers)
    if (layer) layer->set_trainable(flag);
}

AdapterSet AdapterSet::clone() const {
  AdapterSet out{role, {}, trainable};
  for (const auto& layer : layers) out.layers.push_back(layer ? std::optional(layer->clone()) : std::nullopt);
  return out;
}

void AdapterSet::remove_span(std::size_t first, std::size_t last) {
  if (first < 1 || last > layers.size() || first > last) {
    throw ConfigError("layer span " + std::to_string(first) + "-" + std::to_string(last) +
                      " outside 1.." + std::to_string(layers.size()));
  }
  for (std::size_t l = first; l <= last; ++l) layers[l - 1].reset();
}

std::optional<std::size_t> AdapterSet::bottleneck() const {
  for (const auto& layer : layers)
    if (layer) return layer->bottleneck();
  return std::nullopt;
}

AdapterSet init_adapter_set(const std::string& role, std::size_t num_layers, std::size_t hidden,
                            const AdapterConfig& config, Rng& rng, bool trainable) {
  AdapterSet set{role, {}, trainable};
  for (std::size_t l = 0; l < num_layers; ++l) {
    auto w = init_adapter(hidden, config, rng);
    w.set_trainable(trainable);
    set.layers.emplace_back(std::move(w));
  }
  return set;
}

void AdapterStack::push(AdapterSet set) {
  if (set.num_layers() != num_layers_) {
    throw ContractError("adapter set '" + set.role + "' has " + std::to_string(set.num_layers()) +
                        " layers, stack has " + std::to_string(num_layers_));
  }
  if (set.trainable) {
    for (const auto& s : sets_) {
      if (s.trainable) throw ContractError("only one trainable adapter set may be stacked at a time");
    }
  }
  sets_.push_back(std::move(set));
}

const AdapterSet* AdapterStack::find(const std::string& role) const {
  for (const auto& s : sets_)
    if (s.role == role) return &s;
  return nullptr;
}

std::vector<const AdapterWeights*> AdapterStack::slot(std::size_t layer) const {
  std::vector<const AdapterWeights*> out;
  for (const auto& s : sets_) {
    if (layer < s.layers.size() && s.layers[layer]) out.push_back(&*s.layers[layer]);
  }
  return out;
}

std::vector<Tensor> AdapterStack::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const auto& s : sets_) {
    if (!s.trainable) continue;
    for (auto& p : s.parameters()) out.push_back(p);
  }
  return out;
}

std::size_t AdapterStack::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : sets_)
    if (s.trainable) n += s.parameter_count();
  return n;
}

std::size_t AdapterStack::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : sets_) n += s.parameter_count();
  return n;
}

void AdapterStack::freeze_all() {
  for (auto& s : sets_) s.set_trainable(false);
}

Tensor stack_apply(const std::vector<const AdapterWeights*>& slot, const Tensor& h_l, const Tensor& r_l,
                   std::vector<Tensor>* outputs) {
  if (slot.empty()) return r_l;
  Tensor current = adapter_forward(h_l, r_l, *slot.front());
  if (outputs) outputs->push_back(current);
  for (std::size_t i = 1; i < slot.size(); ++i) {
    current = adapter_forward(current, r_l, *slot[i]);
    if (outputs) outputs->push_back(current);
  }
  return current;
}

namespace {

std::string tensor_prefix(std::size_t layer) { return "layers." + std::to_string(layer) + "."; }

}  // namespace

WeightFile adapter_set_to_file(const AdapterSet& set) {
  WeightFile file;
  const auto d = set.bottleneck();
  std::vector<std::size_t> present;
  std::size_t hidden = 0;
  bool biases = true;
  Nonlinearity f = Nonlinearity::kRelu;
  for (std::size_t l = 0; l < set.layers.size(); ++l) {
    const auto& layer = set.layers[l];
    if (!layer) continue;
    present.push_back(l);
    hidden = layer->hidden();
    biases = layer->has_biases();
    f = layer->nonlinearity;
    const auto prefix = tensor_prefix(l);
    file.add(prefix + "down.weight", layer->down_weight);
    if (layer->has_biases()) file.add(prefix + "down.bias", layer->down_bias);
    file.add(prefix + "up.weight", layer->up_weight);
    if (layer->has_biases()) file.add(prefix + "up.bias", layer->up_bias);
  }
  file.metadata = {{"kind", "adapters"},
                   {"role", set.role},
                   {"num_layers", set.layers.size()},
                   {"present_layers", present},
                   {"hidden", hidden},
                   {"bottleneck", d.value_or(0)},
                   {"biases", biases},
                   {"nonlinearity", to_string(f)}};
  return file;
}

AdapterSet adapter_set_from_file(const WeightFile& file, std::size_t hidden, std::size_t num_layers) {
  const auto& meta = file.metadata;
  if (meta.value("kind", "") != "adapters") throw FormatError("container does not hold adapters");
  try {
    const auto stored_layers = meta.at("num_layers").get<std::size_t>();
    if (stored_layers != num_layers) {
      throw FormatError("adapter container has " + std::to_string(stored_layers) + " layers, encoder has " +
                        std::to_string(num_layers));
    }
    const auto d = meta.at("bottleneck").get<std::size_t>();
    const bool biases = meta.at("biases").get<bool>();
    const auto f = parse_nonlinearity(meta.at("nonlinearity").get<std::string>());
    AdapterSet set{meta.at("role").get<std::string>(), std::vector<std::optional<AdapterWeights>>(num_layers),
                   false};
    for (auto l : meta.at("present_layers").get<std::vector<std::size_t>>()) {
      if (l >= num_layers) throw FormatError("adapter layer index " + std::to_string(l) + " out of range");
      const auto prefix = tensor_prefix(l);
      AdapterWeights w;
      w.nonlinearity = f;
      w.down_weight = file.tensor(prefix + "down.weight", {d, hidden});
      w.up_weight = file.tensor(prefix + "up.weight", {hidden, d});
      if (biases) {
        w.down_bias = file.tensor(prefix + "down.bias", {d});
        w.up_bias = file.tensor(prefix + "up.bias", {hidden});
      }
      set.layers[l] = std::move(w);
    }
    return set;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed adapter metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
}

void save_adapters(const AdapterSet& set, const std::filesystem::path& path) {
  save_weights(adapter_set_to_file(set), path);
}

AdapterSet load_adapters(const std::filesystem::path& path, std::size_t hidden, std::size_t num_layers) {
  return adapter_set_from_file(load_weights(path), hidden, num_layers);
}

AdapterStack compose(const std::filesystem::path& domain_path, const std::filesystem::path& task_path,
                     std::size_t hidden, std::size_t num_layers) {
  auto domain = load_adapters(domain_path, hidden, num_layers);
  auto task = load_adapters(task_path, hidden, num_layers);
  if (domain.bottleneck() && task.bottleneck() && *domain.bottleneck() != *task.bottleneck()) {
    throw FormatError("incompatible adapters: domain bottleneck " + std::to_string(*domain.bottleneck()) +
                      " vs task bottleneck " + std::to_string(*task.bottleneck()));
  }
  AdapterStack stack(num_layers);
  domain.set_trainable(false);
  task.set_trainable(false);
  stack.push(std::move(domain));
  stack.push(std::move(task));
  return stack;
}

}  // namespace udapter
