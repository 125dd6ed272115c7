// SPDX-License-Identifier: Apache-2.0
#include "udapter/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "udapter/error.hpp"
#include "udapter/ops.hpp"

namespace udapter {

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kPretrain: return "pretrain";
    case TrainMode::kDomain: return "domain";
    case TrainMode::kTask: return "task";
    case TrainMode::kJoint: return "joint";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& name) {
  if (name == "pretrain") return TrainMode::kPretrain;
  if (name == "domain") return TrainMode::kDomain;
  if (name == "task") return TrainMode::kTask;
  if (name == "joint") return TrainMode::kJoint;
  throw ConfigError("unknown train mode '" + name + "'");
}

void TrainPlan::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("train.gamma must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be nonnegative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (lambda_override && !(*lambda_override >= 0.0 && *lambda_override <= 1.0)) {
    throw ConfigError("lambda override must lie in [0, 1]");
  }
  for (auto l : removed_layers) {
    if (l < 1) throw ConfigError("removed layer indices are 1-based");
  }
}

double lambda_schedule(double progress, double gamma) {
  const double p = std::clamp(progress, 0.0, 1.0);
  return 2.0 / (1.0 + std::exp(-gamma * p)) - 1.0;
}

ClassifierHead ClassifierHead::zeros(std::size_t classes, std::size_t hidden, LabelMap labels) {
  if (classes < 2) throw ConfigError("classifier needs at least 2 classes, got " + std::to_string(classes));
  if (!labels.names.empty() && labels.size() != classes) {
    throw DimensionError("label map has " + std::to_string(labels.size()) + " names for " +
                         std::to_string(classes) + " classes");
  }
  return {Tensor::zeros({classes, hidden}, true), Tensor::zeros({classes}, true), std::move(labels)};
}

void ClassifierHead::set_trainable(bool trainable) {
  weight.set_requires_grad(trainable);
  bias.set_requires_grad(trainable);
}

Tensor ClassifierHead::logits(const Tensor& pooled) const { return linear(pooled, weight, bias); }

std::uint64_t ClassifierHead::checksum() const {
  const std::vector<Tensor> t{weight, bias};
  return udapter::checksum(t);
}

ClassifierHead ClassifierHead::clone() const { return {weight.clone(), bias.clone(), labels}; }

WeightFile head_to_file(const ClassifierHead& head) {
  WeightFile file;
  file.metadata = {{"kind", "head"},
                   {"classes", head.num_classes()},
                   {"hidden", head.hidden()},
                   {"labels", head.labels.to_json()}};
  file.add("head.weight", head.weight);
  file.add("head.bias", head.bias);
  return file;
}

ClassifierHead head_from_file(const WeightFile& file, std::size_t hidden) {
  const auto& meta = file.metadata;
  if (meta.value("kind", "") != "head") throw FormatError("container does not hold a classifier head");
  std::size_t classes = 0, stored_hidden = 0;
  LabelMap labels;
  try {
    classes = meta.at("classes").get<std::size_t>();
    stored_hidden = meta.at("hidden").get<std::size_t>();
    labels = LabelMap::from_json(meta.at("labels"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad head metadata: ") + e.what());
  }
  if (stored_hidden != hidden) {
    throw FormatError("head hidden size " + std::to_string(stored_hidden) + " does not match encoder hidden " +
                      std::to_string(hidden));
  }
  return {file.tensor("head.weight", {classes, hidden}), file.tensor("head.bias", {classes}), std::move(labels)};
}

void save_head(const ClassifierHead& head, const std::filesystem::path& path) {
  save_weights(head_to_file(head), path);
}

ClassifierHead load_head(const std::filesystem::path& path, std::size_t hidden) {
  return head_from_file(load_weights(path), hidden);
}

nlohmann::json Metrics::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& f : per_class_f1) per.push_back(f ? nlohmann::json(*f) : nlohmann::json(nullptr));
  return {{"macro_f1", macro_f1}, {"accuracy", accuracy}, {"per_class_f1", per}, {"confusion", confusion}};
}

Metrics compute_metrics(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                        std::size_t num_classes) {
  if (labels.empty()) throw DataError("metrics on an empty prediction set");
  if (labels.size() != predictions.size()) throw DataError("labels and predictions differ in length");
  Metrics m;
  m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes || predictions[i] >= num_classes) {
      throw IndexError("class index outside [0, " + std::to_string(num_classes) + ")");
    }
    ++m.confusion[labels[i]][predictions[i]];
    correct += labels[i] == predictions[i];
  }
  m.accuracy = double(correct) / double(labels.size());
  double total = 0.0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t tp = m.confusion[c][c], fp = 0, fn = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      if (k == c) continue;
      fp += m.confusion[k][c];
      fn += m.confusion[c][k];
    }
    if (tp + fp + fn == 0) {
      m.per_class_f1.emplace_back();
      continue;
    }
    const double f1 = 2.0 * double(tp) / double(2 * tp + fp + fn);
    m.per_class_f1.emplace_back(f1);
    total += f1;
    ++included;
  }
  m.macro_f1 = total / double(included);
  return m;
}

EncodeResult encode_rows(const EncodedDataset& data, std::span<const std::size_t> rows, const EncoderWeights& backbone,
                         const AdapterStack* adapters, Pooling pooling) {
  if (rows.empty()) throw DataError("encode_rows: empty batch");
  if (data.is_vector()) {
    const std::size_t h = backbone.config.hidden;
    std::vector<double> v;
    v.reserve(rows.size() * h);
    for (auto r : rows) {
      const auto& row = data.vectors.at(r);
      if (row.size() != h) throw DimensionError("vector input width does not match the encoder hidden size");
      v.insert(v.end(), row.begin(), row.end());
    }
    const auto embedded = Tensor::from_values({rows.size(), 1, h}, std::move(v));
    return encode_embedded(embedded, {}, backbone, adapters, pooling);
  }
  std::vector<std::vector<std::uint32_t>> seqs;
  seqs.reserve(rows.size());
  for (auto r : rows) seqs.push_back(data.tokens.at(r));
  return encode(TokenBatch::from_sequences(seqs), backbone, adapters, pooling);
}

namespace {

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  const auto v = logits.values();
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = v.subspan(i * c, c);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::vector<std::size_t> iota_rows(std::size_t first, std::size_t last) {
  std::vector<std::size_t> r;
  for (std::size_t i = first; i < last; ++i) r.push_back(i);
  return r;
}

std::vector<std::size_t> pick(const std::vector<std::size_t>& labels, std::span<const std::size_t> rows) {
  std::vector<std::size_t> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels.at(r));
  return out;
}

}  // namespace

std::vector<std::size_t> predict(const EncodedDataset& data, const EncoderWeights& backbone,
                                 const AdapterStack* adapters, const ClassifierHead& head, Pooling pooling,
                                 std::size_t batch_size) {
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const auto rows = iota_rows(b, std::min(data.size(), b + batch_size));
    const auto enc = encode_rows(data, rows, backbone, adapters, pooling);
    const auto pred = argmax_rows(head.logits(enc.pooled));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

Metrics evaluate(const EncodedDataset& data, const EncoderWeights& backbone, const AdapterStack* adapters,
                 const ClassifierHead& head, Pooling pooling, std::size_t batch_size) {
  if (data.size() == 0) throw DataError("evaluate: empty dataset");
  if (!data.labeled()) throw DataError("evaluate: dataset '" + data.domain + "' has no labels");
  if (data.label_map.size() != 0 && data.label_map.size() != head.num_classes()) {
    throw DimensionError("head predicts " + std::to_string(head.num_classes()) + " classes, dataset has " +
                         std::to_string(data.label_map.size()));
  }
  const auto pred = predict(data, backbone, adapters, head, pooling, batch_size);
  return compute_metrics(data.labels, pred, head.num_classes());
}

MetricsLog::MetricsLog(const std::filesystem::path& path, bool append)
    : out_(std::make_unique<std::ofstream>(path, append ? std::ios::app : std::ios::trunc)) {
  if (!*out_) throw IoError("cannot open metrics log " + path.string());
}

void MetricsLog::write(const nlohmann::json& record) {
  records_.push_back(record);
  if (out_) {
    *out_ << record.dump() << '\n';
    out_->flush();
    if (!*out_) throw IoError("failed writing metrics log");
  }
}

nlohmann::json StepRecord::to_json(std::size_t epoch, std::size_t step) const {
  nlohmann::json j{{"kind", "step"}, {"epoch", epoch}, {"step", step}};
  if (lambda) j["lambda"] = *lambda;
  j["loss"] = loss;
  if (task_loss) j["task_loss"] = *task_loss;
  if (div_loss) j["div_loss"] = *div_loss;
  if (!layer_div.empty()) j["layer_div"] = layer_div;
  return j;
}

StepRecord domain_step(const EncoderWeights& backbone, const AdapterStack& stack, AdamW& optimizer,
                       const EncodedDataset& source, std::span<const std::size_t> source_rows,
                       const EncodedDataset& target, std::span<const std::size_t> target_rows,
                       const DivergenceSpec& spec, Pooling pooling) {
  optimizer.zero_grad();
  const auto src = encode_rows(source, source_rows, backbone, &stack, pooling);
  const auto trg = encode_rows(target, target_rows, backbone, &stack, pooling);
  const auto div = layer_divergence(src.taps, trg.taps, pooling, spec);
  div.total.backward();
  optimizer.step();
  StepRecord rec;
  rec.loss = div.total.item();
  rec.div_loss = rec.loss;
  rec.layer_div = div.per_layer;
  return rec;
}

StepRecord task_step(const EncoderWeights& backbone, const AdapterStack& stack, const ClassifierHead& head,
                     AdamW& optimizer, const EncodedDataset& source, std::span<const std::size_t> rows,
                     Pooling pooling) {
  if (!source.labeled()) throw DataError("task training needs labeled source data");
  optimizer.zero_grad();
  const auto enc = encode_rows(source, rows, backbone, &stack, pooling);
  const auto labels = pick(source.labels, rows);
  const auto loss = softmax_cross_entropy(head.logits(enc.pooled), labels);
  loss.backward();
  optimizer.step();
  StepRecord rec;
  rec.loss = loss.item();
  rec.task_loss = rec.loss;
  return rec;
}

StepRecord joint_step(const EncoderWeights& backbone, const AdapterStack& stack, const ClassifierHead& head,
                      AdamW& optimizer, const EncodedDataset& source, std::span<const std::size_t> source_rows,
                      const EncodedDataset& target, std::span<const std::size_t> target_rows, double lambda,
                      const DivergenceSpec& spec, Pooling pooling) {
  if (!source.labeled()) throw DataError("joint training needs labeled source data");
  optimizer.zero_grad();
  const auto src = encode_rows(source, source_rows, backbone, &stack, pooling);
  const auto trg = encode_rows(target, target_rows, backbone, &stack, pooling);
  const auto labels = pick(source.labels, source_rows);
  const auto task = softmax_cross_entropy(head.logits(src.pooled), labels);
  const auto div = layer_divergence(src.taps, trg.taps, pooling, spec);
  const auto loss = add(scale(task, lambda), scale(div.total, 1.0 - lambda));
  loss.backward();
  optimizer.step();
  StepRecord rec;
  rec.lambda = lambda;
  rec.loss = loss.item();
  rec.task_loss = task.item();
  rec.div_loss = div.total.item();
  rec.layer_div = div.per_layer;
  return rec;
}

namespace {

// Pooled adapted representation of every row, per layer: [layer][row * h + k].
std::vector<std::vector<double>> collect_pooled(const EncodedDataset& data, const EncoderWeights& backbone,
                                                const AdapterStack* adapters, Pooling pooling, Tap tap,
                                                std::size_t batch_size = 64) {
  const std::size_t L = backbone.config.layers;
  std::vector<std::vector<double>> out(L);
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const auto rows = iota_rows(b, std::min(data.size(), b + batch_size));
    const auto enc = encode_rows(data, rows, backbone, adapters, pooling);
    for (std::size_t l = 0; l < L; ++l) {
      const auto p = pool(enc.taps, l, pooling, tap);
      out[l].insert(out[l].end(), p.values().begin(), p.values().end());
    }
  }
  return out;
}

double max_column_variance(const std::vector<double>& rows, std::size_t h) {
  const std::size_t n = rows.size() / h;
  double worst = 0.0;
  for (std::size_t k = 0; k < h; ++k) {
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += rows[i * h + k];
    mu /= double(n);
    for (std::size_t i = 0; i < n; ++i) var += (rows[i * h + k] - mu) * (rows[i * h + k] - mu);
    worst = std::max(worst, var / double(n));
  }
  return worst;
}

LayerDivergence divergence_of(const std::vector<std::vector<double>>& src, const std::vector<std::vector<double>>& trg,
                              std::size_t h, const DivergenceSpec& spec) {
  LayerDivergence out;
  out.layers = spec.resolved_layers(src.size());
  for (auto l : out.layers) {
    const auto x = Tensor::from_values({src[l - 1].size() / h, h}, src[l - 1]);
    const auto y = Tensor::from_values({trg[l - 1].size() / h, h}, trg[l - 1]);
    const auto d = divergence(x, y, spec);
    out.per_layer.push_back(d.item());
    out.total = out.total.defined() ? add(out.total, d) : d;
  }
  return out;
}

Rng init_rng(const TrainPlan& plan) { return Rng(plan.seed); }

AdapterSet fresh_adapters(const std::string& role, const EncoderConfig& cfg, const AdapterConfig& adapter,
                          const TrainPlan& plan, Rng& rng) {
  auto set = init_adapter_set(role, cfg.layers, cfg.hidden, adapter, rng, true);
  for (auto l : plan.removed_layers) {
    if (l > cfg.layers) throw ConfigError("removed layer " + std::to_string(l) + " exceeds the layer count");
    set.remove_span(l, l);
  }
  if (set.parameters().empty()) throw ConfigError("every adapter layer was removed");
  return set;
}
Rng batch_rng(const TrainPlan& plan) { return Rng(plan.seed ^ 0x6a09e667f3bcc909ULL); }

void check_source(const EncodedDataset& source, const char* what) {
  if (source.size() == 0) throw DataError(std::string(what) + ": empty source data");
  if (!source.labeled()) throw DataError(std::string(what) + ": source data must be labeled");
  const auto classes = source.label_map.size();
  for (auto l : source.labels) {
    if (l >= classes) throw DataError(std::string(what) + ": label index outside the label map");
  }
}

struct BestCheckpoint {
  std::optional<double> f1;
  std::size_t epoch = 0;
  std::optional<AdapterSet> adapters;
  std::optional<ClassifierHead> head;
};

// Dev evaluation at the end of an epoch; returns the source-dev macro-F1.
std::optional<double> epoch_eval(const TrainPlan& plan, std::size_t epoch, std::size_t step, const EvalSets& eval,
                                 const EncoderWeights& backbone, const AdapterStack& stack,
                                 const ClassifierHead& head, MetricsLog* log) {
  if (plan.eval_every == 0 || (epoch % plan.eval_every != 0 && epoch != plan.epochs)) return std::nullopt;
  nlohmann::json rec{{"kind", "eval"}, {"epoch", epoch}, {"step", step}};
  std::optional<double> f1;
  if (eval.source_dev) {
    const auto m = evaluate(*eval.source_dev, backbone, &stack, head, plan.pooling);
    rec["source_dev"] = {{"macro_f1", m.macro_f1}, {"accuracy", m.accuracy}};
    f1 = m.macro_f1;
  }
  if (eval.target_dev) {
    const auto m = evaluate(*eval.target_dev, backbone, &stack, head, plan.pooling);
    rec["target_dev"] = {{"macro_f1", m.macro_f1}, {"accuracy", m.accuracy}};
  }
  if (!eval.source_dev && !eval.target_dev) return std::nullopt;
  if (log) log->write(rec);
  spdlog::info("epoch {} eval {}", epoch, rec.dump());
  return f1;
}

void keep_if_better(BestCheckpoint& best, std::optional<double> f1, std::size_t epoch, const AdapterSet& adapters,
                    const ClassifierHead& head) {
  if (!f1 || (best.f1 && *f1 <= *best.f1)) return;
  best.f1 = f1;
  best.epoch = epoch;
  best.adapters = adapters.clone();
  best.head = head.clone();
}

void finish_supervised(TrainResult& result, BestCheckpoint& best, AdapterSet adapters, ClassifierHead head) {
  if (best.adapters) {
    result.adapters = std::move(*best.adapters);
    result.head = std::move(*best.head);
    result.best_epoch = best.epoch;
    result.best_source_dev_f1 = best.f1;
  } else {
    result.adapters = std::move(adapters);
    result.head = std::move(head);
  }
  result.adapters.set_trainable(false);
  result.head->set_trainable(false);
}

}  // namespace

LayerDivergence dataset_divergence(const EncodedDataset& source, const EncodedDataset& target,
                                   const EncoderWeights& backbone, const AdapterStack* adapters,
                                   const DivergenceSpec& spec, Pooling pooling) {
  const auto src = collect_pooled(source, backbone, adapters, pooling, Tap::kAdapted);
  const auto trg = collect_pooled(target, backbone, adapters, pooling, Tap::kAdapted);
  return divergence_of(src, trg, backbone.config.hidden, spec);
}

TrainResult train_domain_adapter(const EncoderWeights& backbone, const EncodedDataset& source,
                                 const EncodedDataset& target, const TrainPlan& plan, const AdapterConfig& adapter,
                                 MetricsLog* log) {
  plan.validate();
  if (source.size() == 0 || target.size() == 0) throw DataError("domain training needs source and target data");
  const auto& cfg = backbone.config;
  plan.divergence.validate(cfg.layers);
  auto irng = init_rng(plan);
  auto brng = batch_rng(plan);
  AdapterStack stack(cfg.layers);
  stack.push(fresh_adapters("domain", cfg, adapter, plan, irng));
  AdamW opt(stack.trainable_parameters(), plan.optimizer());

  TrainResult result;
  result.initial_layer_div = dataset_divergence(source, target, backbone, &stack, plan.divergence, plan.pooling)
                                 .per_layer;
  PairedBatches batches(source.size(), target.size(), plan.batch_size, brng);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (const auto& pair : batches.epoch()) {
      const auto rec =
          domain_step(backbone, stack, opt, source, pair.source, target, pair.target, plan.divergence, plan.pooling);
      if (log) log->write(rec.to_json(epoch, step));
      epoch_loss += rec.loss;
      ++step;
    }
    spdlog::info("domain epoch {}/{} mean divergence {:.6g}", epoch, plan.epochs,
                 epoch_loss / double(batches.batches_per_epoch()));
  }
  result.steps = step;

  const auto src = collect_pooled(source, backbone, &stack, plan.pooling, Tap::kAdapted);
  const auto trg = collect_pooled(target, backbone, &stack, plan.pooling, Tap::kAdapted);
  const auto final_div = divergence_of(src, trg, cfg.hidden, plan.divergence);
  result.final_layer_div = final_div.per_layer;
  if (log) {
    log->write({{"kind", "divergence"},
                {"step", step},
                {"layers", final_div.layers},
                {"initial_layer_div", result.initial_layer_div},
                {"final_layer_div", result.final_layer_div}});
  }
  const bool tiny = std::all_of(final_div.per_layer.begin(), final_div.per_layer.end(),
                                [](double d) { return std::abs(d) < 1e-9; });
  const bool flat = std::all_of(final_div.layers.begin(), final_div.layers.end(), [&](std::size_t l) {
    return max_column_variance(src[l - 1], cfg.hidden) < 1e-10 && max_column_variance(trg[l - 1], cfg.hidden) < 1e-10;
  });
  if (tiny && flat && plan.epochs > 0) {
    result.collapsed = true;
    spdlog::warn("domain adapters collapsed: divergence is zero and pooled representations are constant");
  }
  result.adapters = std::move(stack.sets()[0]);
  result.adapters.set_trainable(false);
  return result;
}

TrainResult train_task_adapter(const EncoderWeights& backbone, const AdapterSet* domain,
                               const EncodedDataset& source, const TrainPlan& plan, const AdapterConfig& adapter,
                               const EvalSets& eval, MetricsLog* log) {
  plan.validate();
  check_source(source, "task training");
  const auto& cfg = backbone.config;
  auto irng = init_rng(plan);
  auto brng = batch_rng(plan);
  AdapterStack stack(cfg.layers);
  if (domain) {
    auto frozen = domain->clone();
    frozen.set_trainable(false);
    stack.push(std::move(frozen));
  }
  stack.push(fresh_adapters("task", cfg, adapter, plan, irng));
  auto head = ClassifierHead::zeros(source.label_map.size(), cfg.hidden, source.label_map);
  auto params = stack.trainable_parameters();
  for (const auto& p : head.parameters()) params.push_back(p);
  AdamW opt(params, plan.optimizer());

  TrainResult result;
  BestCheckpoint best;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    double epoch_loss = 0.0;
    const auto batches = shuffled_batches(source.size(), plan.batch_size, brng);
    for (const auto& rows : batches) {
      const auto rec = task_step(backbone, stack, head, opt, source, rows, plan.pooling);
      if (log) log->write(rec.to_json(epoch, step));
      epoch_loss += rec.loss;
      ++step;
    }
    spdlog::info("task epoch {}/{} mean loss {:.6g}", epoch, plan.epochs, epoch_loss / double(batches.size()));
    keep_if_better(best, epoch_eval(plan, epoch, step, eval, backbone, stack, head, log), epoch, stack.sets().back(),
                   head);
  }
  result.steps = step;
  finish_supervised(result, best, std::move(stack.sets().back()), std::move(head));
  return result;
}

TrainResult train_joint(const EncoderWeights& backbone, const EncodedDataset& source, const EncodedDataset& target,
                        const TrainPlan& plan, const AdapterConfig& adapter, const EvalSets& eval,
                        MetricsLog* log) {
  plan.validate();
  check_source(source, "joint training");
  if (target.size() == 0) throw DataError("joint training: empty target data");
  const auto& cfg = backbone.config;
  plan.divergence.validate(cfg.layers);
  auto irng = init_rng(plan);
  auto brng = batch_rng(plan);
  AdapterStack stack(cfg.layers);
  stack.push(fresh_adapters("joint", cfg, adapter, plan, irng));
  auto head = ClassifierHead::zeros(source.label_map.size(), cfg.hidden, source.label_map);
  auto params = stack.trainable_parameters();
  for (const auto& p : head.parameters()) params.push_back(p);
  AdamW opt(params, plan.optimizer());

  TrainResult result;
  BestCheckpoint best;
  PairedBatches batches(source.size(), target.size(), plan.batch_size, brng);
  const double total_steps = double(plan.epochs * batches.batches_per_epoch());
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (const auto& pair : batches.epoch()) {
      const double lambda = plan.lambda_override ? *plan.lambda_override
                                                 : lambda_schedule(double(step) / total_steps, plan.gamma);
      const auto rec = joint_step(backbone, stack, head, opt, source, pair.source, target, pair.target, lambda,
                                  plan.divergence, plan.pooling);
      if (log) log->write(rec.to_json(epoch, step));
      epoch_loss += rec.loss;
      ++step;
    }
    spdlog::info("joint epoch {}/{} mean loss {:.6g}", epoch, plan.epochs,
                 epoch_loss / double(batches.batches_per_epoch()));
    keep_if_better(best, epoch_eval(plan, epoch, step, eval, backbone, stack, head, log), epoch, stack.sets()[0],
                   head);
  }
  result.steps = step;
  finish_supervised(result, best, std::move(stack.sets()[0]), std::move(head));
  return result;
}

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ExportResult export_embeddings(const EncoderWeights& backbone, const AdapterStack* adapters,
                               const EncodedDataset& source, const EncodedDataset& target,
                               const DivergenceSpec& spec, Pooling pooling, const std::filesystem::path& path) {
  const std::size_t h = backbone.config.hidden;
  const auto layers = spec.resolved_layers(backbone.config.layers);
  const auto src = collect_pooled(source, backbone, adapters, pooling, Tap::kAdapted);
  const auto trg = collect_pooled(target, backbone, adapters, pooling, Tap::kAdapted);

  std::ostringstream csv;
  csv << "layer,domain";
  for (std::size_t k = 0; k < h; ++k) csv << ",dim_" << k;
  csv << '\n';
  ExportResult result;
  result.layers = layers;
  for (auto l : layers) {
    for (const auto& [name, rows] : {std::pair{"src", &src[l - 1]}, std::pair{"trg", &trg[l - 1]}}) {
      for (std::size_t i = 0; i < rows->size() / h; ++i) {
        csv << l << ',' << name;
        for (std::size_t k = 0; k < h; ++k) csv << ',' << format_double((*rows)[i * h + k]);
        csv << '\n';
        ++result.rows;
      }
    }
  }
  result.per_layer = divergence_of(src, trg, h, spec).per_layer;
  write_text_atomic(path, csv.str());
  const nlohmann::json summary{{"divergence", to_string(spec.kind)},
                               {"pooling", to_string(pooling)},
                               {"layers", result.layers},
                               {"per_layer", result.per_layer}};
  auto side = path;
  side += ".divergence.json";
  write_text_atomic(side, summary.dump(2) + "\n");
  return result;
}

}  // namespace udapter
