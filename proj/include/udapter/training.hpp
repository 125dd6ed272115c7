// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "udapter/adapters.hpp"
#include "udapter/data.hpp"
#include "udapter/divergence.hpp"
#include "udapter/encoder.hpp"
#include "udapter/optim.hpp"

namespace udapter {

enum class TrainMode { kPretrain, kDomain, kTask, kJoint };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

struct TrainPlan {
  TrainMode mode = TrainMode::kTask;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 0.0;
  double gamma = 10.0;
  std::uint64_t seed = 0;
  DivergenceSpec divergence;
  Pooling pooling = Pooling::kFirstToken;
  std::size_t eval_every = 1;  // epochs; 0 disables dev evaluation
  // Fixes the joint-mode mixing weight instead of the schedule.
  std::optional<double> lambda_override;
  // 1-based layers that get no adapter (ablation retraining).
  std::vector<std::size_t> removed_layers;

  void validate() const;
  AdamWOptions optimizer() const { return {.lr = lr, .weight_decay = weight_decay}; }
};

// 2 / (1 + exp(-gamma * p)) - 1 with p clamped to [0, 1].
double lambda_schedule(double progress, double gamma);

struct ClassifierHead {
  Tensor weight;  // [classes, hidden]
  Tensor bias;    // [classes]
  LabelMap labels;

  // Zero weights and bias; ConfigError for fewer than 2 classes.
  static ClassifierHead zeros(std::size_t classes, std::size_t hidden, LabelMap labels = {});

  std::size_t num_classes() const { return weight.dim(0); }
  std::size_t hidden() const { return weight.dim(1); }
  std::vector<Tensor> parameters() const { return {weight, bias}; }
  void set_trainable(bool trainable);
  Tensor logits(const Tensor& pooled) const;
  std::uint64_t checksum() const;
  ClassifierHead clone() const;
};

WeightFile head_to_file(const ClassifierHead& head);
ClassifierHead head_from_file(const WeightFile& file, std::size_t hidden);
void save_head(const ClassifierHead& head, const std::filesystem::path& path);
ClassifierHead load_head(const std::filesystem::path& path, std::size_t hidden);

struct Metrics {
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  // Empty for classes absent from both labels and predictions.
  std::vector<std::optional<double>> per_class_f1;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

  nlohmann::json to_json() const;
};

// DataError on empty input or mismatched lengths; IndexError on labels or
// predictions outside [0, num_classes).
Metrics compute_metrics(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                        std::size_t num_classes);

// Runs rows of a dataset through the encoder in one batch.
EncodeResult encode_rows(const EncodedDataset& data, std::span<const std::size_t> rows, const EncoderWeights& backbone,
                         const AdapterStack* adapters, Pooling pooling);

std::vector<std::size_t> predict(const EncodedDataset& data, const EncoderWeights& backbone,
                                 const AdapterStack* adapters, const ClassifierHead& head, Pooling pooling,
                                 std::size_t batch_size = 64);

// DataError when empty or unlabeled; DimensionError when the head's class
// count differs from the dataset's label map.
Metrics evaluate(const EncodedDataset& data, const EncoderWeights& backbone, const AdapterStack* adapters,
                 const ClassifierHead& head, Pooling pooling, std::size_t batch_size = 64);

// JSON-lines sink. Without a path, records are only kept in memory.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& path, bool append = false);

  void write(const nlohmann::json& record);
  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::unique_ptr<std::ofstream> out_;
  std::vector<nlohmann::json> records_;
};

struct StepRecord {
  std::optional<double> lambda;  // joint mode only
  double loss = 0.0;
  std::optional<double> task_loss;
  std::optional<double> div_loss;
  std::vector<double> layer_div;

  nlohmann::json to_json(std::size_t epoch, std::size_t step) const;
};

// Single optimizer steps on one batch; the stack's trainable set, and the
// head where used, are updated through `optimizer`.
StepRecord domain_step(const EncoderWeights& backbone, const AdapterStack& stack, AdamW& optimizer,
                       const EncodedDataset& source, std::span<const std::size_t> source_rows,
                       const EncodedDataset& target, std::span<const std::size_t> target_rows,
                       const DivergenceSpec& spec, Pooling pooling);
StepRecord task_step(const EncoderWeights& backbone, const AdapterStack& stack, const ClassifierHead& head,
                     AdamW& optimizer, const EncodedDataset& source, std::span<const std::size_t> rows,
                     Pooling pooling);
StepRecord joint_step(const EncoderWeights& backbone, const AdapterStack& stack, const ClassifierHead& head,
                      AdamW& optimizer, const EncodedDataset& source, std::span<const std::size_t> source_rows,
                      const EncodedDataset& target, std::span<const std::size_t> target_rows, double lambda,
                      const DivergenceSpec& spec, Pooling pooling);

// Divergence between the full datasets, per selected layer.
LayerDivergence dataset_divergence(const EncodedDataset& source, const EncodedDataset& target,
                                   const EncoderWeights& backbone, const AdapterStack* adapters,
                                   const DivergenceSpec& spec, Pooling pooling);

struct EvalSets {
  const EncodedDataset* source_dev = nullptr;
  const EncodedDataset* target_dev = nullptr;  // reported only, never used for selection
};

struct TrainResult {
  AdapterSet adapters;
  std::optional<ClassifierHead> head;
  std::size_t steps = 0;
  std::optional<std::size_t> best_epoch;  // epoch of the retained checkpoint (0 = before training)
  std::optional<double> best_source_dev_f1;
  std::vector<double> initial_layer_div;
  std::vector<double> final_layer_div;
  bool collapsed = false;
};

// Minimizes the layer divergence between source and target with a fresh
// trainable domain adapter per layer. Returns the final weights.
TrainResult train_domain_adapter(const EncoderWeights& backbone, const EncodedDataset& source,
                                 const EncodedDataset& target, const TrainPlan& plan, const AdapterConfig& adapter,
                                 MetricsLog* log = nullptr);

// Cross-entropy on pooled outputs of the [domain (frozen), task] stack; with
// no domain adapters this is the task-only baseline. Keeps the checkpoint
// with the best source-dev macro-F1.
TrainResult train_task_adapter(const EncoderWeights& backbone, const AdapterSet* domain,
                               const EncodedDataset& source, const TrainPlan& plan, const AdapterConfig& adapter,
                               const EvalSets& eval = {}, MetricsLog* log = nullptr);

// lambda * task + (1 - lambda) * divergence on one fresh adapter per layer.
TrainResult train_joint(const EncoderWeights& backbone, const EncodedDataset& source, const EncodedDataset& target,
                        const TrainPlan& plan, const AdapterConfig& adapter, const EvalSets& eval = {},
                        MetricsLog* log = nullptr);

struct ExportResult {
  std::size_t rows = 0;
  std::vector<std::size_t> layers;
  std::vector<double> per_layer;
};

// CSV "layer,domain,dim_0,...": one row per example and selected layer with
// the pooled adapted representation. Per-layer divergences go to
// <path>.divergence.json.
ExportResult export_embeddings(const EncoderWeights& backbone, const AdapterStack* adapters,
                               const EncodedDataset& source, const EncodedDataset& target,
                               const DivergenceSpec& spec, Pooling pooling, const std::filesystem::path& path);

}  // namespace udapter
