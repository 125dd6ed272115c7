// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "udapter/rng.hpp"

namespace udapter {

// Class names in index order.
struct LabelMap {
  std::vector<std::string> names;

  std::size_t size() const { return names.size(); }
  std::optional<std::size_t> find(const std::string& name) const;
  // Appends unseen names.
  std::size_t intern(const std::string& name);

  nlohmann::json to_json() const;
  static LabelMap from_json(const nlohmann::json& j);
};

struct TextRecord {
  std::string text;
  std::optional<std::size_t> label;
};

struct TextDataset {
  std::string domain;
  std::string split;
  std::vector<TextRecord> records;
  LabelMap labels;

  std::size_t size() const { return records.size(); }
  bool labeled() const;
  std::vector<std::size_t> label_indices() const;  // DataError when any record is unlabeled
};

// Labeled rows are "label<TAB>text", unlabeled rows "text". Blank lines are
// skipped. Labels are interned into `labels` when given (so splits share one
// map), else into a fresh first-appearance map. With `frozen_labels` an
// unseen label is a DataError.
TextDataset load_tsv(const std::filesystem::path& path, bool labeled, LabelMap* labels = nullptr,
                     bool frozen_labels = false);
void write_tsv(const TextDataset& dataset, const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes);

// ASCII lowercase, Unicode whitespace split, ASCII punctuation trimmed from
// both ends, hashed into [4, vocab_size). BOS first, at most max_seq ids.
std::vector<std::uint32_t> tokenize(std::string_view text, std::size_t vocab_size, std::size_t max_seq);

struct VectorDataset {
  std::size_t width = 0;
  std::vector<std::vector<double>> rows;
  std::vector<std::optional<std::size_t>> row_labels;
  LabelMap labels;

  std::size_t size() const { return rows.size(); }
};

// Headerless CSV "f_0,...,f_{w-1}[,label]".
VectorDataset load_vector_csv(const std::filesystem::path& path, bool labeled, LabelMap* labels = nullptr,
                              bool frozen_labels = false);

// Model-ready inputs: token sequences or vectors already projected to the
// hidden width (fed as length-1 sequences).
struct EncodedDataset {
  std::string domain;
  std::vector<std::vector<std::uint32_t>> tokens;
  std::vector<std::vector<double>> vectors;
  std::vector<std::size_t> labels;  // empty when unlabeled
  LabelMap label_map;

  std::size_t size() const { return vectors.empty() ? tokens.size() : vectors.size(); }
  bool is_vector() const { return !vectors.empty(); }
  bool labeled() const { return !labels.empty(); }
  EncodedDataset subset(const std::vector<std::size_t>& rows) const;
};

EncodedDataset encode_text(const TextDataset& dataset, std::size_t vocab_size, std::size_t max_seq,
                           bool keep_labels = true);
// Projection matrix [hidden, width] is Glorot-uniform from `seed`.
EncodedDataset encode_vectors(const VectorDataset& dataset, std::size_t hidden, std::uint64_t seed,
                              bool keep_labels = true);

struct BatchPair {
  std::vector<std::size_t> source;
  std::vector<std::size_t> target;
};

// Equal-size index batches from two datasets. Each epoch reshuffles both
// sides; the shorter side wraps around with a fresh shuffle.
class PairedBatches {
 public:
  PairedBatches(std::size_t source_size, std::size_t target_size, std::size_t batch_size, Rng& rng);

  std::size_t batches_per_epoch() const { return batches_; }
  std::vector<BatchPair> epoch();

 private:
  std::vector<std::size_t> draw(std::vector<std::size_t>& order, std::size_t& cursor, std::size_t count);

  std::size_t source_size_;
  std::size_t target_size_;
  std::size_t batch_size_;
  std::size_t batches_;
  Rng* rng_;
};

// Shuffled single-dataset batches; the last one holds the remainder.
std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t size, std::size_t batch_size, Rng& rng);

struct SynthShiftConfig {
  double shift = 0.8;
  std::size_t num_classes = 2;
  std::size_t core_words = 60;
  std::size_t keywords_per_class = 6;
  std::size_t marker_words = 6;
  std::size_t train_size = 240;
  std::size_t dev_size = 120;
  std::size_t test_size = 120;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthShiftConfig from_json(const nlohmann::json& j);
};

struct SynthSplits {
  TextDataset train;
  TextDataset dev;
  TextDataset test;
};

struct SynthData {
  SynthSplits source;
  SynthSplits target;  // labels kept for evaluation only
};

SynthData synth_generate(const SynthShiftConfig& config);

// File names used when a synthetic pair is materialized.
struct SynthFiles {
  std::filesystem::path source_train, source_dev, source_test;
  std::filesystem::path target_train;  // unlabeled
  std::filesystem::path target_dev, target_test;  // labeled, eval only
};

SynthFiles synth_file_names(const std::filesystem::path& dir);
SynthFiles write_synth(const SynthData& data, const std::filesystem::path& dir);

}  // namespace udapter
