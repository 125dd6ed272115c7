// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "udapter/adapters.hpp"
#include "udapter/rng.hpp"
#include "udapter/tensor.hpp"
#include "udapter/weights_io.hpp"

namespace udapter {

// Reserved token ids.
inline constexpr std::uint32_t kPadId = 0;
inline constexpr std::uint32_t kMaskId = 1;
inline constexpr std::uint32_t kUnkId = 2;
inline constexpr std::uint32_t kBosId = 3;
inline constexpr std::uint32_t kFirstWordId = 4;

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ff = 128;
  std::size_t vocab = 4096;
  std::size_t max_seq = 64;

  // ConfigError on any violated constraint.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct LayerWeights {
  Tensor query_weight, query_bias;
  Tensor key_weight, key_bias;
  Tensor value_weight, value_bias;
  Tensor output_weight, output_bias;
  Tensor norm1_gain, norm1_bias;
  Tensor ff_in_weight, ff_in_bias;
  Tensor ff_out_weight, ff_out_bias;
  Tensor norm2_gain, norm2_bias;
};

// Post-norm transformer encoder backbone with learned position embeddings and,
// for pretraining only, a masked-token output bias (the output projection is
// tied to the token embedding).
struct EncoderWeights {
  EncoderConfig config;
  Tensor token_embedding;     // [vocab, hidden]
  Tensor position_embedding;  // [max_seq, hidden]
  Tensor mlm_bias;            // [vocab]
  std::vector<LayerWeights> layers;

  static EncoderWeights init(const EncoderConfig& config, Rng& rng);

  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  void set_frozen(bool frozen);
  std::uint64_t checksum() const;
  EncoderWeights clone() const;
};

WeightFile encoder_to_file(const EncoderWeights& weights);
EncoderWeights encoder_from_file(const WeightFile& file);
void save_encoder(const EncoderWeights& weights, const std::filesystem::path& path);
// Loaded weights are frozen.
EncoderWeights load_encoder(const std::filesystem::path& path);

// Right-padded id matrix; mask is 1 for real tokens.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::uint8_t> mask;

  static TokenBatch from_sequences(std::span<const std::vector<std::uint32_t>> sequences);
};

enum class Pooling { kFirstToken, kMean };

std::string to_string(Pooling p);
Pooling parse_pooling(const std::string& name);

// Per-layer intermediate representations, each [batch, seq, hidden].
struct LayerTaps {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint8_t> mask;     // empty = all positions valid
  std::vector<Tensor> attention_norm; // h_l: attention Add & Norm
  std::vector<Tensor> feed_forward;   // r_l: feed-forward output
  std::vector<Tensor> adapted;        // first adapter's output (r_l when the slot is empty)
  std::vector<Tensor> output;         // layer output after the final Add & Norm

  std::size_t num_layers() const { return output.size(); }
  const Tensor& final_hidden() const { return output.back(); }
};

struct EncodeResult {
  LayerTaps taps;
  Tensor pooled;  // [batch, hidden] from the last layer
};

enum class Tap { kAttentionNorm, kFeedForward, kAdapted, kOutput };

// Vector per sequence from a 0-based layer. IndexError when out of range.
Tensor pool(const LayerTaps& taps, std::size_t layer, Pooling strategy, Tap tap = Tap::kOutput);
Tensor pool_tensor(const Tensor& tap, std::span<const std::uint8_t> mask, Pooling strategy);

// DataError on ids >= vocab or sequences longer than max_seq.
EncodeResult encode(const TokenBatch& tokens, const EncoderWeights& weights, const AdapterStack* adapters = nullptr,
                    Pooling pooling = Pooling::kFirstToken);

// Runs the layers on an already-embedded input [batch, seq, hidden].
EncodeResult encode_embedded(const Tensor& embedded, std::span<const std::uint8_t> mask,
                             const EncoderWeights& weights, const AdapterStack* adapters = nullptr,
                             Pooling pooling = Pooling::kFirstToken);

// One layer: self-attention, Add & Norm, feed-forward, adapter hook, Add & Norm.
Tensor self_attention(const Tensor& x, const LayerWeights& layer, std::size_t heads,
                      std::span<const std::uint8_t> mask = {});

struct PretrainOptions {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double mask_prob = 0.15;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  EncoderWeights weights;
  std::vector<double> epoch_losses;  // mean training loss of each epoch
};

// Masked-token pretraining of every backbone tensor: non-special positions
// are replaced by the MASK id with probability mask_prob (at least one per
// sequence) and predicted through the tied output head. DataError on an
// empty corpus. The returned weights are frozen.
PretrainResult pretrain_backbone(std::span<const std::vector<std::uint32_t>> corpus, const EncoderConfig& config,
                                 const PretrainOptions& options);

// Draws a masked copy of a sequence; returns masked positions.
std::vector<std::size_t> mask_sequence(std::vector<std::uint32_t>& ids, double mask_prob, Rng& rng);

// Mean masked-token loss over the corpus with masks drawn from `mask_seed`.
double masked_lm_loss(const EncoderWeights& weights, std::span<const std::vector<std::uint32_t>> corpus,
                      std::uint64_t mask_seed, double mask_prob = 0.15, std::size_t batch_size = 64);

}  // namespace udapter
