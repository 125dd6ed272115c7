// SPDX-License-Identifier: Apache-2.0
#include "udapter/encoder.hpp"

#include <algorithm>
#include <numeric>

#include "udapter/error.hpp"
#include "udapter/init.hpp"
#include "udapter/ops.hpp"
#include "udapter/optim.hpp"

namespace udapter {

void EncoderConfig::validate() const {
  if (layers < 1 || hidden < 1 || heads < 1 || ff < 1 || max_seq < 1) {
    throw ConfigError("encoder dimensions must all be >= 1");
  }
  if (hidden % heads != 0) {
    throw ConfigError("encoder hidden " + std::to_string(hidden) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (vocab <= kFirstWordId) throw ConfigError("encoder vocab must exceed the 4 reserved ids");
}

std::string to_string(Pooling p) { return p == Pooling::kFirstToken ? "first_token" : "mean"; }

Pooling parse_pooling(const std::string& name) {
  if (name == "first_token") return Pooling::kFirstToken;
  if (name == "mean") return Pooling::kMean;
  throw ConfigError("unknown pooling '" + name + "' (expected first_token or mean)");
}

EncoderWeights EncoderWeights::init(const EncoderConfig& config, Rng& rng) {
  config.validate();
  const std::size_t h = config.hidden;
  EncoderWeights w;
  w.config = config;
  w.token_embedding = glorot_uniform(config.vocab, h, rng);
  w.position_embedding = glorot_uniform(config.max_seq, h, rng);
  w.mlm_bias = Tensor::zeros({config.vocab}, true);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights lw;
    lw.query_weight = glorot_uniform(h, h, rng);
    lw.query_bias = Tensor::zeros({h}, true);
    lw.key_weight = glorot_uniform(h, h, rng);
    lw.key_bias = Tensor::zeros({h}, true);
    lw.value_weight = glorot_uniform(h, h, rng);
    lw.value_bias = Tensor::zeros({h}, true);
    lw.output_weight = glorot_uniform(h, h, rng);
    lw.output_bias = Tensor::zeros({h}, true);
    lw.norm1_gain = Tensor::full({h}, 1.0, true);
    lw.norm1_bias = Tensor::zeros({h}, true);
    lw.ff_in_weight = glorot_uniform(config.ff, h, rng);
    lw.ff_in_bias = Tensor::zeros({config.ff}, true);
    lw.ff_out_weight = glorot_uniform(h, config.ff, rng);
    lw.ff_out_bias = Tensor::zeros({h}, true);
    lw.norm2_gain = Tensor::full({h}, 1.0, true);
    lw.norm2_bias = Tensor::zeros({h}, true);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

std::vector<std::pair<std::string, Tensor>> EncoderWeights::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out{
      {"embeddings.token", token_embedding},
      {"embeddings.position", position_embedding},
      {"mlm.bias", mlm_bias},
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lw = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.insert(out.end(), {
                              {p + "attention.query.weight", lw.query_weight},
                              {p + "attention.query.bias", lw.query_bias},
                              {p + "attention.key.weight", lw.key_weight},
                              {p + "attention.key.bias", lw.key_bias},
                              {p + "attention.value.weight", lw.value_weight},
                              {p + "attention.value.bias", lw.value_bias},
                              {p + "attention.output.weight", lw.output_weight},
                              {p + "attention.output.bias", lw.output_bias},
                              {p + "norm1.gain", lw.norm1_gain},
                              {p + "norm1.bias", lw.norm1_bias},
                              {p + "ff.in.weight", lw.ff_in_weight},
                              {p + "ff.in.bias", lw.ff_in_bias},
                              {p + "ff.out.weight", lw.ff_out_weight},
                              {p + "ff.out.bias", lw.ff_out_bias},
                              {p + "norm2.gain", lw.norm2_gain},
                              {p + "norm2.bias", lw.norm2_bias},
                          });
  }
  return out;
}

std::vector<Tensor> EncoderWeights::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

std::size_t EncoderWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void EncoderWeights::set_frozen(bool frozen) {
  for (auto& t : parameters()) t.set_requires_grad(!frozen);
}

std::uint64_t EncoderWeights::checksum() const {
  const auto params = parameters();
  return udapter::checksum(params);
}

EncoderWeights EncoderWeights::clone() const {
  EncoderWeights out = *this;
  out.token_embedding = token_embedding.clone();
  out.position_embedding = position_embedding.clone();
  out.mlm_bias = mlm_bias.clone();
  for (auto& lw : out.layers) {
    for (Tensor* t : {&lw.query_weight, &lw.query_bias, &lw.key_weight, &lw.key_bias, &lw.value_weight,
                      &lw.value_bias, &lw.output_weight, &lw.output_bias, &lw.norm1_gain, &lw.norm1_bias,
                      &lw.ff_in_weight, &lw.ff_in_bias, &lw.ff_out_weight, &lw.ff_out_bias, &lw.norm2_gain,
                      &lw.norm2_bias}) {
      *t = t->clone();
    }
  }
  return out;
}

WeightFile encoder_to_file(const EncoderWeights& weights) {
  WeightFile file;
  const auto& c = weights.config;
  file.metadata = {{"kind", "encoder"},
                   {"config",
                    {{"L", c.layers},
                     {"h", c.hidden},
                     {"heads", c.heads},
                     {"ff", c.ff},
                     {"vocab", c.vocab},
                     {"max_seq", c.max_seq}}}};
  for (const auto& [name, t] : weights.named_tensors()) file.add(name, t);
  return file;
}

EncoderWeights encoder_from_file(const WeightFile& file) {
  if (file.metadata.value("kind", "") != "encoder") throw FormatError("container does not hold an encoder");
  EncoderConfig c;
  try {
    const auto& jc = file.metadata.at("config");
    c.layers = jc.at("L").get<std::size_t>();
    c.hidden = jc.at("h").get<std::size_t>();
    c.heads = jc.at("heads").get<std::size_t>();
    c.ff = jc.at("ff").get<std::size_t>();
    c.vocab = jc.at("vocab").get<std::size_t>();
    c.max_seq = jc.at("max_seq").get<std::size_t>();
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed encoder metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid encoder config in container: ") + e.what());
  }
  // Initialization only provides the expected shapes; values come from the file.
  Rng rng(0);
  EncoderWeights w = EncoderWeights::init(c, rng);
  auto named = w.named_tensors();
  for (auto& [name, t] : named) {
    const Tensor loaded = file.tensor(name, t.shape());
    auto dst = t.mutable_values();
    std::copy(loaded.values().begin(), loaded.values().end(), dst.begin());
  }
  w.set_frozen(true);
  return w;
}

void save_encoder(const EncoderWeights& weights, const std::filesystem::path& path) {
  save_weights(encoder_to_file(weights), path);
}

EncoderWeights load_encoder(const std::filesystem::path& path) { return encoder_from_file(load_weights(path)); }

TokenBatch TokenBatch::from_sequences(std::span<const std::vector<std::uint32_t>> sequences) {
  TokenBatch tb;
  tb.batch = sequences.size();
  for (const auto& s : sequences) tb.seq = std::max(tb.seq, s.size());
  tb.ids.assign(tb.batch * tb.seq, kPadId);
  tb.mask.assign(tb.batch * tb.seq, 0);
  for (std::size_t b = 0; b < tb.batch; ++b) {
    std::copy(sequences[b].begin(), sequences[b].end(), tb.ids.begin() + static_cast<std::ptrdiff_t>(b * tb.seq));
    std::fill_n(tb.mask.begin() + static_cast<std::ptrdiff_t>(b * tb.seq), sequences[b].size(), 1);
  }
  return tb;
}

Tensor pool_tensor(const Tensor& tap, std::span<const std::uint8_t> mask, Pooling strategy) {
  if (tap.rank() != 3) throw DimensionError("pool: expected [batch, seq, hidden], got " + shape_to_string(tap.shape()));
  if (strategy == Pooling::kMean) return masked_mean(tap, mask);
  const std::size_t batch = tap.dim(0), seq = tap.dim(1);
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * seq;
  return gather_rows(tap, rows);
}

Tensor pool(const LayerTaps& taps, std::size_t layer, Pooling strategy, Tap tap) {
  if (layer >= taps.num_layers()) {
    throw IndexError("pool: layer " + std::to_string(layer) + " out of range for " +
                     std::to_string(taps.num_layers()) + " layers");
  }
  const Tensor* source = nullptr;
  switch (tap) {
    case Tap::kAttentionNorm: source = &taps.attention_norm[layer]; break;
    case Tap::kFeedForward: source = &taps.feed_forward[layer]; break;
    case Tap::kAdapted: source = &taps.adapted[layer]; break;
    case Tap::kOutput: source = &taps.output[layer]; break;
  }
  return pool_tensor(*source, taps.mask, strategy);
}

Tensor self_attention(const Tensor& x, const LayerWeights& layer, std::size_t heads,
                      std::span<const std::uint8_t> mask) {
  const Tensor q = linear(x, layer.query_weight, layer.query_bias);
  const Tensor k = linear(x, layer.key_weight, layer.key_bias);
  const Tensor v = linear(x, layer.value_weight, layer.value_bias);
  return linear(attention(q, k, v, heads, mask), layer.output_weight, layer.output_bias);
}

EncodeResult encode_embedded(const Tensor& embedded, std::span<const std::uint8_t> mask,
                             const EncoderWeights& weights, const AdapterStack* adapters, Pooling pooling) {
  const auto& c = weights.config;
  if (embedded.rank() != 3 || embedded.dim(2) != c.hidden) {
    throw DimensionError("encode: embedded input " + shape_to_string(embedded.shape()) + " for hidden " +
                         std::to_string(c.hidden));
  }
  if (adapters && adapters->num_layers() != c.layers) {
    throw ContractError("adapter stack has " + std::to_string(adapters->num_layers()) + " slots, encoder has " +
                        std::to_string(c.layers) + " layers");
  }
  EncodeResult result;
  auto& taps = result.taps;
  taps.batch = embedded.dim(0);
  taps.seq = embedded.dim(1);
  taps.mask.assign(mask.begin(), mask.end());
  Tensor x = embedded;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto& lw = weights.layers[l];
    const Tensor h_l = layer_norm(add(x, self_attention(x, lw, c.heads, mask)), lw.norm1_gain, lw.norm1_bias);
    const Tensor r_l = linear(gelu(linear(h_l, lw.ff_in_weight, lw.ff_in_bias)), lw.ff_out_weight, lw.ff_out_bias);
    std::vector<Tensor> per_adapter;
    const Tensor adapted = adapters ? stack_apply(adapters->slot(l), h_l, r_l, &per_adapter) : r_l;
    x = layer_norm(add(h_l, adapted), lw.norm2_gain, lw.norm2_bias);
    taps.attention_norm.push_back(h_l);
    taps.feed_forward.push_back(r_l);
    taps.adapted.push_back(per_adapter.empty() ? r_l : per_adapter.front());
    taps.output.push_back(x);
  }
  result.pooled = pool_tensor(x, taps.mask, pooling);
  return result;
}

EncodeResult encode(const TokenBatch& tokens, const EncoderWeights& weights, const AdapterStack* adapters,
                    Pooling pooling) {
  const auto& c = weights.config;
  if (tokens.seq > c.max_seq) {
    throw DataError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq " +
                    std::to_string(c.max_seq));
  }
  if (tokens.batch == 0 || tokens.seq == 0) throw DataError("encode: empty token batch");
  for (auto id : tokens.ids) {
    if (id >= c.vocab) {
      throw DataError("token id " + std::to_string(id) + " >= vocab " + std::to_string(c.vocab));
    }
  }
  const Tensor tok = embedding(weights.token_embedding, tokens.ids);
  std::vector<std::uint32_t> positions(tokens.batch * tokens.seq);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::uint32_t>(i % tokens.seq);
  const Tensor pos = embedding(weights.position_embedding, positions);
  const Tensor embedded = reshape(add(tok, pos), {tokens.batch, tokens.seq, c.hidden});
  return encode_embedded(embedded, tokens.mask, weights, adapters, pooling);
}

std::vector<std::size_t> mask_sequence(std::vector<std::uint32_t>& ids, double mask_prob, Rng& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= kFirstWordId || ids[i] == kUnkId) candidates.push_back(i);
  }
  std::vector<std::size_t> masked;
  for (auto i : candidates)
    if (rng.bernoulli(mask_prob)) masked.push_back(i);
  if (masked.empty() && !candidates.empty()) masked.push_back(candidates[rng.below(candidates.size())]);
  for (auto i : masked) ids[i] = kMaskId;
  return masked;
}

namespace {

// Masked-LM loss of one batch of sequences; masks are drawn from rng.
Tensor mlm_batch_loss(const EncoderWeights& w, std::span<const std::vector<std::uint32_t>> batch, double mask_prob,
                      Rng& rng, std::size_t* masked_count) {
  std::vector<std::vector<std::uint32_t>> inputs(batch.begin(), batch.end());
  std::vector<std::pair<std::size_t, std::size_t>> masked;  // (row, position)
  std::vector<std::size_t> targets;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    const auto original = inputs[b];
    for (auto pos : mask_sequence(inputs[b], mask_prob, rng)) {
      masked.emplace_back(b, pos);
      targets.push_back(original[pos]);
    }
  }
  *masked_count = targets.size();
  if (targets.empty()) return {};
  const auto tokens = TokenBatch::from_sequences(inputs);
  const auto enc = encode(tokens, w, nullptr);
  std::vector<std::size_t> rows;
  rows.reserve(masked.size());
  for (auto [b, pos] : masked) rows.push_back(b * tokens.seq + pos);
  const Tensor hidden = gather_rows(enc.taps.final_hidden(), rows);
  const Tensor logits = linear(hidden, w.token_embedding, w.mlm_bias);
  return softmax_cross_entropy(logits, targets);
}

}  // namespace

PretrainResult pretrain_backbone(std::span<const std::vector<std::uint32_t>> corpus, const EncoderConfig& config,
                                 const PretrainOptions& options) {
  if (corpus.empty()) throw DataError("pretraining corpus is empty");
  if (options.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  Rng init_rng(options.seed);
  PretrainResult result{EncoderWeights::init(config, init_rng), {}};
  auto& w = result.weights;
  w.set_frozen(false);
  Rng rng(options.seed ^ 0x6D6C6D5F70726574ULL);
  AdamW optimizer(w.parameters(), {.lr = options.lr, .weight_decay = options.weight_decay});
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<std::vector<std::uint32_t>> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(corpus[order[i]]);
      std::size_t masked = 0;
      const Tensor loss = mlm_batch_loss(w, batch, options.mask_prob, rng, &masked);
      if (masked == 0) continue;
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      total += loss.item();
      ++batches;
    }
    result.epoch_losses.push_back(batches ? total / static_cast<double>(batches) : 0.0);
  }
  w.set_frozen(true);
  return result;
}

double masked_lm_loss(const EncoderWeights& weights, std::span<const std::vector<std::uint32_t>> corpus,
                      std::uint64_t mask_seed, double mask_prob, std::size_t batch_size) {
  if (corpus.empty()) throw DataError("masked_lm_loss: empty corpus");
  Rng rng(mask_seed);
  double weighted = 0.0;
  std::size_t total_masked = 0;
  for (std::size_t start = 0; start < corpus.size(); start += batch_size) {
    const std::size_t end = std::min(corpus.size(), start + batch_size);
    std::size_t masked = 0;
    const Tensor loss = mlm_batch_loss(weights, corpus.subspan(start, end - start), mask_prob, rng, &masked);
    if (masked == 0) continue;
    weighted += loss.item() * static_cast<double>(masked);
    total_masked += masked;
  }
  return total_masked ? weighted / static_cast<double>(total_masked) : 0.0;
}

}  // namespace udapter
