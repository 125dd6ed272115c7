// SPDX-License-Identifier: Apache-2.0
#include "cli/commands.hpp"

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "cli/config.hpp"
#include "udapter/adapters.hpp"
#include "udapter/data.hpp"
#include "udapter/encoder.hpp"
#include "udapter/training.hpp"
#include "udapter/weights_io.hpp"

namespace udapter::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
      return 2;
    case ErrorKind::kData:
    case ErrorKind::kFormat:
    case ErrorKind::kDimension:
    case ErrorKind::kIndex:
    case ErrorKind::kIo:
      return 3;
    case ErrorKind::kDependency:
      return 4;
    case ErrorKind::kContract:
      break;
  }
  return 1;
}

namespace {

const char* const kSplitKeys[] = {"source_train", "source_dev", "source_test",
                                  "target_train", "target_dev", "target_test"};

std::string git_blob_sha1(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw IoError("cannot allocate a digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &length) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw IoError("SHA-1 digest failed for " + path.string());
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < length; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

json mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= double(xs.size());
  json out{{"mean", mean}, {"n", xs.size()}};
  if (xs.size() < 2) {
    out["std"] = nullptr;
    return out;
  }
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  out["std"] = std::sqrt(ss / double(xs.size() - 1));
  return out;
}

bool is_eval_split(const std::string& key) { return key != "source_train" && key != "target_train"; }

// Supplies model-ready splits from configured files or the synthetic generator.
class DataSource {
 public:
  explicit DataSource(const RunConfig& config) : config_(config) {}

  bool has(const std::string& key) const { return config_.data.synth || config_.data.path(key).has_value(); }

  // Checks configuration and file presence without reading.
  void require(const std::string& key, const std::string& command) const {
    if (!has(key)) throw ConfigError(command + " needs data." + key);
    check(key);
  }

  void check(const std::string& key) const {
    if (config_.data.synth) return;
    const auto p = config_.data.path(key);
    if (p && !fs::is_regular_file(*p)) throw ConfigError("data." + key + ": no such file " + p->string());
  }

  std::vector<fs::path> files() const {
    std::vector<fs::path> out;
    for (const auto& [key, p] : config_.data.paths) out.push_back(p);
    return out;
  }

  // Text datasets (synthetic splits or TSV files); labels interned into `labels`.
  TextDataset text(const std::string& key, LabelMap* labels) {
    const bool labeled = key != "target_train";
    if (config_.data.synth) {
      const SynthData& d = synth();
      const SynthSplits& half = key.rfind("source", 0) == 0 ? d.source : d.target;
      const std::string split = key.substr(key.find('_') + 1);
      TextDataset out = split == "train" ? half.train : split == "dev" ? half.dev : half.test;
      if (labels && labeled) relabel(out, *labels);
      if (!labeled) {
        for (auto& r : out.records) r.label.reset();
      }
      return out;
    }
    return load_tsv(*config_.data.path(key), labeled, labeled ? labels : nullptr);
  }

  EncodedDataset encoded(const std::string& key, LabelMap& labels, const EncoderConfig& encoder) {
    return encode_file(key, config_.data.path(key).value_or(fs::path()), labels, encoder);
  }

  // An explicit labeled file in the configured format.
  EncodedDataset encode_file(const std::string& key, const fs::path& path, LabelMap& labels,
                             const EncoderConfig& encoder) {
    const bool labeled = key != "target_train";
    EncodedDataset out;
    if (config_.data.format == InputFormat::kVector) {
      const VectorDataset v = load_vector_csv(path, labeled, labeled ? &labels : nullptr);
      out = encode_vectors(v, encoder.hidden, config_.data.projection_seed, labeled);
    } else {
      const TextDataset t = path.empty() ? text(key, &labels) : load_tsv(path, labeled, labeled ? &labels : nullptr);
      out = encode_text(t, encoder.vocab, encoder.max_seq, labeled);
    }
    out.domain = key.substr(0, key.find('_'));
    return out;
  }

  const SynthData& synth() {
    if (!synth_) synth_ = synth_generate(*config_.data.synth);
    return *synth_;
  }

 private:
  // Maps generator labels onto an existing label map by name.
  static void relabel(TextDataset& ds, LabelMap& labels) {
    for (auto& r : ds.records) {
      if (r.label) r.label = labels.intern(ds.labels.names.at(*r.label));
    }
    ds.labels = labels;
  }

  const RunConfig& config_;
  std::optional<SynthData> synth_;
};

// One command invocation: resolved config, seeds, run directory and the
// manifest bookkeeping shared by every subcommand.
class Run {
 public:
  Run(const Options& options, RunConfig config, bool needs_run_dir)
      : options_(options), config_(std::move(config)), data_(config_) {
    if (options_.seeds && *options_.seeds == 0) throw ConfigError("--seeds must be at least 1");
    const std::uint64_t base = options_.seed.value_or(config_.train.seed);
    for (std::size_t k = 0; k < options_.seeds.value_or(1); ++k) seeds_.push_back(base + k);
    if (options_.task_only) config_.task_only = true;
    config_.train.seed = base;
    if (options_.run_dir) config_.run_dir = *options_.run_dir;
    if (needs_run_dir && config_.run_dir.empty()) throw ConfigError("no run directory: set output.run_dir or --run-dir");
    if (!config_.run_dir.empty()) check_run_dir();
  }

  RunConfig& config() { return config_; }
  DataSource& data() { return data_; }
  const std::vector<std::uint64_t>& seeds() const { return seeds_; }
  bool has_run_dir() const { return !config_.run_dir.empty(); }

  // Artifact name with the per-seed suffix used by multi-seed runs.
  std::string name(const std::string& stem, const std::string& ext, std::uint64_t seed) const {
    return options_.seeds ? stem + ".seed" + std::to_string(seed) + ext : stem + ext;
  }

  fs::path path(const std::string& file) {
    artifacts_.insert(file);
    return config_.run_dir / file;
  }

  std::optional<fs::path> checkpoint(const std::string& key, std::uint64_t seed) const {
    std::string pattern;
    if (auto it = options_.checkpoints.find(key); it != options_.checkpoints.end()) pattern = it->second;
    else if (auto jt = config_.checkpoints.find(key); jt != config_.checkpoints.end()) pattern = jt->second;
    if (pattern.empty()) return std::nullopt;
    return fs::path(expand_seed(pattern, seed));
  }

  fs::path require_checkpoint(const std::string& key, std::uint64_t seed) const {
    const auto p = checkpoint(key, seed);
    if (!p) throw DependencyError(options_.command + " needs a " + key + " checkpoint (checkpoints." + key + " or --" + key + ")");
    if (!fs::is_regular_file(*p)) throw DependencyError("missing " + key + " checkpoint: " + p->string());
    return *p;
  }

  // Checks every seed's checkpoint up front.
  void require_all(const std::string& key) const {
    for (auto s : seeds_) require_checkpoint(key, s);
  }
  void check_optional(const std::string& key) const {
    for (auto s : seeds_) {
      if (checkpoint(key, s)) require_checkpoint(key, s);
    }
  }

  void add_input(const std::string& role, const fs::path& p) { inputs_.push_back({role, p}); }

  // Materializes the run directory and writes the manifest; nothing is
  // written before this point.
  void start(std::vector<std::string> planned) {
    start_ = std::chrono::steady_clock::now();
    if (!has_run_dir()) return;
    fs::create_directories(config_.run_dir);
    json inputs = json::array();
    for (const auto& [role, p] : inputs_) {
      inputs.push_back({{"role", role},
                        {"path", p.string()},
                        {"bytes", fs::file_size(p)},
                        {"git_sha1", git_blob_sha1(p)}});
    }
    std::vector<std::string> seeds_out;
    json manifest = {{"command", options_.command},
                     {"argv", options_.argv},
                     {"seeds", seeds_},
                     {"config", config_.to_json()},
                     {"inputs", inputs},
                     {"artifacts", planned}};
    write_text_atomic(config_.run_dir / "manifest.json", manifest.dump(2) + "\n");
  }

  void finish(const json& summary) {
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (!has_run_dir()) return;
    write_text_atomic(config_.run_dir / "summary.json", summary.dump(2) + "\n");
    std::vector<std::string> artifacts(artifacts_.begin(), artifacts_.end());
    write_text_atomic(config_.run_dir / "timings.json",
                      json{{"wall_seconds", seconds}, {"per_seed_seconds", seed_seconds_}, {"artifacts", artifacts}}
                              .dump(2) +
                          "\n");
  }

  void time_seed(std::uint64_t seed, double seconds) { seed_seconds_[std::to_string(seed)] = seconds; }

 private:
  void check_run_dir() const {
    const fs::path& dir = config_.run_dir;
    if (!fs::exists(dir)) return;
    if (!fs::is_directory(dir)) throw ConfigError("run directory " + dir.string() + " is not a directory");
    if (!fs::is_empty(dir) && !options_.overwrite) {
      throw ConfigError("run directory " + dir.string() + " is not empty (use --overwrite)");
    }
  }

  const Options& options_;
  RunConfig config_;
  DataSource data_;
  std::vector<std::uint64_t> seeds_;
  std::vector<std::pair<std::string, fs::path>> inputs_;
  std::set<std::string> artifacts_;
  json seed_seconds_ = json::object();
  std::chrono::steady_clock::time_point start_;
};

template <typename F>
double timed(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void register_data_inputs(Run& run, const std::vector<std::string>& keys) {
  if (run.config().data.synth) return;
  for (const auto& k : keys) {
    if (auto p = run.config().data.path(k)) run.add_input("data." + k, *p);
  }
}

// Backbone shape governs tokenization and layer indexing downstream.
void rebind_encoder(RunConfig& config, const EncoderWeights& backbone) {
  config.encoder = backbone.config;
  config.divergence.validate(backbone.config.layers);
  config.train.divergence = config.divergence;
}

std::size_t total_parameters(const EncoderWeights& backbone, const AdapterStack& stack, const ClassifierHead* head) {
  return backbone.parameter_count() + stack.parameter_count() +
         (head ? head->weight.numel() + head->bias.numel() : 0);
}

json efficiency(const EncoderWeights& backbone, const AdapterStack& stack, const AdapterSet& trained,
                const ClassifierHead* head) {
  const std::size_t trainable = trained.parameter_count();
  const std::size_t total = total_parameters(backbone, stack, head);
  return {{"trainable_params", trainable},
          {"total_params", total},
          {"trainable_fraction", double(trainable) / double(total)}};
}

AdapterSet frozen(AdapterSet set) {
  set.set_trainable(false);
  return set;
}

// Loaded train/eval splits for the adaptation commands.
struct StageData {
  LabelMap labels;
  EncodedDataset source_train;
  std::optional<EncodedDataset> target_train;
  std::map<std::string, EncodedDataset> eval;  // labeled dev/test splits present

  EvalSets eval_sets() const {
    EvalSets e;
    if (auto it = eval.find("source_dev"); it != eval.end()) e.source_dev = &it->second;
    if (auto it = eval.find("target_dev"); it != eval.end()) e.target_dev = &it->second;
    return e;
  }
};

StageData load_stage(Run& run, bool with_target) {
  StageData d;
  auto& enc = run.config().encoder;
  d.source_train = run.data().encoded("source_train", d.labels, enc);
  if (with_target) d.target_train = run.data().encoded("target_train", d.labels, enc);
  for (const char* key : kSplitKeys) {
    if (is_eval_split(key) && run.data().has(key)) d.eval.emplace(key, run.data().encoded(key, d.labels, enc));
  }
  return d;
}

json eval_all(const StageData& d, const EncoderWeights& backbone, const AdapterStack& stack, const ClassifierHead& head,
              Pooling pooling) {
  json out = json::object();
  for (const auto& [key, ds] : d.eval) out[key] = evaluate(ds, backbone, &stack, head, pooling).to_json();
  return out;
}

// Mean/std of macro-F1 and accuracy per split across seed runs.
json aggregate_eval(const std::vector<json>& runs) {
  json out = json::object();
  if (runs.empty() || !runs.front().contains("eval")) return out;
  for (const auto& [split, _] : runs.front()["eval"].items()) {
    std::vector<double> f1, acc;
    for (const auto& r : runs) {
      f1.push_back(r["eval"][split]["macro_f1"].get<double>());
      acc.push_back(r["eval"][split]["accuracy"].get<double>());
    }
    out[split] = {{"macro_f1", mean_std(f1)}, {"accuracy", mean_std(acc)}};
  }
  return out;
}

std::vector<std::string> seed_artifacts(const Run& run, const std::vector<std::pair<std::string, std::string>>& stems) {
  std::vector<std::string> out;
  for (auto s : run.seeds()) {
    for (const auto& [stem, ext] : stems) out.push_back(run.name(stem, ext, s));
  }
  return out;
}

std::vector<std::string> with_common(std::vector<std::string> planned) {
  for (const char* f : {"manifest.json", "summary.json", "timings.json"}) planned.push_back(f);
  return planned;
}

void materialize_synth(Run& run) {
  if (!run.config().data.synth) return;
  const fs::path dir = run.config().run_dir / "data";
  write_synth(run.data().synth(), dir);
  write_text_atomic(dir / "synth.json", run.config().data.synth->to_json().dump(2) + "\n");
}

// ---------------------------------------------------------------- pretrain

void cmd_pretrain(Run& run) {
  RunConfig& c = run.config();
  const bool vector = c.data.format == InputFormat::kVector;
  if (vector && c.pretrain.epochs > 0) throw ConfigError("masked-token pretraining needs text data; use pretrain.epochs = 0");
  std::vector<fs::path> corpus_files = c.data.corpus;
  if (!vector) {
    for (const auto& p : corpus_files) {
      if (!fs::is_regular_file(p)) throw ConfigError("data.corpus: no such file " + p.string());
    }
    if (corpus_files.empty()) {
      run.data().require("source_train", "pretrain");
      run.data().require("target_train", "pretrain");
    }
  }
  for (const auto& p : corpus_files) run.add_input("data.corpus", p);
  if (corpus_files.empty() && !vector) register_data_inputs(run, {"source_train", "target_train"});
  run.start(with_common(seed_artifacts(run, {{"backbone", ".udapt"}, {"metrics", ".jsonl"}})));
  materialize_synth(run);

  std::vector<std::vector<std::uint32_t>> corpus;
  if (!vector) {
    auto add = [&](const TextDataset& t) {
      for (const auto& r : t.records) corpus.push_back(tokenize(r.text, c.encoder.vocab, c.encoder.max_seq));
    };
    if (corpus_files.empty()) {
      add(run.data().text("source_train", nullptr));
      add(run.data().text("target_train", nullptr));
    } else {
      for (const auto& p : corpus_files) add(load_tsv(p, false));
    }
  }

  json runs = json::array();
  for (auto seed : run.seeds()) {
    json r{{"seed", seed}};
    run.time_seed(seed, timed([&] {
      MetricsLog log(run.path(run.name("metrics", ".jsonl", seed)));
      EncoderWeights weights;
      if (vector) {
        Rng rng(seed);
        weights = EncoderWeights::init(c.encoder, rng);
        weights.set_frozen(true);
      } else {
        const PretrainOptions opts{.epochs = c.pretrain.epochs,
                                   .batch_size = c.pretrain.batch_size,
                                   .lr = c.pretrain.lr,
                                   .weight_decay = 0.0,
                                   .mask_prob = c.pretrain.mask_prob,
                                   .seed = seed};
        PretrainResult res = pretrain_backbone(corpus, c.encoder, opts);
        for (std::size_t e = 0; e < res.epoch_losses.size(); ++e) {
          log.write({{"kind", "pretrain"}, {"epoch", e + 1}, {"loss", res.epoch_losses[e]}});
        }
        r["epoch_losses"] = res.epoch_losses;
        weights = std::move(res.weights);
      }
      const fs::path out = run.path(run.name("backbone", ".udapt", seed));
      save_encoder(weights, out);
      r["checkpoint"] = out.string();
      r["parameters"] = weights.parameter_count();
      r["checksum"] = weights.checksum();
    }));
    runs.push_back(r);
  }
  run.finish({{"command", "pretrain"}, {"runs", runs}});
}

// ---------------------------------------------------------- adaptation

EncoderWeights load_backbone(Run& run, std::uint64_t seed) {
  EncoderWeights bb = load_encoder(run.require_checkpoint("backbone", seed));
  rebind_encoder(run.config(), bb);
  return bb;
}

void register_checkpoint_inputs(Run& run, const std::vector<std::string>& keys) {
  for (auto seed : run.seeds()) {
    for (const auto& k : keys) {
      if (auto p = run.checkpoint(k, seed)) run.add_input("checkpoint." + k, *p);
    }
  }
}

// Encoder shape for data encoding before the first seed's backbone is used.
void bind_first_backbone(Run& run) {
  const WeightFile f = load_weights(run.require_checkpoint("backbone", run.seeds().front()));
  rebind_encoder(run.config(), encoder_from_file(f));
}

void cmd_train_domain(Run& run) {
  run.require_all("backbone");
  run.data().require("source_train", "train-domain");
  run.data().require("target_train", "train-domain");
  register_checkpoint_inputs(run, {"backbone"});
  register_data_inputs(run, {"source_train", "target_train"});
  bind_first_backbone(run);
  run.start(with_common(seed_artifacts(run, {{"domain", ".udapt"}, {"metrics", ".jsonl"}})));
  materialize_synth(run);

  RunConfig& c = run.config();
  StageData d = load_stage(run, true);
  json runs = json::array();
  for (auto seed : run.seeds()) {
    json r{{"seed", seed}};
    run.time_seed(seed, timed([&] {
      const EncoderWeights bb = load_backbone(run, seed);
      TrainPlan plan = c.train;
      plan.mode = TrainMode::kDomain;
      plan.seed = seed;
      MetricsLog log(run.path(run.name("metrics", ".jsonl", seed)));
      TrainResult res = train_domain_adapter(bb, d.source_train, *d.target_train, plan, c.adapter, &log);
      const fs::path out = run.path(run.name("domain", ".udapt", seed));
      save_adapters(res.adapters, out);
      AdapterStack stack(bb.config.layers);
      stack.push(frozen(res.adapters));
      r.update({{"checkpoint", out.string()},
                {"steps", res.steps},
                {"layers", c.divergence.resolved_layers(bb.config.layers)},
                {"initial_layer_div", res.initial_layer_div},
                {"final_layer_div", res.final_layer_div},
                {"collapsed", res.collapsed}});
      r.update(efficiency(bb, stack, res.adapters, nullptr));
    }));
    runs.push_back(r);
  }
  run.finish({{"command", "train-domain"}, {"runs", runs}});
}

json supervised_summary(const TrainResult& res, const fs::path& adapters, const fs::path& head) {
  json r{{"checkpoint", adapters.string()}, {"head", head.string()}, {"steps", res.steps}};
  r["best_epoch"] = res.best_epoch ? json(*res.best_epoch) : json(nullptr);
  r["best_source_dev_f1"] = res.best_source_dev_f1 ? json(*res.best_source_dev_f1) : json(nullptr);
  return r;
}

void cmd_train_task(Run& run) {
  RunConfig& c = run.config();
  run.require_all("backbone");
  if (!c.task_only) run.require_all("domain");
  run.data().require("source_train", "train-task");
  for (const char* k : kSplitKeys) run.data().check(k);
  register_checkpoint_inputs(run, c.task_only ? std::vector<std::string>{"backbone"}
                                              : std::vector<std::string>{"backbone", "domain"});
  register_data_inputs(run, {"source_train", "source_dev", "source_test", "target_dev", "target_test"});
  bind_first_backbone(run);
  run.start(with_common(seed_artifacts(run, {{"task", ".udapt"}, {"head", ".udapt"}, {"metrics", ".jsonl"}})));
  materialize_synth(run);

  StageData d = load_stage(run, false);
  json runs = json::array();
  std::vector<json> seed_runs;
  for (auto seed : run.seeds()) {
    json r;
    run.time_seed(seed, timed([&] {
      const EncoderWeights bb = load_backbone(run, seed);
      std::optional<AdapterSet> domain;
      if (!c.task_only) {
        domain = load_adapters(run.require_checkpoint("domain", seed), bb.config.hidden, bb.config.layers);
      }
      TrainPlan plan = c.train;
      plan.mode = TrainMode::kTask;
      plan.seed = seed;
      MetricsLog log(run.path(run.name("metrics", ".jsonl", seed)));
      TrainResult res =
          train_task_adapter(bb, domain ? &*domain : nullptr, d.source_train, plan, c.adapter, d.eval_sets(), &log);
      const fs::path task_out = run.path(run.name("task", ".udapt", seed));
      const fs::path head_out = run.path(run.name("head", ".udapt", seed));
      save_adapters(res.adapters, task_out);
      save_head(*res.head, head_out);
      AdapterStack stack(bb.config.layers);
      if (domain) stack.push(frozen(*domain));
      stack.push(frozen(res.adapters));
      r = supervised_summary(res, task_out, head_out);
      r["seed"] = seed;
      r["task_only"] = c.task_only;
      r.update(efficiency(bb, stack, res.adapters, &*res.head));
      r["eval"] = eval_all(d, bb, stack, *res.head, c.train.pooling);
    }));
    seed_runs.push_back(r);
    runs.push_back(r);
  }
  run.finish({{"command", "train-task"}, {"runs", runs}, {"aggregate", aggregate_eval(seed_runs)}});
}

void cmd_train_joint(Run& run) {
  RunConfig& c = run.config();
  run.require_all("backbone");
  run.data().require("source_train", "train-joint");
  run.data().require("target_train", "train-joint");
  for (const char* k : kSplitKeys) run.data().check(k);
  register_checkpoint_inputs(run, {"backbone"});
  register_data_inputs(run, {"source_train", "target_train", "source_dev", "source_test", "target_dev", "target_test"});
  bind_first_backbone(run);
  run.start(with_common(seed_artifacts(run, {{"joint", ".udapt"}, {"head", ".udapt"}, {"metrics", ".jsonl"}})));
  materialize_synth(run);

  StageData d = load_stage(run, true);
  json runs = json::array();
  std::vector<json> seed_runs;
  for (auto seed : run.seeds()) {
    json r;
    run.time_seed(seed, timed([&] {
      const EncoderWeights bb = load_backbone(run, seed);
      TrainPlan plan = c.train;
      plan.mode = TrainMode::kJoint;
      plan.seed = seed;
      MetricsLog log(run.path(run.name("metrics", ".jsonl", seed)));
      TrainResult res = train_joint(bb, d.source_train, *d.target_train, plan, c.adapter, d.eval_sets(), &log);
      const fs::path joint_out = run.path(run.name("joint", ".udapt", seed));
      const fs::path head_out = run.path(run.name("head", ".udapt", seed));
      save_adapters(res.adapters, joint_out);
      save_head(*res.head, head_out);
      AdapterStack stack(bb.config.layers);
      stack.push(frozen(res.adapters));
      r = supervised_summary(res, joint_out, head_out);
      r["seed"] = seed;
      r.update(efficiency(bb, stack, res.adapters, &*res.head));
      r["eval"] = eval_all(d, bb, stack, *res.head, c.train.pooling);
    }));
    seed_runs.push_back(r);
    runs.push_back(r);
  }
  run.finish({{"command", "train-joint"}, {"runs", runs}, {"aggregate", aggregate_eval(seed_runs)}});
}

// ------------------------------------------------------------ evaluation

// Adapter stack described by the configured checkpoints: [joint], or
// [domain, task] (composed), or a single domain or task set, or none.
AdapterStack load_stack(Run& run, std::uint64_t seed, const EncoderWeights& bb) {
  const std::size_t h = bb.config.hidden, L = bb.config.layers;
  AdapterStack stack(L);
  const auto joint = run.checkpoint("joint", seed);
  const auto domain = run.checkpoint("domain", seed);
  const auto task = run.checkpoint("task", seed);
  if (joint) {
    if (domain || task) throw ConfigError("a joint checkpoint cannot be combined with domain or task checkpoints");
    stack.push(frozen(load_adapters(run.require_checkpoint("joint", seed), h, L)));
    return stack;
  }
  if (domain && task) {
    return compose(run.require_checkpoint("domain", seed), run.require_checkpoint("task", seed), h, L);
  }
  if (domain) stack.push(frozen(load_adapters(run.require_checkpoint("domain", seed), h, L)));
  if (task) stack.push(frozen(load_adapters(run.require_checkpoint("task", seed), h, L)));
  return stack;
}

std::string eval_split(const Options& options) { return options.split.value_or("target_test"); }

void check_eval_data(Run& run, const Options& options) {
  if (options.data) {
    if (!fs::is_regular_file(*options.data)) throw ConfigError("--data: no such file " + options.data->string());
    run.add_input("data", *options.data);
    return;
  }
  const std::string split = eval_split(options);
  if (!is_eval_split(split) || std::find(std::begin(kSplitKeys), std::end(kSplitKeys), split) == std::end(kSplitKeys)) {
    throw ConfigError("--split must be one of source_dev, source_test, target_dev, target_test");
  }
  run.data().require(split, options.command);
  register_data_inputs(run, {split});
}

EncodedDataset load_eval_data(Run& run, const Options& options, LabelMap& labels) {
  const std::string split = options.data ? "target_test" : eval_split(options);
  if (options.data) return run.data().encode_file(split, *options.data, labels, run.config().encoder);
  return run.data().encoded(split, labels, run.config().encoder);
}

void cmd_eval(Run& run, const Options& options, bool compose_only) {
  run.require_all("backbone");
  run.require_all("head");
  if (compose_only) {
    run.require_all("domain");
    run.require_all("task");
    if (run.checkpoint("joint", run.seeds().front())) throw ConfigError("compose takes domain and task checkpoints");
  }
  for (const char* k : {"domain", "task", "joint"}) run.check_optional(k);
  check_eval_data(run, options);
  register_checkpoint_inputs(run, {"backbone", "domain", "task", "joint", "head"});
  bind_first_backbone(run);
  run.start(with_common({"eval.json"}));

  std::vector<json> per_seed;
  for (auto seed : run.seeds()) {
    json r{{"seed", seed}};
    run.time_seed(seed, timed([&] {
      const EncoderWeights bb = load_backbone(run, seed);
      const AdapterStack stack = load_stack(run, seed, bb);
      const ClassifierHead head = load_head(run.require_checkpoint("head", seed), bb.config.hidden);
      LabelMap labels = head.labels;
      const EncodedDataset ds = load_eval_data(run, options, labels);
      r["metrics"] = evaluate(ds, bb, &stack, head, run.config().train.pooling).to_json();
    }));
    per_seed.push_back(r);
  }
  json out{{"command", options.command}, {"split", options.data ? options.data->string() : eval_split(options)}};
  if (per_seed.size() == 1 && !options.seeds) {
    out["metrics"] = per_seed.front()["metrics"];
  } else {
    std::vector<double> f1, acc;
    for (const auto& r : per_seed) {
      f1.push_back(r["metrics"]["macro_f1"].get<double>());
      acc.push_back(r["metrics"]["accuracy"].get<double>());
    }
    out["per_seed"] = per_seed;
    out["aggregate"] = {{"macro_f1", mean_std(f1)}, {"accuracy", mean_std(acc)}};
  }
  std::cout << out.dump(2) << std::endl;
  if (run.has_run_dir()) write_text_atomic(run.path("eval.json"), out.dump(2) + "\n");
  run.finish(out);
}

// ------------------------------------------------- ablation and sweeps

struct Span {
  std::size_t first = 0, last = 0;  // 1-based inclusive; 0 = no removal

  bool empty() const { return first == 0; }
  std::string label() const {
    return empty() ? "none" : first == last ? std::to_string(first) : std::to_string(first) + "-" + std::to_string(last);
  }
};

Span parse_span(const std::string& text, std::size_t layers) {
  if (text.empty() || text == "none") return {};
  Span s;
  try {
    const auto dash = text.find('-');
    std::size_t used = 0;
    if (dash == std::string::npos) {
      s.first = s.last = std::stoul(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
    } else {
      s.first = std::stoul(text.substr(0, dash), &used);
      if (used != dash) throw std::invalid_argument(text);
      const std::string tail = text.substr(dash + 1);
      s.last = std::stoul(tail, &used);
      if (used != tail.size()) throw std::invalid_argument(text);
    }
  } catch (const std::logic_error&) {
    throw ConfigError("bad layer span '" + text + "' (expected a, a-b or none)");
  }
  if (s.first < 1 || s.last < s.first || s.last > layers) {
    throw ConfigError("layer span '" + text + "' must satisfy 1 <= a <= b <= " + std::to_string(layers));
  }
  return s;
}

// Full adaptation pipeline on one seed: joint, or two-step (domain then
// task), or task-only. Returns the trained stack and head.
struct PipelineResult {
  AdapterStack stack;
  ClassifierHead head;
  std::size_t trainable_params = 0;
  double trainable_fraction = 0.0;
};

PipelineResult run_pipeline(const EncoderWeights& bb, const StageData& d, const RunConfig& c, TrainPlan plan,
                            const AdapterConfig& adapter) {
  AdapterStack stack(bb.config.layers);
  TrainResult res;
  if (c.train.mode == TrainMode::kJoint) {
    plan.mode = TrainMode::kJoint;
    res = train_joint(bb, d.source_train, *d.target_train, plan, adapter, d.eval_sets());
  } else {
    std::optional<AdapterSet> domain;
    if (!c.task_only) {
      TrainPlan dp = plan;
      dp.mode = TrainMode::kDomain;
      domain = train_domain_adapter(bb, d.source_train, *d.target_train, dp, adapter).adapters;
      stack.push(frozen(*domain));
    }
    plan.mode = TrainMode::kTask;
    res = train_task_adapter(bb, domain ? &*domain : nullptr, d.source_train, plan, adapter, d.eval_sets());
  }
  stack.push(frozen(res.adapters));
  const json eff = efficiency(bb, stack, res.adapters, &*res.head);
  return {std::move(stack), std::move(*res.head), eff["trainable_params"].get<std::size_t>(),
          eff["trainable_fraction"].get<double>()};
}

void prepare_retrain(Run& run, const Options& options) {
  run.require_all("backbone");
  run.data().require("source_train", options.command);
  if (run.config().train.mode == TrainMode::kJoint || !run.config().task_only) {
    run.data().require("target_train", options.command);
  }
  for (const char* k : kSplitKeys) run.data().check(k);
  check_eval_data(run, options);
  register_checkpoint_inputs(run, {"backbone"});
  register_data_inputs(run, {"source_train", "target_train", "source_dev", "target_dev"});
  bind_first_backbone(run);
}

std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void cmd_ablate_layers(Run& run, const Options& options) {
  if (options.retrain) {
    prepare_retrain(run, options);
  } else {
    run.require_all("backbone");
    run.require_all("head");
    for (const char* k : {"domain", "task", "joint"}) run.check_optional(k);
    check_eval_data(run, options);
    register_checkpoint_inputs(run, {"backbone", "domain", "task", "joint", "head"});
    bind_first_backbone(run);
  }
  const std::size_t L = run.config().encoder.layers;
  std::vector<Span> spans{Span{}};
  for (const auto& text : options.spans) spans.push_back(parse_span(text, L));
  if (options.retrain) {
    for (const auto& s : spans) {
      if (s.first == 1 && s.last == L) throw ConfigError("retraining with every adapter removed leaves nothing to train");
    }
  }
  run.start(with_common({"ablation.csv"}));
  if (options.retrain) materialize_synth(run);

  const RunConfig& c = run.config();
  std::optional<StageData> stage;
  if (options.retrain) stage = load_stage(run, c.train.mode == TrainMode::kJoint || !c.task_only);
  std::vector<std::vector<double>> f1(spans.size());
  for (auto seed : run.seeds()) {
    run.time_seed(seed, timed([&] {
      const EncoderWeights bb = load_backbone(run, seed);
      if (options.retrain) {
        LabelMap labels = stage->labels;
        const EncodedDataset ds = load_eval_data(run, options, labels);
        std::optional<double> full;
        for (std::size_t i = 0; i < spans.size(); ++i) {
          if (spans[i].empty() && full) {
            f1[i].push_back(*full);
            continue;
          }
          TrainPlan plan = c.train;
          plan.seed = seed;
          for (std::size_t l = spans[i].first; !spans[i].empty() && l <= spans[i].last; ++l) plan.removed_layers.push_back(l);
          const PipelineResult p = run_pipeline(bb, *stage, c, plan, c.adapter);
          const double v = evaluate(ds, bb, &p.stack, p.head, c.train.pooling).macro_f1;
          if (spans[i].empty()) full = v;
          f1[i].push_back(v);
        }
      } else {
        const AdapterStack base = load_stack(run, seed, bb);
        const ClassifierHead head = load_head(run.require_checkpoint("head", seed), bb.config.hidden);
        LabelMap labels = head.labels;
        const EncodedDataset ds = load_eval_data(run, options, labels);
        for (std::size_t i = 0; i < spans.size(); ++i) {
          AdapterStack stack(L);
          for (const auto& set : base.sets()) {
            AdapterSet copy = set.clone();
            if (!spans[i].empty()) copy.remove_span(spans[i].first, spans[i].last);
            stack.push(frozen(std::move(copy)));
          }
          f1[i].push_back(evaluate(ds, bb, &stack, head, c.train.pooling).macro_f1);
        }
      }
    }));
  }

  std::ostringstream csv;
  csv << "span,macro_f1,delta\n";
  json rows = json::array();
  const double full = mean_std(f1[0])["mean"].get<double>();
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const double mean = mean_std(f1[i])["mean"].get<double>();
    csv << spans[i].label() << ',' << csv_number(mean) << ',' << csv_number(mean - full) << '\n';
    rows.push_back({{"span", spans[i].label()}, {"macro_f1", mean}, {"delta", mean - full}, {"per_seed", f1[i]}});
  }
  write_text_atomic(run.path("ablation.csv"), csv.str());
  std::cout << csv.str();
  run.finish({{"command", "ablate-layers"}, {"mode", options.retrain ? "retrain" : "eval-disable"}, {"rows", rows}});
}

void cmd_sweep_rf(Run& run, const Options& options) {
  if (options.factors.empty()) throw ConfigError("sweep-rf needs --factors");
  for (auto f : options.factors) {
    if (f < 1) throw ConfigError("reduction factors must be at least 1");
  }
  prepare_retrain(run, options);
  run.start(with_common({"sweep_rf.csv"}));
  materialize_synth(run);

  const RunConfig& c = run.config();
  StageData stage = load_stage(run, c.train.mode == TrainMode::kJoint || !c.task_only);
  LabelMap labels = stage.labels;
  const EncodedDataset ds = load_eval_data(run, options, labels);
  std::vector<std::vector<double>> f1(options.factors.size());
  std::vector<std::size_t> params(options.factors.size());
  std::vector<double> fraction(options.factors.size());
  for (auto seed : run.seeds()) {
    run.time_seed(seed, timed([&] {
      const EncoderWeights bb = load_backbone(run, seed);
      for (std::size_t i = 0; i < options.factors.size(); ++i) {
        AdapterConfig adapter = c.adapter;
        adapter.reduction_factor = options.factors[i];
        TrainPlan plan = c.train;
        plan.seed = seed;
        const PipelineResult p = run_pipeline(bb, stage, c, plan, adapter);
        params[i] = p.trainable_params;
        fraction[i] = p.trainable_fraction;
        f1[i].push_back(evaluate(ds, bb, &p.stack, p.head, c.train.pooling).macro_f1);
      }
    }));
  }

  std::ostringstream csv;
  csv << "rf,trainable_params,macro_f1\n";
  json rows = json::array();
  for (std::size_t i = 0; i < options.factors.size(); ++i) {
    const double mean = mean_std(f1[i])["mean"].get<double>();
    csv << options.factors[i] << ',' << params[i] << ',' << csv_number(mean) << '\n';
    rows.push_back({{"rf", options.factors[i]},
                    {"bottleneck", bottleneck_dim(c.encoder.hidden, options.factors[i])},
                    {"trainable_params", params[i]},
                    {"trainable_fraction", fraction[i]},
                    {"macro_f1", mean},
                    {"per_seed", f1[i]}});
  }
  write_text_atomic(run.path("sweep_rf.csv"), csv.str());
  std::cout << csv.str();
  run.finish({{"command", "sweep-rf"}, {"rows", rows}});
}

// ---------------------------------------------------------------- export

void cmd_export(Run& run) {
  run.require_all("backbone");
  for (const char* k : {"domain", "task", "joint"}) run.check_optional(k);
  run.data().require("source_train", "export-embeddings");
  run.data().require("target_train", "export-embeddings");
  register_checkpoint_inputs(run, {"backbone", "domain", "task", "joint"});
  register_data_inputs(run, {"source_train", "target_train"});
  bind_first_backbone(run);
  std::vector<std::string> planned;
  for (auto s : run.seeds()) {
    planned.push_back(run.name("embeddings", ".csv", s));
    planned.push_back(run.name("embeddings", ".csv", s) + ".divergence.json");
  }
  run.start(with_common(planned));
  materialize_synth(run);

  const RunConfig& c = run.config();
  LabelMap labels;
  const EncodedDataset src = run.data().encoded("source_train", labels, c.encoder);
  const EncodedDataset trg = run.data().encoded("target_train", labels, c.encoder);
  json runs = json::array();
  for (auto seed : run.seeds()) {
    json r{{"seed", seed}};
    run.time_seed(seed, timed([&] {
      const EncoderWeights bb = load_backbone(run, seed);
      const AdapterStack stack = load_stack(run, seed, bb);
      const std::string file = run.name("embeddings", ".csv", seed);
      run.path(file + ".divergence.json");
      const ExportResult res =
          export_embeddings(bb, &stack, src, trg, c.divergence, c.train.pooling, run.path(file));
      r.update({{"file", file}, {"rows", res.rows}, {"layers", res.layers}, {"per_layer", res.per_layer}});
    }));
    runs.push_back(r);
  }
  run.finish({{"command", "export-embeddings"}, {"runs", runs}});
}

// ---------------------------------------------------------------- synth

void cmd_synth_gen(Run& run, const Options& options) {
  SynthShiftConfig sc = run.config().data.synth.value_or(SynthShiftConfig{});
  if (options.seed) sc.seed = *options.seed;
  sc.validate();
  run.config().data.synth = sc;
  const SynthFiles names = synth_file_names(run.config().run_dir);
  std::vector<std::string> planned{"synth.json"};
  for (const auto& p : {names.source_train, names.source_dev, names.source_test, names.target_train,
                        names.target_dev, names.target_test}) {
    planned.push_back(p.filename().string());
  }
  run.start(with_common(planned));
  for (const auto& f : planned) run.path(f);
  write_synth(synth_generate(sc), run.config().run_dir);
  write_text_atomic(run.config().run_dir / "synth.json", sc.to_json().dump(2) + "\n");
  run.finish({{"command", "synth-gen"}, {"synth", sc.to_json()}});
}

}  // namespace

void run_command(const Options& options) {
  RunConfig config;
  if (options.config) {
    config = load_config(*options.config);
  } else if (options.command != "synth-gen") {
    throw ConfigError(options.command + " needs --config");
  }
  for (const auto& [k, v] : options.checkpoints) {
    if (v.empty()) throw ConfigError("--" + k + " needs a path");
  }
  const std::string& cmd = options.command;
  const bool optional_dir = cmd == "eval" || cmd == "compose";
  Run run(options, std::move(config), !optional_dir);
  if (options.config) run.add_input("config", *options.config);

  if (cmd == "pretrain") cmd_pretrain(run);
  else if (cmd == "train-domain") cmd_train_domain(run);
  else if (cmd == "train-task") cmd_train_task(run);
  else if (cmd == "train-joint") cmd_train_joint(run);
  else if (cmd == "eval") cmd_eval(run, options, false);
  else if (cmd == "compose") cmd_eval(run, options, true);
  else if (cmd == "ablate-layers") cmd_ablate_layers(run, options);
  else if (cmd == "sweep-rf") cmd_sweep_rf(run, options);
  else if (cmd == "export-embeddings") cmd_export(run);
  else if (cmd == "synth-gen") cmd_synth_gen(run, options);
  else throw ConfigError("unknown command '" + cmd + "'");
}

}  // namespace udapter::cli
