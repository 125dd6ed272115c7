// SPDX-License-Identifier: Apache-2.0
#include "cli/config.hpp"

#include <fstream>
#include <set>

#include "udapter/error.hpp"

namespace udapter::cli {

namespace {

const char* const kDataKeys[] = {"source_train", "source_dev", "source_test",
                                 "target_train", "target_dev", "target_test"};
const char* const kCheckpointKeys[] = {"backbone", "domain", "task", "head", "joint"};

class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("section '" + name_ + "' must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("bad value for '" + name_ + "." + key + "': " + j_.at(key).dump());
    }
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + name_ + "." + key + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

std::optional<std::filesystem::path> DataConfig::path(const std::string& key) const {
  const auto it = paths.find(key);
  if (it == paths.end()) return std::nullopt;
  return it->second;
}

std::string expand_seed(const std::string& pattern, std::uint64_t seed) {
  std::string out = pattern;
  const std::string token = "{seed}";
  for (auto pos = out.find(token); pos != std::string::npos; pos = out.find(token, pos)) {
    out.replace(pos, token.size(), std::to_string(seed));
  }
  return out;
}

RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  Section top(j, "config");

  if (top.has("encoder")) {
    Section s(top.raw("encoder"), "encoder");
    s.get("L", c.encoder.layers);
    s.get("h", c.encoder.hidden);
    s.get("heads", c.encoder.heads);
    s.get("ff", c.encoder.ff);
    s.get("vocab", c.encoder.vocab);
    s.get("max_seq", c.encoder.max_seq);
    s.finish();
  }
  c.encoder.validate();

  if (top.has("adapter")) {
    Section s(top.raw("adapter"), "adapter");
    s.get("reduction_factor", c.adapter.reduction_factor);
    std::string f = to_string(c.adapter.nonlinearity);
    s.get("nonlinearity", f);
    c.adapter.nonlinearity = parse_nonlinearity(f);
    s.get("biases", c.adapter.biases);
    s.finish();
  }
  if (c.adapter.reduction_factor < 1) throw ConfigError("adapter.reduction_factor must be at least 1");

  if (top.has("divergence")) {
    Section s(top.raw("divergence"), "divergence");
    std::string kind = to_string(c.divergence.kind), estimator = to_string(c.divergence.estimator);
    s.get("kind", kind);
    s.get("estimator", estimator);
    c.divergence.kind = parse_divergence_kind(kind);
    c.divergence.estimator = parse_mmd_estimator(estimator);
    s.get("kernels", c.divergence.kernel_multipliers);
    s.get("K", c.divergence.cmd_order);
    s.get("layer_set", c.divergence.layer_set);
    if (s.has("bandwidth")) {
      double b = 0;
      s.get("bandwidth", b);
      c.divergence.base_bandwidth = b;
    }
    s.finish();
  }
  c.divergence.validate(c.encoder.layers);

  if (top.has("train")) {
    Section s(top.raw("train"), "train");
    std::string mode = to_string(c.train.mode), pooling = to_string(c.train.pooling);
    s.get("mode", mode);
    s.get("pooling", pooling);
    c.train.mode = parse_train_mode(mode);
    c.train.pooling = parse_pooling(pooling);
    s.get("epochs", c.train.epochs);
    s.get("batch_size", c.train.batch_size);
    s.get("lr", c.train.lr);
    s.get("weight_decay", c.train.weight_decay);
    s.get("gamma", c.train.gamma);
    s.get("seed", c.train.seed);
    s.get("eval_every", c.train.eval_every);
    s.get("task_only", c.task_only);
    if (s.has("lambda")) {
      double l = 0;
      s.get("lambda", l);
      c.train.lambda_override = l;
    }
    s.finish();
  }
  c.train.divergence = c.divergence;
  c.train.validate();

  if (top.has("pretrain")) {
    Section s(top.raw("pretrain"), "pretrain");
    s.get("epochs", c.pretrain.epochs);
    s.get("batch_size", c.pretrain.batch_size);
    s.get("lr", c.pretrain.lr);
    s.get("mask_prob", c.pretrain.mask_prob);
    s.finish();
  }
  if (c.pretrain.batch_size < 1) throw ConfigError("pretrain.batch_size must be at least 1");
  if (!(c.pretrain.lr > 0)) throw ConfigError("pretrain.lr must be positive");
  if (!(c.pretrain.mask_prob > 0 && c.pretrain.mask_prob < 1)) throw ConfigError("pretrain.mask_prob must lie in (0, 1)");

  if (top.has("data")) {
    Section s(top.raw("data"), "data");
    std::string format = "text";
    s.get("format", format);
    if (format == "text") c.data.format = InputFormat::kText;
    else if (format == "vector") c.data.format = InputFormat::kVector;
    else throw ConfigError("data.format must be 'text' or 'vector'");
    for (const char* key : kDataKeys) {
      std::string p;
      s.get(key, p);
      if (!p.empty()) c.data.paths[key] = resolve(base_dir, p);
    }
    std::vector<std::string> corpus;
    s.get("corpus", corpus);
    for (const auto& p : corpus) c.data.corpus.push_back(resolve(base_dir, p));
    if (s.has("synth")) c.data.synth = SynthShiftConfig::from_json(s.raw("synth"));
    s.get("projection_seed", c.data.projection_seed);
    s.finish();
    if (c.data.synth && !c.data.paths.empty()) {
      throw ConfigError("data.synth and explicit data paths are mutually exclusive");
    }
    if (c.data.synth && c.data.format == InputFormat::kVector) {
      throw ConfigError("the synthetic generator produces text");
    }
  }

  if (top.has("output")) {
    Section s(top.raw("output"), "output");
    std::string dir;
    s.get("run_dir", dir);
    if (!dir.empty()) c.run_dir = resolve(base_dir, dir);
    s.finish();
  }

  if (top.has("checkpoints")) {
    Section s(top.raw("checkpoints"), "checkpoints");
    for (const char* key : kCheckpointKeys) {
      std::string p;
      s.get(key, p);
      if (!p.empty()) c.checkpoints[key] = resolve(base_dir, p).string();
    }
    s.finish();
  }
  top.finish();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, path.parent_path());
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json data_paths = nlohmann::json::object();
  for (const auto& [k, v] : data.paths) data_paths[k] = v.string();
  std::vector<std::string> corpus_paths;
  for (const auto& p : data.corpus) corpus_paths.push_back(p.string());
  nlohmann::json j{
      {"encoder",
       {{"L", encoder.layers},
        {"h", encoder.hidden},
        {"heads", encoder.heads},
        {"ff", encoder.ff},
        {"vocab", encoder.vocab},
        {"max_seq", encoder.max_seq}}},
      {"adapter",
       {{"reduction_factor", adapter.reduction_factor},
        {"nonlinearity", udapter::to_string(adapter.nonlinearity)},
        {"biases", adapter.biases}}},
      {"divergence",
       {{"kind", udapter::to_string(divergence.kind)},
        {"kernels", divergence.kernel_multipliers},
        {"K", divergence.cmd_order},
        {"estimator", udapter::to_string(divergence.estimator)},
        {"layer_set", divergence.resolved_layers(encoder.layers)}}},
      {"train",
       {{"mode", udapter::to_string(train.mode)},
        {"epochs", train.epochs},
        {"batch_size", train.batch_size},
        {"lr", train.lr},
        {"weight_decay", train.weight_decay},
        {"gamma", train.gamma},
        {"seed", train.seed},
        {"pooling", udapter::to_string(train.pooling)},
        {"eval_every", train.eval_every},
        {"task_only", task_only}}},
      {"pretrain",
       {{"epochs", pretrain.epochs},
        {"batch_size", pretrain.batch_size},
        {"lr", pretrain.lr},
        {"mask_prob", pretrain.mask_prob}}},
      {"data",
       {{"format", data.format == InputFormat::kText ? "text" : "vector"},
        {"paths", data_paths},
        {"corpus", corpus_paths},
        {"projection_seed", data.projection_seed}}},
      {"output", {{"run_dir", run_dir.string()}}},
      {"checkpoints", checkpoints}};
  if (divergence.base_bandwidth) j["divergence"]["bandwidth"] = *divergence.base_bandwidth;
  if (train.lambda_override) j["train"]["lambda"] = *train.lambda_override;
  if (data.synth) j["data"]["synth"] = data.synth->to_json();
  return j;
}

}  // namespace udapter::cli
