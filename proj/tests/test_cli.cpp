// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "udapter/adapters.hpp"
#include "udapter/encoder.hpp"
#include "udapter/weights_io.hpp"

using namespace udapter;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json tiny_config() {
  return {{"encoder", {{"L", 2}, {"h", 16}, {"heads", 2}, {"ff", 32}, {"vocab", 256}, {"max_seq", 16}}},
          {"adapter", {{"reduction_factor", 4}}},
          {"train", {{"epochs", 2}, {"batch_size", 16}, {"lr", 1e-2}}},
          {"pretrain", {{"epochs", 1}}},
          {"data", {{"synth", {{"train_size", 48}, {"dev_size", 24}, {"test_size", 24}, {"seed", 1}}}}}};
}

// Scratch directory holding configs and run directories for one test case.
class Workspace {
 public:
  explicit Workspace(const std::string& name) : root_(fs::temp_directory_path() / ("udapter_cli_" + name)) {
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Workspace() { fs::remove_all(root_); }

  fs::path operator/(const std::string& p) const { return root_ / p; }

  fs::path config(const json& j, const std::string& name = "cfg.json") const {
    std::ofstream(root_ / name) << j.dump(2);
    return root_ / name;
  }

  // Exit status of the CLI; stdout goes to out.txt, stderr to err.txt.
  int run(const std::string& args) const {
    const std::string cmd = "cd '" + root_.string() + "' && UDAPTER_LOG=error '" UDAPTER_CLI_PATH "' " + args +
                            " > out.txt 2> err.txt";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
  }

  std::string read(const std::string& p) const {
    std::ifstream in(root_ / p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  json read_json(const std::string& p) const { return json::parse(read(p)); }

 private:
  fs::path root_;
};

std::vector<json> read_jsonl(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

}  // namespace

TEST_CASE("config and argument errors exit with 2 before writing anything") {
  Workspace ws("config_errors");
  json bad = tiny_config();
  bad["encoder"]["depth"] = 3;
  CHECK(ws.run("pretrain --config " + ws.config(bad).string() + " --run-dir runs/a") == 2);
  CHECK(ws.read("err.txt").find("encoder.depth") != std::string::npos);
  CHECK_FALSE(fs::exists(ws / "runs/a"));

  json missing = tiny_config();
  missing["data"] = {{"corpus", {"nowhere.txt"}}};
  CHECK(ws.run("pretrain --config " + ws.config(missing).string() + " --run-dir runs/b") == 2);
  CHECK_FALSE(fs::exists(ws / "runs/b"));

  const auto cfg = ws.config(tiny_config());
  CHECK(ws.run("frobnicate --config " + cfg.string()) == 2);
  CHECK(ws.run("pretrain --config " + cfg.string()) == 2);  // no run directory
  CHECK(ws.run("pretrain --config " + cfg.string() + " --run-dir runs/c --seeds 0") == 2);
  CHECK(ws.run("sweep-rf --config " + cfg.string() + " --run-dir runs/d --factors 0 --backbone x") == 2);

  const std::string env_cmd = "cd '" + (ws / "").string() + "' && UDAPTER_LOG=loud '" UDAPTER_CLI_PATH
                              "' synth-gen --run-dir runs/e > /dev/null 2>&1";
  const int status = std::system(env_cmd.c_str());
  CHECK(WEXITSTATUS(status) == 2);

  fs::create_directories(ws / "runs/full");
  std::ofstream(ws / "runs/full/keep.txt") << "x";
  CHECK(ws.run("synth-gen --run-dir runs/full") == 2);
  CHECK(ws.run("synth-gen --run-dir runs/full --overwrite") == 0);
}

TEST_CASE("pretrain with zero epochs writes the seeded initialization") {
  Workspace ws("pretrain_zero");
  json c = tiny_config();
  c["pretrain"]["epochs"] = 0;
  REQUIRE(ws.run("pretrain --config " + ws.config(c).string() + " --run-dir bb --seed 5") == 0);
  Rng rng(5);
  EncoderWeights init = EncoderWeights::init(
      EncoderConfig{.layers = 2, .hidden = 16, .heads = 2, .ff = 32, .vocab = 256, .max_seq = 16}, rng);
  const auto from_cli = read_file_bytes(ws / "bb/backbone.udapt");
  save_encoder(init, ws / "init.udapt");
  CHECK(from_cli == read_file_bytes(ws / "init.udapt"));

  const json manifest = ws.read_json("bb/manifest.json");
  CHECK(manifest["command"] == "pretrain");
  CHECK(manifest["seeds"] == json::array({5}));
  CHECK(manifest["config"]["adapter"]["reduction_factor"] == 4);
  // Config file hash in git blob form.
  REQUIRE(manifest["inputs"].size() == 1);
  CHECK(manifest["inputs"][0]["git_sha1"].get<std::string>().size() == 40);
}

TEST_CASE("git-style content hash of inputs") {
  Workspace ws("hash");
  std::ofstream(ws / "cfg.json") << "{}";
  // `printf '{}' | git hash-object --stdin`
  REQUIRE(ws.run("synth-gen --config cfg.json --run-dir s") == 0);
  const json manifest = ws.read_json("s/manifest.json");
  CHECK(manifest["inputs"][0]["git_sha1"] == "9e26dfeeb6e641a33dae4961196235bdb965b21b");
}

TEST_CASE("missing upstream checkpoints are dependency errors") {
  Workspace ws("dependency");
  const auto cfg = ws.config(tiny_config());
  CHECK(ws.run("train-domain --config " + cfg.string() + " --run-dir d") == 4);
  CHECK(ws.read("err.txt").find("backbone") != std::string::npos);
  REQUIRE(ws.run("pretrain --config " + cfg.string() + " --run-dir bb") == 0);
  CHECK(ws.run("train-task --config " + cfg.string() + " --run-dir t --backbone bb/backbone.udapt") == 4);
  CHECK(ws.run("train-task --config " + cfg.string() +
               " --run-dir t --backbone bb/backbone.udapt --domain dom/domain.udapt") == 4);
  CHECK(ws.read("err.txt").find("dom/domain.udapt") != std::string::npos);
  CHECK_FALSE(fs::exists(ws / "t"));
  CHECK(ws.run("train-task --config " + cfg.string() + " --run-dir t --backbone bb/backbone.udapt --task-only") == 0);
}

TEST_CASE("commands are deterministic and the joint log starts at lambda 0") {
  Workspace ws("determinism");
  const auto cfg = ws.config(tiny_config());
  for (const char* dir : {"a", "b"}) {
    const std::string d = dir;
    REQUIRE(ws.run("pretrain --config " + cfg.string() + " --run-dir " + d + "/bb") == 0);
    const std::string bb = " --backbone " + d + "/bb/backbone.udapt";
    REQUIRE(ws.run("train-domain --config " + cfg.string() + " --run-dir " + d + "/dom" + bb) == 0);
    REQUIRE(ws.run("train-task --config " + cfg.string() + " --run-dir " + d + "/task" + bb + " --domain " + d +
                   "/dom/domain.udapt") == 0);
    REQUIRE(ws.run("train-joint --config " + cfg.string() + " --run-dir " + d + "/joint" + bb) == 0);
  }
  for (const char* f : {"bb/backbone.udapt", "bb/metrics.jsonl", "dom/domain.udapt", "dom/metrics.jsonl",
                        "task/task.udapt", "task/head.udapt", "task/metrics.jsonl", "joint/joint.udapt",
                        "joint/head.udapt", "joint/metrics.jsonl"}) {
    INFO(f);
    CHECK(ws.read(std::string("a/") + f) == ws.read(std::string("b/") + f));
  }
  const auto records = read_jsonl(ws.read("a/joint/metrics.jsonl"));
  REQUIRE_FALSE(records.empty());
  CHECK(records.front()["kind"] == "step");
  CHECK(records.front()["lambda"].get<double>() == 0.0);
}

TEST_CASE("evaluation, composition and multi-seed aggregation") {
  Workspace ws("eval");
  const auto cfg = ws.config(tiny_config());
  REQUIRE(ws.run("pretrain --config " + cfg.string() + " --run-dir bb") == 0);
  const std::string bb = " --backbone bb/backbone.udapt";
  REQUIRE(ws.run("train-domain --config " + cfg.string() + " --run-dir dom --seeds 3" + bb) == 0);
  REQUIRE(ws.run("train-task --config " + cfg.string() + " --run-dir task --seeds 3" + bb +
                 " --domain 'dom/domain.seed{seed}.udapt'") == 0);
  const std::string set = bb + " --domain 'dom/domain.seed{seed}.udapt' --task 'task/task.seed{seed}.udapt'" +
                          " --head 'task/head.seed{seed}.udapt'";
  const json summary = ws.read_json("task/summary.json");

  SUBCASE("compose of the own pair matches the post-training evaluation") {
    REQUIRE(ws.run("compose --config " + cfg.string() + " --seed 1" + set) == 0);
    const json out = json::parse(ws.read("out.txt"));
    CHECK(out["metrics"] == summary["runs"][1]["eval"]["target_test"]);
    REQUIRE(ws.run("eval --config " + cfg.string() + " --seed 1 --run-dir ev" + set) == 0);
    CHECK(ws.read_json("ev/eval.json")["metrics"] == out["metrics"]);
  }

  SUBCASE("seed aggregation against a hand-computed mean and sample stddev") {
    std::vector<double> f1;
    for (int s = 0; s < 3; ++s) {
      REQUIRE(ws.run("eval --config " + cfg.string() + " --seed " + std::to_string(s) + set) == 0);
      f1.push_back(json::parse(ws.read("out.txt"))["metrics"]["macro_f1"].get<double>());
    }
    REQUIRE(ws.run("eval --config " + cfg.string() + " --seeds 3" + set) == 0);
    const json agg = json::parse(ws.read("out.txt"))["aggregate"]["macro_f1"];
    const double mean = (f1[0] + f1[1] + f1[2]) / 3.0;
    const double var = ((f1[0] - mean) * (f1[0] - mean) + (f1[1] - mean) * (f1[1] - mean) +
                        (f1[2] - mean) * (f1[2] - mean)) / 2.0;
    CHECK(agg["mean"].get<double>() == doctest::Approx(mean).epsilon(1e-12));
    CHECK(agg["std"].get<double>() == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
    CHECK(agg["n"] == 3);
  }

  SUBCASE("incompatible reduction factors are a format error") {
    json c8 = tiny_config();
    c8["adapter"]["reduction_factor"] = 8;
    const auto cfg8 = ws.config(c8, "cfg8.json");
    REQUIRE(ws.run("train-domain --config " + cfg8.string() + " --run-dir dom8" + bb) == 0);
    CHECK(ws.run("compose --config " + cfg.string() + bb +
                 " --domain dom8/domain.udapt --task task/task.seed0.udapt --head task/head.seed0.udapt") == 3);
  }

  SUBCASE("a dataset with more classes than the head is a shape error") {
    json c3 = tiny_config();
    c3["data"]["synth"]["num_classes"] = 3;
    REQUIRE(ws.run("synth-gen --config " + ws.config(c3, "cfg3.json").string() + " --run-dir syn3") == 0);
    CHECK(ws.run("eval --config " + cfg.string() + " --seed 0 --data syn3/source_test.tsv" + set) == 3);
  }

  SUBCASE("layer ablation in eval-disable mode") {
    REQUIRE(ws.run("ablate-layers --config " + cfg.string() + " --seed 0 --run-dir abl --spans none,1,1-2" + set) == 0);
    const json rows = ws.read_json("abl/summary.json")["rows"];
    REQUIRE(rows.size() == 4);
    CHECK(rows[0]["macro_f1"] == summary["runs"][0]["eval"]["target_test"]["macro_f1"]);
    CHECK(rows[1]["macro_f1"] == rows[0]["macro_f1"]);
    CHECK(rows[1]["delta"].get<double>() == 0.0);
    // Every adapter removed: the frozen backbone with the trained head.
    REQUIRE(ws.run("eval --config " + cfg.string() + bb + " --head task/head.seed0.udapt") == 0);
    CHECK(rows[3]["macro_f1"] == json::parse(ws.read("out.txt"))["metrics"]["macro_f1"]);
    const std::string csv = ws.read("abl/ablation.csv");
    CHECK(csv.rfind("span,macro_f1,delta\nnone,", 0) == 0);
    CHECK(ws.run("ablate-layers --config " + cfg.string() + " --run-dir abl2 --spans 2-3" + set) == 2);
  }

  SUBCASE("embedding export row count") {
    REQUIRE(ws.run("export-embeddings --config " + cfg.string() + " --run-dir exp" + bb +
                   " --domain dom/domain.seed0.udapt") == 0);
    const std::string csv = ws.read("exp/embeddings.csv");
    const auto lines = std::count(csv.begin(), csv.end(), '\n');
    CHECK(lines == 1 + (48 + 48) * 2);
    CHECK(fs::exists(ws / "exp/embeddings.csv.divergence.json"));
  }
}

TEST_CASE("reduction-factor sweep reports closed-form parameter counts") {
  Workspace ws("sweep");
  json c = tiny_config();
  c["train"]["epochs"] = 1;
  c["train"]["task_only"] = true;
  const auto cfg = ws.config(c);
  REQUIRE(ws.run("pretrain --config " + cfg.string() + " --run-dir bb") == 0);
  REQUIRE(ws.run("sweep-rf --config " + cfg.string() + " --run-dir rf --factors 4,16 --backbone bb/backbone.udapt") == 0);
  const json rows = ws.read_json("rf/summary.json")["rows"];
  REQUIRE(rows.size() == 2);
  CHECK(rows[0]["trainable_params"] == 2 * adapter_parameter_count(16, 4, true));
  CHECK(rows[1]["bottleneck"] == 1);
  CHECK(rows[1]["trainable_params"] == 2 * adapter_parameter_count(16, 1, true));
  CHECK(ws.read("rf/sweep_rf.csv").rfind("rf,trainable_params,macro_f1\n4,", 0) == 0);
}

TEST_CASE("synthetic generation is reproducible") {
  Workspace ws("synth");
  REQUIRE(ws.run("synth-gen --run-dir a --seed 9") == 0);
  REQUIRE(ws.run("synth-gen --run-dir b --seed 9") == 0);
  for (const char* f : {"source_train.tsv", "target_train.tsv", "target_test.eval.tsv"}) {
    CHECK(ws.read(std::string("a/") + f) == ws.read(std::string("b/") + f));
  }
}
