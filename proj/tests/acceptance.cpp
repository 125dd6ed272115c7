// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <spdlog/spdlog.h>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "test_util.hpp"
#include "udapter/adapters.hpp"
#include "udapter/divergence.hpp"
#include "udapter/encoder.hpp"
#include "udapter/gradcheck.hpp"
#include "udapter/ops.hpp"
#include "udapter/training.hpp"
#include "udapter/weights_io.hpp"

using namespace udapter;
using namespace udapter::oracles;
using udapter::testing::random_away_from_zero;
using udapter::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("FAILED " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int failures = 0;

void run_criterion(int id, const std::string& name, double budget_seconds, const std::function<void(Outcome&)>& body) {
  Outcome out;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(out);
  } catch (const std::exception& e) {
    out.require(false, std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_seconds > 0) out.require(secs < budget_seconds, "runtime " + fmt("%.1f", secs) + " s over budget");
  for (const auto& n : out.notes) std::printf("    %s\n", n.c_str());
  std::printf("%s criterion %d: %s (%.1f s)\n", out.pass ? "PASS" : "FAIL", id, name.c_str(), secs);
  std::fflush(stdout);
  if (!out.pass) ++failures;
}

// ---------------------------------------------------------------- 1

void gradient_suite(Outcome& out) {
  std::map<std::string, double> worst;
  auto track = [&](const std::string& op, double err) { worst[op] = std::max(worst[op], err); };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(1000 + seed);
    auto a = random_tensor({3, 4}, rng), c = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto w = random_tensor({5, 4}, rng), bias = random_tensor({5}, rng);
    auto gain = random_tensor({4}, rng, 0.5, 1.5), shift = random_tensor({4}, rng);
    auto kinked = random_away_from_zero({3, 4}, rng);
    const auto proj = random_tensor({3, 4}, rng, -1, 1, false);
    auto weighted = [&](const Tensor& t) { return sum(mul(t, proj)); };

    track("add", grad_check([&] { return weighted(add(a, c)); }, {a, c}).max_rel_error);
    track("sub", grad_check([&] { return weighted(sub(a, c)); }, {a, c}).max_rel_error);
    track("mul", grad_check([&] { return weighted(mul(a, c)); }, {a, c}).max_rel_error);
    track("scale", grad_check([&] { return weighted(scale(a, -1.7)); }, {a}).max_rel_error);
    track("tanh", grad_check([&] { return weighted(tanh(a)); }, {a}).max_rel_error);
    track("exp", grad_check([&] { return weighted(exp(a)); }, {a}).max_rel_error);
    track("gelu", grad_check([&] { return weighted(gelu(a)); }, {a}).max_rel_error);
    track("relu", grad_check([&] { return weighted(relu(kinked)); }, {kinked}).max_rel_error);
    track("matmul", grad_check([&] { return sum(matmul(a, b)); }, {a, b}).max_rel_error);
    track("linear", grad_check([&] { return sum(tanh(linear(a, w, bias))); }, {a, w, bias}).max_rel_error);
    track("layer_norm",
          grad_check([&] { return weighted(layer_norm(a, gain, shift)); }, {a, gain, shift}, 1e-3, 1e-4).max_rel_error);
    const std::vector<std::size_t> labels{0, 3, 1};
    track("softmax_cross_entropy", grad_check([&] { return softmax_cross_entropy(a, labels); }, {a}).max_rel_error);

    auto q = random_tensor({2, 3, 4}, rng), k = random_tensor({2, 3, 4}, rng), v = random_tensor({2, 3, 4}, rng);
    const auto proj3 = random_tensor({2, 3, 4}, rng, -1, 1, false);
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1};
    track("attention",
          grad_check([&] { return sum(mul(attention(q, k, v, 2, mask), proj3)); }, {q, k, v}).max_rel_error);

    for (auto f : {Nonlinearity::kTanh, Nonlinearity::kRelu}) {
      AdapterWeights aw;
      Tensor h, r;
      // For relu, redraw until every pre-activation is clear of the kink.
      for (;;) {
        aw = init_adapter(6, 3, f, true, rng);
        aw.up_weight = random_tensor({6, 3}, rng);
        aw.up_bias = random_tensor({6}, rng);
        aw.down_bias = random_tensor({3}, rng);
        h = random_tensor({4, 6}, rng);
        r = random_tensor({4, 6}, rng);
        double margin = INFINITY;
        for (std::size_t i = 0; i < 4; ++i) {
          for (std::size_t j = 0; j < 3; ++j) {
            double pre = aw.down_bias.values()[j];
            for (std::size_t t = 0; t < 6; ++t) pre += aw.down_weight.values()[j * 6 + t] * h.values()[i * 6 + t];
            margin = std::min(margin, std::abs(pre));
          }
        }
        if (f == Nonlinearity::kTanh || margin > 0.05) break;
      }
      const auto p = random_tensor({4, 6}, rng, -1, 1, false);
      auto params = aw.parameters();
      params.push_back(h);
      params.push_back(r);
      track("adapter_forward", grad_check([&] { return sum(mul(adapter_forward(h, r, aw), p)); }, params).max_rel_error);
    }

    auto x = random_tensor({5, 3}, rng), y = random_tensor({4, 3}, rng, -0.5, 1.5);
    for (auto est : {MmdEstimator::kBiased, MmdEstimator::kUnbiased}) {
      const DivergenceSpec spec{.estimator = est, .base_bandwidth = 0.9};
      track("mk_mmd", grad_check([&] { return mk_mmd(x, y, spec); }, {x, y}).max_rel_error);
    }
    track("coral", grad_check([&] { return coral(x, y); }, {x, y}).max_rel_error);
    auto inner = random_tensor({5, 3}, rng);
    std::vector<double> framed;
    const auto other = random_tensor({4, 3}, rng, -1, 1, false);
    framed.assign(other.values().begin(), other.values().end());
    for (double e : {-2.0, -2.0, -2.0, 2.0, 2.0, 2.0}) framed.push_back(e);
    const auto frame = Tensor::from_values({6, 3}, framed, false);
    track("cmd", grad_check([&] { return cmd(inner, frame); }, {inner}).max_rel_error);
  }
  const std::set<std::string> smooth{"add", "sub", "mul", "scale", "tanh", "exp", "gelu"};
  for (const auto& [op, err] : worst) {
    const double tol = smooth.count(op) ? 1e-4 : 1e-3;
    out.require(err < tol, op + " max rel error " + fmt("%.3g", err));
    out.note(op + " " + fmt("%.2e", err) + " (< " + fmt("%.0e", tol) + ")");
  }
}

// ---------------------------------------------------------------- 2

Tensor shifted_gaussian(std::size_t n, std::size_t h, double delta, Rng& rng) {
  std::vector<double> v(n * h);
  for (auto& x : v) x = rng.normal() + delta;
  return Tensor::from_values({n, h}, std::move(v));
}

void divergence_oracle(Outcome& out) {
  double worst = 0.0, worst_identical = 0.0;
  std::size_t pairs = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(5000 + seed);
    const std::size_t n = 2 + rng.below(7), m = 2 + rng.below(7), h = 1 + rng.below(5);
    const auto x = random_tensor({n, h}, rng, -2, 2, false), y = random_tensor({m, h}, rng, -1.5, 2.5, false);
    const auto rx = rows_of(x), ry = rows_of(y);
    const DivergenceSpec unbiased{.estimator = MmdEstimator::kUnbiased};
    for (double e : {std::abs(mk_mmd(x, y).item() - brute_mk_mmd(rx, ry, false)),
                     std::abs(mk_mmd(x, y, unbiased).item() - brute_mk_mmd(rx, ry, true)),
                     std::abs(coral(x, y).item() - brute_coral(rx, ry)),
                     std::abs(cmd(x, y, 5).item() - brute_cmd(rx, ry, 5)),
                     std::abs(cmd(x, y, 3).item() - brute_cmd(rx, ry, 3))}) {
      worst = std::max(worst, e);
    }
    for (double e : {std::abs(mk_mmd(x, x).item()), std::abs(cmd(x, x).item()), std::abs(coral(x, x).item())}) {
      worst_identical = std::max(worst_identical, e);
    }
    ++pairs;
  }
  out.require(worst < 1e-10, "brute-force agreement " + fmt("%.3g", worst));
  out.require(worst_identical < 1e-10, "identical batches " + fmt("%.3g", worst_identical));
  out.note(std::to_string(pairs) + " random pairs, max |lib - brute| " + fmt("%.2e", worst) +
           ", identical-batch max " + fmt("%.2e", worst_identical));

  Rng rng(77);
  const std::size_t n = 256, h = 4;
  const auto x = shifted_gaussian(n, h, 0.0, rng);
  const auto base = shifted_gaussian(n, h, 0.0, rng);
  std::map<std::string, std::vector<double>> series;
  for (double delta : {0.0, 0.5, 1.0, 2.0}) {
    std::vector<double> v(base.values().begin(), base.values().end());
    for (auto& e : v) e += delta;
    const auto y = Tensor::from_values({n, h}, std::move(v));
    series["mk_mmd"].push_back(mk_mmd(x, y).item());
    series["cmd"].push_back(cmd(x, y).item());
    series["coral"].push_back(coral(x, y).item());
  }
  for (const auto& [name, vals] : series) {
    bool increasing = true;
    for (std::size_t i = 1; i < vals.size(); ++i) increasing = increasing && vals[i] > vals[i - 1];
    std::string line = name + " over delta {0, 0.5, 1, 2}:";
    for (double v : vals) line += " " + fmt("%.6g", v);
    out.note(line + (increasing ? "" : "  (not strictly increasing: covariance ignores a mean shift)"));
    out.require(increasing, name + " strictly increasing in the mean gap");
  }
}

// ---------------------------------------------------------------- 3

void schedule(Outcome& out) {
  out.require(lambda_schedule(0.0, 10.0) == 0.0, "lambda(0) == 0");
  const double one = lambda_schedule(1.0, 10.0);
  out.require(std::abs(one - 0.99990920) <= 1e-8, "lambda(1) = " + fmt("%.10f", one));
  out.note("lambda(1, gamma=10) = " + fmt("%.10f", one));
  double prev = -INFINITY;
  bool increasing = true;
  for (int i = 0; i < 1000; ++i) {
    const double l = lambda_schedule(i / 999.0, 10.0);
    increasing = increasing && l > prev;
    prev = l;
  }
  out.require(increasing, "strictly increasing on a 1000-point grid");
}

// ---------------------------------------------------------------- 4

std::vector<std::uint64_t> per_tensor(const std::vector<Tensor>& ts) {
  std::vector<std::uint64_t> out;
  for (const auto& t : ts) out.push_back(checksum(std::vector<Tensor>{t}));
  return out;
}

bool all_changed(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) return false;
  }
  return !a.empty();
}

AdapterSet perturbed_set(const std::string& role, std::size_t L, std::size_t h, const AdapterConfig& ac, Rng& rng) {
  auto set = init_adapter_set(role, L, h, ac, rng, true);
  for (auto& l : set.layers) l->up_weight = random_tensor({h, bottleneck_dim(h, ac.reduction_factor)}, rng);
  return set;
}

void freezing(Outcome& out) {
  const EncoderConfig ec{.layers = 2, .hidden = 16, .heads = 2, .ff = 24, .vocab = 256, .max_seq = 14};
  const AdapterConfig ac{.reduction_factor = 4};
  Rng rng(31);
  EncoderWeights bb = EncoderWeights::init(ec, rng);
  bb.set_frozen(true);
  const auto d = synth_generate({.train_size = 48, .dev_size = 16, .test_size = 8, .seed = 4});
  const auto src = encode_text(d.source.train, 256, 14), trg = encode_text(d.target.train, 256, 14, false);
  const std::uint64_t bb_sum = bb.checksum();

  // Zero-initialized adapters are the identity on every tap.
  AdapterStack zero(2);
  zero.push(init_adapter_set("domain", 2, 16, ac, rng, false));
  zero.push(init_adapter_set("task", 2, 16, ac, rng, true));
  const auto batch = TokenBatch::from_sequences(src.tokens);
  const auto plain = encode(batch, bb), adapted = encode(batch, bb, &zero);
  bool identical = true;
  for (std::size_t l = 0; l < 2; ++l) {
    for (const auto* taps : {&plain.taps.output, &plain.taps.adapted}) {
      const auto& other = taps == &plain.taps.output ? adapted.taps.output : adapted.taps.adapted;
      const auto a = (*taps)[l].values(), b = other[l].values();
      identical = identical && std::equal(a.begin(), a.end(), b.begin(), b.end());
    }
  }
  const auto pa = plain.pooled.values(), pb = adapted.pooled.values();
  identical = identical && std::equal(pa.begin(), pa.end(), pb.begin(), pb.end());
  out.require(identical, "zero-init adapters leave outputs bit-identical");

  const std::vector<std::size_t> rows{0, 1, 2, 3, 4, 5, 6, 7};
  const DivergenceSpec spec;
  {
    AdapterStack stack(2);
    stack.push(perturbed_set("domain", 2, 16, ac, rng));
    AdamW opt(stack.trainable_parameters(), {.lr = 1e-2});
    const auto before = per_tensor(stack.sets()[0].parameters());
    domain_step(bb, stack, opt, src, rows, trg, rows, spec, Pooling::kFirstToken);
    out.require(all_changed(before, per_tensor(stack.sets()[0].parameters())), "domain step updates domain adapters");
    out.require(bb.checksum() == bb_sum, "domain step leaves the backbone");
  }
  {
    AdapterStack stack(2);
    auto dom = perturbed_set("domain", 2, 16, ac, rng);
    dom.set_trainable(false);
    stack.push(dom);
    stack.push(perturbed_set("task", 2, 16, ac, rng));
    auto head = ClassifierHead::zeros(2, 16);
    head.weight = random_tensor({2, 16}, rng);
    auto params = stack.trainable_parameters();
    params.push_back(head.weight);
    params.push_back(head.bias);
    AdamW opt(params, {.lr = 1e-2});
    const auto dom_before = per_tensor(stack.sets()[0].parameters());
    const auto train_before = per_tensor(params);
    task_step(bb, stack, head, opt, src, rows, Pooling::kFirstToken);
    out.require(per_tensor(stack.sets()[0].parameters()) == dom_before, "task step leaves domain adapters");
    out.require(all_changed(train_before, per_tensor(params)), "task step updates task adapters and head");
    out.require(bb.checksum() == bb_sum, "task step leaves the backbone");
  }
  {
    AdapterStack stack(2);
    stack.push(perturbed_set("joint", 2, 16, ac, rng));
    auto head = ClassifierHead::zeros(2, 16);
    head.weight = random_tensor({2, 16}, rng);
    auto params = stack.trainable_parameters();
    params.push_back(head.weight);
    params.push_back(head.bias);
    AdamW opt(params, {.lr = 1e-2});
    const auto before = per_tensor(params);
    joint_step(bb, stack, head, opt, src, rows, trg, rows, 0.5, spec, Pooling::kFirstToken);
    out.require(all_changed(before, per_tensor(params)), "joint step updates joint adapters and head");
    out.require(bb.checksum() == bb_sum, "joint step leaves the backbone");
  }

  const TrainPlan plan{.epochs = 1, .batch_size = 16, .lr = 1e-2, .eval_every = 0};
  const auto dom = train_domain_adapter(bb, src, trg, plan, ac);
  out.require(bb.checksum() == bb_sum, "backbone constant through domain training");
  const auto dom_sum = checksum(dom.adapters.parameters());
  const auto task = train_task_adapter(bb, &dom.adapters, src, plan, ac);
  out.require(bb.checksum() == bb_sum, "backbone constant through task training");
  out.require(checksum(dom.adapters.parameters()) == dom_sum, "domain adapters constant through task training");
  const auto joint = train_joint(bb, src, trg, plan, ac);
  out.require(bb.checksum() == bb_sum, "backbone constant through joint training");

  // Container round trips: encode -> decode -> encode and save -> load -> save.
  const fs::path dir = fs::temp_directory_path() / "udapter_acceptance_io";
  fs::create_directories(dir);
  bool bytes_equal = true;
  const std::vector<WeightFile> files{encoder_to_file(bb), adapter_set_to_file(dom.adapters),
                                      adapter_set_to_file(task.adapters), head_to_file(*task.head),
                                      adapter_set_to_file(joint.adapters)};
  for (const auto& f : files) {
    const auto bytes = encode_weights(f);
    bytes_equal = bytes_equal && encode_weights(decode_weights(bytes)) == bytes;
  }
  save_encoder(bb, dir / "a.udapt");
  save_encoder(load_encoder(dir / "a.udapt"), dir / "b.udapt");
  bytes_equal = bytes_equal && read_file_bytes(dir / "a.udapt") == read_file_bytes(dir / "b.udapt");
  save_adapters(task.adapters, dir / "c.udapt");
  save_adapters(load_adapters(dir / "c.udapt", 16, 2), dir / "d.udapt");
  bytes_equal = bytes_equal && read_file_bytes(dir / "c.udapt") == read_file_bytes(dir / "d.udapt");
  save_head(*task.head, dir / "e.udapt");
  save_head(load_head(dir / "e.udapt", 16), dir / "f.udapt");
  bytes_equal = bytes_equal && read_file_bytes(dir / "e.udapt") == read_file_bytes(dir / "f.udapt");
  fs::remove_all(dir);
  out.require(bytes_equal, "UDAPT1 round trips are byte-identical");
}

// ---------------------------------------------------------------- 5, 6

constexpr std::size_t kSeeds = 3;
constexpr std::size_t kHidden = 64, kLayers = 4, kVocab = 1024, kMaxSeq = 16;

struct SeedRun {
  TrainResult domain;
  TrainResult task;  // over the frozen domain adapters above
};

// Artifacts of the desk experiment, reused by the composability check.
struct Experiment {
  bool ready = false;
  EncoderWeights backbone;
  EncodedDataset source_train, source_dev, source_test;
  std::vector<SeedRun> two_step;
};
Experiment experiment;

const AdapterConfig kDeskAdapter{.reduction_factor = 8};

TrainPlan desk_plan(std::uint64_t seed) {
  return {.epochs = 10, .batch_size = 32, .lr = 1e-2, .seed = seed, .eval_every = 1};
}

double accuracy_of(const EncodedDataset& ds, const std::vector<const AdapterSet*>& sets, const ClassifierHead& head) {
  AdapterStack stack(kLayers);
  for (const auto* set : sets) stack.push(*set);
  return evaluate(ds, experiment.backbone, &stack, head, Pooling::kFirstToken).accuracy;
}

SynthShiftConfig desk_synth(std::uint64_t seed, double shift) {
  return {.shift = shift, .train_size = 240, .dev_size = 120, .test_size = 480, .seed = seed};
}

void desk_experiment(Outcome& out) {
  auto& ex = experiment;
  const auto d = synth_generate(desk_synth(1, 0.8));
  ex.source_train = encode_text(d.source.train, kVocab, kMaxSeq);
  ex.source_dev = encode_text(d.source.dev, kVocab, kMaxSeq);
  ex.source_test = encode_text(d.source.test, kVocab, kMaxSeq);
  const auto target_train = encode_text(d.target.train, kVocab, kMaxSeq, false);
  const auto target_dev = encode_text(d.target.dev, kVocab, kMaxSeq);
  const auto target_test = encode_text(d.target.test, kVocab, kMaxSeq);

  std::vector<std::vector<std::uint32_t>> corpus = ex.source_train.tokens;
  corpus.insert(corpus.end(), target_train.tokens.begin(), target_train.tokens.end());
  const EncoderConfig ec{.layers = kLayers, .hidden = kHidden, .heads = 4, .ff = 128, .vocab = kVocab, .max_seq = kMaxSeq};
  auto pre = pretrain_backbone(corpus, ec, {.epochs = 50, .batch_size = 32, .lr = 1e-3, .seed = 0});
  ex.backbone = std::move(pre.weights);
  ex.backbone.set_frozen(true);
  out.note("pretrain MLM loss " + fmt("%.3f", pre.epoch_losses.front()) + " -> " + fmt("%.3f", pre.epoch_losses.back()));

  const EvalSets eval{&ex.source_dev, &target_dev};
  double src[3] = {}, trg[3] = {};
  double worst_joint = 0.0;
  std::size_t joint_steps = 0;
  bool div_down = true;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const auto plan = desk_plan(seed);
    const auto only = train_task_adapter(ex.backbone, nullptr, ex.source_train, plan, kDeskAdapter, eval);
    src[0] += accuracy_of(ex.source_test, {&only.adapters}, *only.head);
    trg[0] += accuracy_of(target_test, {&only.adapters}, *only.head);

    SeedRun run;
    run.domain = train_domain_adapter(ex.backbone, ex.source_train, target_train, plan, kDeskAdapter);
    const double before = run.domain.initial_layer_div.back(), after = run.domain.final_layer_div.back();
    div_down = div_down && after < before;
    out.note("seed " + std::to_string(seed) + " final-layer divergence " + fmt("%.4f", before) + " -> " +
             fmt("%.4f", after));
    run.task = train_task_adapter(ex.backbone, &run.domain.adapters, ex.source_train, plan, kDeskAdapter, eval);
    src[1] += accuracy_of(ex.source_test, {&run.domain.adapters, &run.task.adapters}, *run.task.head);
    trg[1] += accuracy_of(target_test, {&run.domain.adapters, &run.task.adapters}, *run.task.head);
    ex.two_step.push_back(std::move(run));

    MetricsLog log;
    const auto joint = train_joint(ex.backbone, ex.source_train, target_train, plan, kDeskAdapter, eval, &log);
    src[2] += accuracy_of(ex.source_test, {&joint.adapters}, *joint.head);
    trg[2] += accuracy_of(target_test, {&joint.adapters}, *joint.head);
    for (const auto& r : log.records()) {
      if (r["kind"] != "step") continue;
      const double lambda = r["lambda"].get<double>();
      const double mixed = lambda * r["task_loss"].get<double>() + (1.0 - lambda) * r["div_loss"].get<double>();
      worst_joint = std::max(worst_joint, std::abs(r["loss"].get<double>() - mixed));
      ++joint_steps;
    }
  }
  const char* names[] = {"task-only", "two-step", "joint"};
  for (int i = 0; i < 3; ++i) {
    src[i] /= kSeeds;
    trg[i] /= kSeeds;
    out.note(std::string(names[i]) + " accuracy source " + fmt("%.4f", src[i]) + " target " + fmt("%.4f", trg[i]));
  }
  ex.ready = true;
  out.require(src[0] - trg[0] >= 0.10, "(a) task-only source->target drop " + fmt("%.4f", src[0] - trg[0]) + " >= 0.10");
  out.require(trg[1] - trg[0] >= 0.03, "(b) two-step gain " + fmt("%.4f", trg[1] - trg[0]) + " >= 0.03");
  out.require(trg[2] - trg[0] >= 0.03, "(b) joint gain " + fmt("%.4f", trg[2] - trg[0]) + " >= 0.03");
  out.require(joint_steps > 0 && worst_joint <= 1e-6,
              "(c) joint loss decomposition over " + std::to_string(joint_steps) + " steps, max error " +
                  fmt("%.3g", worst_joint));
  out.require(div_down, "(d) final-layer divergence falls below its zero-init value");
}

// A second target domain with the same source: the task adapter trained over
// the pair-1 domain adapters is reused under the pair-2 domain adapters.
void composability(Outcome& out) {
  auto& ex = experiment;
  if (!ex.ready) throw std::runtime_error("needs the desk experiment artifacts");
  const auto d2 = synth_generate(desk_synth(2, 0.6));
  const auto target_train = encode_text(d2.target.train, kVocab, kMaxSeq, false);
  const auto target_test = encode_text(d2.target.test, kVocab, kMaxSeq);
  const EvalSets eval{&ex.source_dev, nullptr};
  double matched = 0.0, swapped = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const auto plan = desk_plan(seed);
    const auto dom2 = train_domain_adapter(ex.backbone, ex.source_train, target_train, plan, kDeskAdapter);
    const auto task2 = train_task_adapter(ex.backbone, &dom2.adapters, ex.source_train, plan, kDeskAdapter, eval);
    const auto& pair1 = ex.two_step[seed];
    const double m = accuracy_of(target_test, {&dom2.adapters, &task2.adapters}, *task2.head);
    const double s = accuracy_of(target_test, {&dom2.adapters, &pair1.task.adapters}, *pair1.task.head);
    out.note("seed " + std::to_string(seed) + " matched " + fmt("%.4f", m) + " swapped " + fmt("%.4f", s));
    matched += m;
    swapped += s;
  }
  matched /= kSeeds;
  swapped /= kSeeds;
  out.require(matched - swapped <= 0.05, "degradation " + fmt("%.4f", matched - swapped) + " <= 0.05");
}

// ---------------------------------------------------------------- 7

int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd =
      "cd '" + dir.string() + "' && UDAPTER_LOG=error '" UDAPTER_CLI_PATH "' " + args + " > stdout.txt 2> stderr.txt";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "timings.json") continue;
    const auto bytes = read_file_bytes(e.path());
    files[fs::relative(e.path(), root).string()] = std::string(bytes.begin(), bytes.end());
  }
  return files;
}

void determinism(Outcome& out) {
  const nlohmann::json config = {
      {"encoder", {{"L", 2}, {"h", 16}, {"heads", 2}, {"ff", 32}, {"vocab", 256}, {"max_seq", 16}}},
      {"adapter", {{"reduction_factor", 4}}},
      {"train", {{"epochs", 2}, {"batch_size", 16}, {"lr", 1e-2}}},
      {"pretrain", {{"epochs", 2}}},
      {"data", {{"synth", {{"train_size", 48}, {"dev_size", 24}, {"test_size", 24}, {"seed", 3}}}}}};
  const std::string bb = " --backbone bb/backbone.udapt";
  const std::string set = bb + " --domain 'dom/domain.seed{seed}.udapt' --task 'task/task.seed{seed}.udapt'" +
                          " --head 'task/head.seed{seed}.udapt'";
  const std::vector<std::string> commands{
      "synth-gen --config cfg.json --run-dir syn",
      "pretrain --config cfg.json --run-dir bb",
      "train-domain --config cfg.json --run-dir dom --seeds 2" + bb,
      "train-task --config cfg.json --run-dir task --seeds 2" + bb + " --domain 'dom/domain.seed{seed}.udapt'",
      "train-task --config cfg.json --run-dir only --task-only" + bb,
      "train-joint --config cfg.json --run-dir joint" + bb,
      "eval --config cfg.json --run-dir ev --seeds 2" + set,
      "compose --config cfg.json --run-dir comp --seed 1" + set,
      "ablate-layers --config cfg.json --run-dir abl --seed 0 --spans none,1,2" + set,
      "ablate-layers --config cfg.json --run-dir ablr --seed 0 --spans 1 --retrain" + bb,
      "sweep-rf --config cfg.json --run-dir rf --factors 4,8" + bb,
      "export-embeddings --config cfg.json --run-dir exp" + bb + " --domain dom/domain.seed0.udapt"};
  const fs::path root = fs::temp_directory_path() / "udapter_acceptance_det";
  fs::remove_all(root);
  for (const char* ws : {"a", "b"}) {
    fs::create_directories(root / ws);
    std::ofstream(root / ws / "cfg.json") << config.dump(2);
    for (const auto& c : commands) {
      const int code = run_cli(root / ws, c);
      out.require(code == 0, std::string(ws) + ": '" + c + "' exited " + std::to_string(code));
    }
  }
  const auto a = tree_bytes(root / "a"), b = tree_bytes(root / "b");
  std::size_t checkpoints = 0, logs = 0;
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    out.require(it != b.end() && it->second == bytes, "identical " + name);
    checkpoints += name.ends_with(".udapt");
    logs += name.ends_with("metrics.jsonl");
  }
  out.require(a.size() == b.size(), "same file set");
  out.note(std::to_string(commands.size()) + " commands, " + std::to_string(a.size()) + " files compared (" +
           std::to_string(checkpoints) + " checkpoints, " + std::to_string(logs) + " metrics logs)");
  fs::remove_all(root);
}

// ---------------------------------------------------------------- 8

void evaluation_oracle(Outcome& out) {
  double worst = 0.0;
  int degenerate = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(900 + trial);
    const std::size_t classes = 2 + rng.below(3), n = 1 + rng.below(15);
    std::vector<std::size_t> y(n), p(n);
    const int mode = trial % 5;  // 0: all labels one class, 1: all predictions one class, 2: both
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = mode == 0 || mode == 2 ? 1 : rng.below(classes);
      p[i] = mode == 1 || mode == 2 ? 1 : rng.below(classes);
    }
    degenerate += mode <= 2;
    const auto m = compute_metrics(y, p, classes);
    double correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += y[i] == p[i];
    worst = std::max({worst, std::abs(m.macro_f1 - oracle_macro_f1(y, p, classes)),
                      std::abs(m.accuracy - correct / double(n))});
    for (std::size_t t = 0; t < classes; ++t) {
      for (std::size_t q = 0; q < classes; ++q) {
        std::size_t count = 0;
        for (std::size_t i = 0; i < n; ++i) count += y[i] == t && p[i] == q;
        out.require(m.confusion[t][q] == count, "confusion cell");
      }
    }
  }
  out.require(worst < 1e-12, "macro-F1/accuracy agreement " + fmt("%.3g", worst));
  out.note("50 prediction sets (" + std::to_string(degenerate) + " degenerate), max error " + fmt("%.2e", worst));
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  run_criterion(1, "gradient suite", 30, gradient_suite);
  run_criterion(2, "divergence oracle suite", 30, divergence_oracle);
  run_criterion(3, "adaptation-factor schedule", 0, schedule);
  run_criterion(4, "freezing and identity contracts", 60, freezing);
  run_criterion(5, "desk-scale adaptation experiment", 600, desk_experiment);
  run_criterion(6, "domain adapter composability", 0, composability);
  run_criterion(7, "command determinism", 0, determinism);
  run_criterion(8, "evaluation oracle", 0, evaluation_oracle);
  return failures == 0 ? 0 : 1;
}
