// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "udapter/data.hpp"
#include "udapter/encoder.hpp"
#include "udapter/error.hpp"
#include "udapter/init.hpp"
#include "udapter/weights_io.hpp"

using namespace udapter;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "udapter_data_tests";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_file(const std::string& name, const std::string& content) {
  const auto p = scratch(name);
  std::ofstream(p, std::ios::binary) << content;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Reference FNV-1a 64, byte at a time.
std::uint64_t reference_fnv(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return h;
}

std::vector<std::string> words_of(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

TEST_CASE("tsv loading") {
  CHECK_THROWS_AS(load_tsv(write_file("empty.tsv", ""), true), DataError);

  const auto two = load_tsv(write_file("two.tsv", "pos\tgreat film\nneg\tdull\n"), true);
  CHECK(two.labels.names == std::vector<std::string>{"pos", "neg"});
  CHECK(two.label_indices() == std::vector<std::size_t>{0, 1});
  CHECK(two.records[0].text == "great film");

  try {
    load_tsv(write_file("tab.tsv", "pos\tfine\nneg\tbad\ttext\n"), true);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  CHECK_THROWS_AS(load_tsv(write_file("nolabel.tsv", "pos\tfine\njust text\n"), true), FormatError);
  CHECK_THROWS_AS(load_tsv(write_file("emptylabel.tsv", "\tfine\n"), true), DataError);
  CHECK_THROWS_AS(load_tsv(write_file("badutf.tsv", "pos\t\xff\xfe\n"), true), DataError);

  const auto unl = load_tsv(write_file("unl.tsv", "one\r\n\ntwo\n"), false);
  CHECK(unl.size() == 2);
  CHECK_FALSE(unl.labeled());
  CHECK(unl.records[0].text == "one");

  // Dev and test reuse the training label map without permuting it.
  LabelMap map;
  load_tsv(write_file("train.tsv", "b\tx\na\ty\n"), true, &map);
  const auto dev = load_tsv(write_file("dev.tsv", "a\tz\nb\tw\n"), true, &map, true);
  CHECK(dev.label_indices() == std::vector<std::size_t>{1, 0});
  CHECK_THROWS_AS(load_tsv(write_file("dev2.tsv", "c\tz\n"), true, &map, true), DataError);
  CHECK(LabelMap::from_json(map.to_json()).names == map.names);
}

TEST_CASE("tokenizer") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(tokenize("", 4096, 16) == std::vector<std::uint32_t>{kBosId});
  const auto the = static_cast<std::uint32_t>(4 + reference_fnv("the") % 4092);
  CHECK(tokenize("The the THE", 4096, 16) == std::vector<std::uint32_t>{kBosId, the, the, the});
  CHECK(tokenize("(the),", 4096, 16) == std::vector<std::uint32_t>{kBosId, the});
  CHECK(tokenize("  the the　the\t", 4096, 16).size() == 4);
  CHECK(tokenize("...", 4096, 16) == std::vector<std::uint32_t>{kBosId});
  CHECK(tokenize("a b c d e", 4096, 3).size() == 3);
  CHECK(tokenize("don't", 4096, 4)[1] == 4 + reference_fnv("don't") % 4092);
  CHECK(tokenize("a b", 4, 4) == std::vector<std::uint32_t>{kBosId, kUnkId, kUnkId});
  CHECK_THROWS_AS(tokenize("a", 3, 4), ConfigError);
  for (std::size_t v : {5, 17, 4096}) {
    for (auto id : tokenize("Some words, here; and there!", v, 32)) CHECK(id < v);
  }
}

TEST_CASE("vector csv") {
  const auto ds = load_vector_csv(write_file("v.csv", "1,2,3,pos\n-0.5, 4e-1 ,0,neg\n"), true);
  CHECK(ds.width == 3);
  CHECK(ds.rows[1] == std::vector<double>{-0.5, 0.4, 0.0});
  CHECK(ds.row_labels[1] == std::optional<std::size_t>(1));
  CHECK_THROWS_AS(load_vector_csv(write_file("w.csv", "1,2\n1,2,3\n"), false), FormatError);
  CHECK_THROWS_AS(load_vector_csv(write_file("x.csv", "1,abc\n"), false), DataError);

  const auto enc = encode_vectors(ds, 4, 99);
  Rng rng(99);
  const auto proj_t = glorot_uniform(4, 3, rng, false);
  const auto proj = proj_t.values();
  for (std::size_t o = 0; o < 4; ++o) {
    double expect = 0;
    for (std::size_t k = 0; k < 3; ++k) expect += proj[o * 3 + k] * ds.rows[0][k];
    CHECK(enc.vectors[0][o] == doctest::Approx(expect).epsilon(1e-15));
  }
  CHECK(enc.labels == std::vector<std::size_t>{0, 1});
}

TEST_CASE("paired batches") {
  Rng rng(7);
  PairedBatches same(4, 4, 4, rng);
  CHECK(same.epoch().size() == 1);

  PairedBatches pb(10, 4, 2, rng);
  const auto epoch = pb.epoch();
  REQUIRE(epoch.size() == 5);
  std::multiset<std::size_t> src;
  for (const auto& p : epoch) {
    CHECK(p.source.size() == 2);
    CHECK(p.target.size() == 2);
    src.insert(p.source.begin(), p.source.end());
  }
  CHECK(src == std::multiset<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  // Target wraps after every two batches; each pass is a permutation of 0..3.
  for (std::size_t pass = 0; pass < 2; ++pass) {
    std::set<std::size_t> seen;
    for (std::size_t b = 2 * pass; b < 2 * pass + 2; ++b) seen.insert(epoch[b].target.begin(), epoch[b].target.end());
    CHECK(seen == std::set<std::size_t>{0, 1, 2, 3});
  }
  CHECK(epoch[4].target[0] != epoch[4].target[1]);

  PairedBatches odd(5, 3, 2, rng);
  const auto e2 = odd.epoch();
  REQUIRE(e2.size() == 3);
  CHECK(e2[2].source.size() == 1);
  CHECK(e2[2].target.size() == 1);

  auto order = [](std::uint64_t seed) {
    Rng r(seed);
    PairedBatches p(10, 4, 3, r);
    std::vector<std::size_t> flat;
    for (int e = 0; e < 2; ++e)
      for (const auto& b : p.epoch()) {
        flat.insert(flat.end(), b.source.begin(), b.source.end());
        flat.insert(flat.end(), b.target.begin(), b.target.end());
      }
    return flat;
  };
  CHECK(order(3) == order(3));
  CHECK(order(3) != order(4));
  CHECK_THROWS_AS(PairedBatches(3, 3, 0, rng), ConfigError);
  CHECK_THROWS_AS(PairedBatches(0, 3, 2, rng), DataError);

  const auto sb = shuffled_batches(7, 3, rng);
  CHECK(sb.size() == 3);
  CHECK(sb[2].size() == 1);
}

TEST_CASE("synthetic shift generator") {
  SynthShiftConfig cfg{.shift = 0.8, .train_size = 200, .dev_size = 50, .test_size = 50, .seed = 5};
  const auto data = synth_generate(cfg);
  CHECK(data.source.train.size() == 200);
  CHECK(data.target.test.size() == 50);

  auto marker_rate = [](const TextDataset& ds, std::size_t cls) {
    double marked = 0, total = 0;
    for (const auto& r : ds.records) {
      if (*r.label != cls) continue;
      total += 1;
      const auto w = words_of(r.text);
      marked += std::any_of(w.begin(), w.end(), [](const std::string& s) { return s.rfind("mk", 0) == 0; });
    }
    return marked / total;
  };
  CHECK(marker_rate(data.source.train, 0) == 0.0);
  CHECK(marker_rate(data.source.train, 1) > 0.6);
  CHECK(marker_rate(data.target.train, 0) > 0.6);
  CHECK(marker_rate(data.target.train, 1) > 0.6);

  for (const auto* ds : {&data.source.train, &data.target.dev}) {
    for (const auto& r : ds->records) {
      auto w = words_of(r.text);
      CHECK(w.size() >= 6);
      CHECK(w.size() <= 12);
      // Label is the class holding the most keywords.
      std::map<char, int> counts;
      for (auto s : w) {
        std::transform(s.begin(), s.end(), s.begin(), ::tolower);
        if (s.rfind("kw", 0) == 0) counts[s[2]]++;
      }
      const auto best = std::max_element(counts.begin(), counts.end(),
                                         [](auto& a, auto& b) { return a.second < b.second; });
      CHECK(static_cast<std::size_t>(best->first - '0') == *r.label);
    }
  }

  const auto none = synth_generate({.shift = 0.0, .train_size = 100, .dev_size = 10, .test_size = 10, .seed = 5});
  CHECK(marker_rate(none.source.train, 1) == 0.0);
  CHECK(marker_rate(none.target.train, 0) == 0.0);

  const auto a = write_synth(data, scratch("synth_a"));
  const auto b = write_synth(synth_generate(cfg), scratch("synth_b"));
  CHECK(slurp(a.source_train) == slurp(b.source_train));
  CHECK(slurp(a.target_test) == slurp(b.target_test));
  const auto trg = load_tsv(a.target_train, false);
  CHECK(trg.size() == 200);
  CHECK_THROWS_AS(load_tsv(a.target_train, true), FormatError);
  CHECK(load_tsv(a.target_dev, true).labeled());

  CHECK_THROWS_AS(synth_generate({.shift = 1.5}), ConfigError);
  CHECK(SynthShiftConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  CHECK_THROWS_AS(SynthShiftConfig::from_json({{"shfit", 0.1}}), ConfigError);
}
