// SPDX-License-Identifier: Apache-2.0
#include "udapter/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "udapter/encoder.hpp"
#include "udapter/error.hpp"
#include "udapter/init.hpp"
#include "udapter/weights_io.hpp"

namespace udapter {

std::optional<std::size_t> LabelMap::find(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names.begin());
}

std::size_t LabelMap::intern(const std::string& name) {
  if (const auto i = find(name)) return *i;
  names.push_back(name);
  return names.size() - 1;
}

nlohmann::json LabelMap::to_json() const { return names; }

LabelMap LabelMap::from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw FormatError("label map must be a JSON array of names");
  LabelMap m;
  for (const auto& e : j) {
    if (!e.is_string()) throw FormatError("label map entries must be strings");
    if (m.find(e.get<std::string>())) throw FormatError("duplicate label '" + e.get<std::string>() + "'");
    m.names.push_back(e.get<std::string>());
  }
  return m;
}

bool TextDataset::labeled() const {
  return !records.empty() && std::all_of(records.begin(), records.end(), [](const auto& r) { return r.label; });
}

std::vector<std::size_t> TextDataset::label_indices() const {
  std::vector<std::size_t> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (!r.label) throw DataError("dataset '" + domain + "' has unlabeled records");
    out.push_back(*r.label);
  }
  return out;
}

namespace {

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80) extra = 0;
    else if ((c & 0xE0) == 0xC0 && c >= 0xC2) extra = 1;
    else if ((c & 0xF0) == 0xE0) extra = 2;
    else if ((c & 0xF8) == 0xF0 && c <= 0xF4) extra = 3;
    else return false;
    if (extra > 0 && i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
    }
    i += extra + 1;
  }
  return true;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string at_line(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line) + ": ";
}

std::size_t resolve_label(const std::string& name, LabelMap& map, bool frozen, const std::string& where) {
  if (frozen) {
    if (const auto i = map.find(name)) return *i;
    throw DataError(where + "label '" + name + "' is not in the label map");
  }
  return map.intern(name);
}

}  // namespace

TextDataset load_tsv(const std::filesystem::path& path, bool labeled, LabelMap* labels, bool frozen_labels) {
  LabelMap local;
  LabelMap& map = labels ? *labels : local;
  TextDataset ds;
  ds.domain = path.stem().string();
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (line.empty()) continue;
    const auto where = at_line(path, i + 1);
    if (!valid_utf8(line)) throw DataError(where + "invalid UTF-8");
    const auto cols = split(line, '\t');
    const std::size_t expected = labeled ? 2 : 1;
    if (cols.size() != expected) {
      throw FormatError(where + "expected " + std::to_string(expected) + " tab-separated column(s), found " +
                        std::to_string(cols.size()));
    }
    TextRecord rec;
    if (labeled) {
      if (cols[0].empty()) throw DataError(where + "empty label");
      rec.label = resolve_label(std::string(cols[0]), map, frozen_labels, where);
      rec.text = std::string(cols[1]);
    } else {
      rec.text = std::string(cols[0]);
    }
    ds.records.push_back(std::move(rec));
  }
  if (ds.records.empty()) throw DataError(path.string() + ": dataset is empty");
  ds.labels = map;
  return ds;
}

void write_tsv(const TextDataset& dataset, const std::filesystem::path& path) {
  std::ostringstream out;
  for (const auto& r : dataset.records) {
    if (r.text.find_first_of("\t\n") != std::string::npos) throw DataError("text contains a tab or newline");
    if (r.label) out << dataset.labels.names.at(*r.label) << '\t';
    out << r.text << '\n';
  }
  write_text_atomic(path, out.str());
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

// Decodes one code point at s[i]; malformed bytes come back as themselves.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  const auto c = static_cast<unsigned char>(s[i]);
  std::size_t extra = c < 0x80 ? 0 : (c & 0xE0) == 0xC0 ? 1 : (c & 0xF0) == 0xE0 ? 2 : (c & 0xF8) == 0xF0 ? 3 : 0;
  if (i + extra >= s.size()) extra = 0;
  char32_t cp = extra == 0 ? c : extra == 1 ? (c & 0x1F) : extra == 2 ? (c & 0x0F) : (c & 0x07);
  for (std::size_t k = 1; k <= extra; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) {
      extra = 0;
      cp = c;
      break;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  i += extra + 1;
  return cp;
}

bool is_unicode_space(char32_t c) {
  return (c >= 0x09 && c <= 0x0D) || c == 0x20 || c == 0x85 || c == 0xA0 || c == 0x1680 ||
         (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F || c == 0x205F || c == 0x3000;
}

bool is_ascii_punct(char c) {
  return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) || (c >= 0x7B && c <= 0x7E);
}

}  // namespace

std::vector<std::uint32_t> tokenize(std::string_view text, std::size_t vocab_size, std::size_t max_seq) {
  if (vocab_size < kFirstWordId) throw ConfigError("vocab_size must be at least 4");
  if (max_seq < 1) throw ConfigError("max_seq must be at least 1");
  std::vector<std::uint32_t> ids{kBosId};
  auto emit = [&](std::string word) {
    std::size_t b = 0, e = word.size();
    while (b < e && is_ascii_punct(word[b])) ++b;
    while (e > b && is_ascii_punct(word[e - 1])) --e;
    if (b == e || ids.size() >= max_seq) return;
    word = word.substr(b, e - b);
    if (vocab_size == kFirstWordId) {
      ids.push_back(kUnkId);
      return;
    }
    ids.push_back(kFirstWordId + static_cast<std::uint32_t>(fnv1a64(word) % (vocab_size - kFirstWordId)));
  };
  std::string word;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    const char32_t cp = next_code_point(text, i);
    if (is_unicode_space(cp)) {
      if (!word.empty()) emit(std::move(word));
      word.clear();
      continue;
    }
    for (std::size_t k = start; k < i; ++k) {
      char ch = text[k];
      if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
      word.push_back(ch);
    }
  }
  if (!word.empty()) emit(std::move(word));
  if (ids.size() > max_seq) ids.resize(max_seq);
  return ids;
}

VectorDataset load_vector_csv(const std::filesystem::path& path, bool labeled, LabelMap* labels,
                              bool frozen_labels) {
  LabelMap local;
  LabelMap& map = labels ? *labels : local;
  VectorDataset ds;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto where = at_line(path, i + 1);
    auto cols = split(lines[i], ',');
    std::optional<std::size_t> label;
    if (labeled) {
      if (cols.size() < 2) throw FormatError(where + "expected features followed by a label");
      std::string name(cols.back());
      if (name.empty()) throw DataError(where + "empty label");
      label = resolve_label(name, map, frozen_labels, where);
      cols.pop_back();
    }
    if (ds.rows.empty()) {
      ds.width = cols.size();
    } else if (cols.size() != ds.width) {
      throw FormatError(where + "row has " + std::to_string(cols.size()) + " features, expected " +
                        std::to_string(ds.width));
    }
    std::vector<double> row(cols.size());
    for (std::size_t k = 0; k < cols.size(); ++k) {
      auto field = cols[k];
      while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
      while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
      const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), row[k]);
      if (ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(row[k])) {
        throw DataError(where + "bad number '" + std::string(cols[k]) + "' in column " + std::to_string(k));
      }
    }
    ds.rows.push_back(std::move(row));
    ds.row_labels.push_back(label);
  }
  if (ds.rows.empty()) throw DataError(path.string() + ": dataset is empty");
  ds.labels = map;
  return ds;
}

EncodedDataset EncodedDataset::subset(const std::vector<std::size_t>& rows) const {
  EncodedDataset out;
  out.domain = domain;
  out.label_map = label_map;
  for (auto r : rows) {
    if (r >= size()) throw IndexError("row " + std::to_string(r) + " out of range");
    if (is_vector()) out.vectors.push_back(vectors[r]);
    else out.tokens.push_back(tokens[r]);
    if (labeled()) out.labels.push_back(labels[r]);
  }
  return out;
}

EncodedDataset encode_text(const TextDataset& dataset, std::size_t vocab_size, std::size_t max_seq,
                           bool keep_labels) {
  EncodedDataset out;
  out.domain = dataset.domain;
  out.label_map = dataset.labels;
  for (const auto& r : dataset.records) out.tokens.push_back(tokenize(r.text, vocab_size, max_seq));
  if (keep_labels && dataset.labeled()) out.labels = dataset.label_indices();
  return out;
}

EncodedDataset encode_vectors(const VectorDataset& dataset, std::size_t hidden, std::uint64_t seed,
                              bool keep_labels) {
  Rng rng(seed);
  const auto proj = glorot_uniform(hidden, dataset.width, rng, false);
  const auto p = proj.values();
  EncodedDataset out;
  out.label_map = dataset.labels;
  for (const auto& row : dataset.rows) {
    std::vector<double> v(hidden, 0.0);
    for (std::size_t o = 0; o < hidden; ++o) {
      for (std::size_t k = 0; k < dataset.width; ++k) v[o] += p[o * dataset.width + k] * row[k];
    }
    out.vectors.push_back(std::move(v));
  }
  const bool all = std::all_of(dataset.row_labels.begin(), dataset.row_labels.end(), [](auto& l) { return l; });
  if (keep_labels && all) {
    for (const auto& l : dataset.row_labels) out.labels.push_back(*l);
  }
  return out;
}

PairedBatches::PairedBatches(std::size_t source_size, std::size_t target_size, std::size_t batch_size, Rng& rng)
    : source_size_(source_size), target_size_(target_size), batch_size_(batch_size), rng_(&rng) {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (source_size == 0 || target_size == 0) throw DataError("paired batching needs nonempty source and target");
  const auto longest = std::max(source_size, target_size);
  batches_ = (longest + batch_size - 1) / batch_size;
}

std::vector<std::size_t> PairedBatches::draw(std::vector<std::size_t>& order, std::size_t& cursor,
                                             std::size_t count) {
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    if (cursor == order.size()) {
      rng_->shuffle(std::span<std::size_t>(order));
      cursor = 0;
    }
    out.push_back(order[cursor++]);
  }
  return out;
}

std::vector<BatchPair> PairedBatches::epoch() {
  std::vector<std::size_t> src(source_size_), trg(target_size_);
  std::iota(src.begin(), src.end(), 0);
  std::iota(trg.begin(), trg.end(), 0);
  rng_->shuffle(std::span<std::size_t>(src));
  rng_->shuffle(std::span<std::size_t>(trg));
  std::size_t cs = 0, ct = 0;
  const auto longest = std::max(source_size_, target_size_);
  std::vector<BatchPair> out;
  for (std::size_t b = 0; b < batches_; ++b) {
    const std::size_t count = std::min(batch_size_, longest - b * batch_size_);
    BatchPair pair;
    pair.source = draw(src, cs, count);
    pair.target = draw(trg, ct, count);
    out.push_back(std::move(pair));
  }
  return out;
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t size, std::size_t batch_size, Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  std::vector<std::size_t> order(size);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < size; b += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(size, b + batch_size)));
  }
  return out;
}

void SynthShiftConfig::validate() const {
  if (!(shift >= 0.0 && shift <= 1.0)) throw ConfigError("synthetic shift must lie in [0, 1]");
  if (num_classes != 2 && num_classes != 3) throw ConfigError("synthetic task has 2 or 3 classes");
  if (core_words < 12) throw ConfigError("synthetic core needs at least 12 filler words");
  if (keywords_per_class < 1 || marker_words < 1) throw ConfigError("keyword and marker pools must be nonempty");
  if (train_size < 2 || dev_size < 1 || test_size < 1) throw ConfigError("synthetic split sizes too small");
}

nlohmann::json SynthShiftConfig::to_json() const {
  return {{"shift", shift},
          {"num_classes", num_classes},
          {"core_words", core_words},
          {"keywords_per_class", keywords_per_class},
          {"marker_words", marker_words},
          {"train_size", train_size},
          {"dev_size", dev_size},
          {"test_size", test_size},
          {"seed", seed}};
}

SynthShiftConfig SynthShiftConfig::from_json(const nlohmann::json& j) {
  SynthShiftConfig c;
  if (!j.is_object()) throw ConfigError("synth section must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "shift") c.shift = value.get<double>();
      else if (key == "num_classes") c.num_classes = value.get<std::size_t>();
      else if (key == "core_words") c.core_words = value.get<std::size_t>();
      else if (key == "keywords_per_class") c.keywords_per_class = value.get<std::size_t>();
      else if (key == "marker_words") c.marker_words = value.get<std::size_t>();
      else if (key == "train_size") c.train_size = value.get<std::size_t>();
      else if (key == "dev_size") c.dev_size = value.get<std::size_t>();
      else if (key == "test_size") c.test_size = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown key 'synth." + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("bad value for 'synth." + key + "'");
    }
  }
  c.validate();
  return c;
}

namespace {

const char* const kClassNames[] = {"negative", "positive", "neutral"};

// Source: markers only in sentences of the last class, with probability s.
// Target: markers in any sentence with probability s. Labels follow the
// class keywords alone (two of the true class, at most one distractor).
TextDataset synth_split(const SynthShiftConfig& c, bool target, std::size_t n, const std::string& split,
                        Rng& rng) {
  TextDataset ds;
  ds.domain = target ? "target" : "source";
  ds.split = split;
  for (std::size_t k = 0; k < c.num_classes; ++k) ds.labels.names.push_back(kClassNames[k]);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = rng.below(c.num_classes);
    const std::size_t length = 6 + rng.below(7);
    std::vector<std::string> words;
    auto keyword = [&](std::size_t cls) { return "kw" + std::to_string(cls) + "x" + std::to_string(rng.below(c.keywords_per_class)); };
    words.push_back(keyword(label));
    words.push_back(keyword(label));
    if (rng.bernoulli(0.5)) words.push_back(keyword((label + 1 + rng.below(c.num_classes - 1)) % c.num_classes));
    const bool marked = target ? rng.bernoulli(c.shift) : (label == c.num_classes - 1 && rng.bernoulli(c.shift));
    if (marked) {
      for (int m = 0; m < 2; ++m) words.push_back("mk" + std::to_string(rng.below(c.marker_words)));
    }
    while (words.size() < length) words.push_back("w" + std::to_string(rng.below(c.core_words)));
    rng.shuffle(std::span<std::string>(words));
    std::string text;
    for (std::size_t w = 0; w < words.size(); ++w) {
      if (w) text += ' ';
      text += words[w];
    }
    if (!text.empty()) text[0] = static_cast<char>(text[0] - 'a' + 'A');
    text += '.';
    ds.records.push_back({std::move(text), label});
  }
  return ds;
}

}  // namespace

SynthData synth_generate(const SynthShiftConfig& config) {
  config.validate();
  Rng rng(config.seed);
  SynthData d;
  d.source.train = synth_split(config, false, config.train_size, "train", rng);
  d.source.dev = synth_split(config, false, config.dev_size, "dev", rng);
  d.source.test = synth_split(config, false, config.test_size, "test", rng);
  d.target.train = synth_split(config, true, config.train_size, "train", rng);
  d.target.dev = synth_split(config, true, config.dev_size, "dev", rng);
  d.target.test = synth_split(config, true, config.test_size, "test", rng);
  return d;
}

SynthFiles synth_file_names(const std::filesystem::path& dir) {
  return {dir / "source_train.tsv", dir / "source_dev.tsv",        dir / "source_test.tsv",
          dir / "target_train.tsv", dir / "target_dev.eval.tsv", dir / "target_test.eval.tsv"};
}

SynthFiles write_synth(const SynthData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto f = synth_file_names(dir);
  write_tsv(data.source.train, f.source_train);
  write_tsv(data.source.dev, f.source_dev);
  write_tsv(data.source.test, f.source_test);
  auto unlabeled = data.target.train;
  for (auto& r : unlabeled.records) r.label.reset();
  write_tsv(unlabeled, f.target_train);
  write_tsv(data.target.dev, f.target_dev);
  write_tsv(data.target.test, f.target_test);
  return f;
}

}  // namespace udapter
