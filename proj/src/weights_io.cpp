// SPDX-License-Identifier: Apache-2.0
#include "udapter/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "udapter/error.hpp"

namespace udapter {

namespace {

constexpr std::size_t kMagicSize = sizeof(kWeightsMagic) - 1;

static_assert(std::endian::native == std::endian::little, "UDAPT1 payloads assume a little-endian host");

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void WeightFile::add(const std::string& name, const Tensor& tensor) {
  NamedTensor nt{name, tensor.shape(), {}};
  nt.values.reserve(tensor.numel());
  for (double v : tensor.values()) nt.values.push_back(static_cast<float>(v));
  tensors.push_back(std::move(nt));
}

bool WeightFile::contains(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

const NamedTensor& WeightFile::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("missing tensor '" + name + "'");
}

Tensor WeightFile::tensor(const std::string& name, const Shape& expected, bool requires_grad) const {
  const auto& nt = get(name);
  if (nt.shape != expected) {
    throw FormatError("tensor '" + name + "' has shape " + shape_to_string(nt.shape) + ", expected " +
                      shape_to_string(expected));
  }
  std::vector<double> values(nt.values.begin(), nt.values.end());
  return Tensor::from_values(nt.shape, std::move(values), requires_grad);
}

std::vector<std::uint8_t> encode_weights(const WeightFile& file) {
  nlohmann::json header;
  header["format_version"] = kWeightsFormatVersion;
  header["metadata"] = file.metadata;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : file.tensors) {
    if (shape_numel(t.shape) != t.values.size()) {
      throw FormatError("tensor '" + t.name + "' shape does not match its value count");
    }
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"byte_offset", offset}});
    offset += t.values.size() * sizeof(float);
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kWeightsMagic, kWeightsMagic + kMagicSize);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload_start = out.size();
  out.resize(payload_start + offset);
  std::size_t cursor = payload_start;
  for (const auto& t : file.tensors) {
    std::memcpy(out.data() + cursor, t.values.data(), t.values.size() * sizeof(float));
    cursor += t.values.size() * sizeof(float);
  }
  return out;
}

WeightFile decode_weights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagicSize + 8 || std::memcmp(bytes.data(), kWeightsMagic, kMagicSize) != 0) {
    throw FormatError("not a UDAPT1 container (bad magic)");
  }
  const std::uint64_t header_len = get_u64(bytes.subspan(kMagicSize, 8));
  const std::size_t header_start = kMagicSize + 8;
  if (header_len > bytes.size() - header_start) throw FormatError("truncated UDAPT1 header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + header_start, bytes.begin() + header_start + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed UDAPT1 header: ") + e.what());
  }
  if (!header.contains("format_version") || header["format_version"] != kWeightsFormatVersion) {
    throw FormatError("unsupported UDAPT1 format_version " +
                      (header.contains("format_version") ? header["format_version"].dump() : "<missing>"));
  }
  const auto payload = bytes.subspan(header_start + header_len);
  WeightFile file;
  file.metadata = header.value("metadata", nlohmann::json::object());
  try {
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("byte_offset").get<std::uint64_t>();
      const std::size_t n = shape_numel(t.shape);
      if (offset > payload.size() || n * sizeof(float) > payload.size() - offset) {
        throw FormatError("tensor '" + t.name + "' is truncated");
      }
      t.values.resize(n);
      std::memcpy(t.values.data(), payload.data() + offset, n * sizeof(float));
      file.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed UDAPT1 tensor table: ") + e.what());
  }
  return file;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "': " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_weights(const WeightFile& file, const std::filesystem::path& path) {
  write_file_atomic(path, encode_weights(file));
}

WeightFile load_weights(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_weights(bytes);
}

}  // namespace udapter
