// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "udapter/tensor.hpp"

namespace udapter {

inline constexpr char kWeightsMagic[] = "UDAPT1";
inline constexpr int kWeightsFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// In-memory image of a UDAPT1 container:
//   "UDAPT1" | u64 LE header length | UTF-8 JSON header | LE f32 payloads
// The header is {"format_version", "metadata", "tensors": [{name, shape,
// byte_offset}]}, offsets relative to the start of the payload.
struct WeightFile {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  void add(const std::string& name, const Tensor& tensor);
  bool contains(const std::string& name) const;
  // FormatError when absent.
  const NamedTensor& get(const std::string& name) const;
  // Restores `name`, requiring `expected` shape; FormatError otherwise.
  Tensor tensor(const std::string& name, const Shape& expected, bool requires_grad = false) const;
};

std::vector<std::uint8_t> encode_weights(const WeightFile& file);
WeightFile decode_weights(std::span<const std::uint8_t> bytes);

// Writes through a temporary file and rename.
void save_weights(const WeightFile& file, const std::filesystem::path& path);
WeightFile load_weights(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace udapter
