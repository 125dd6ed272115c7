// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace udapter {

enum class ErrorKind {
  kDimension,
  kIndex,
  kContract,
  kConfig,
  kData,
  kFormat,
  kDependency,
  kIo,
};

// Base for every error thrown by the library. The CLI maps kinds to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define UDAPTER_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

UDAPTER_DEFINE_ERROR(DimensionError, kDimension)
UDAPTER_DEFINE_ERROR(IndexError, kIndex)
UDAPTER_DEFINE_ERROR(ContractError, kContract)
UDAPTER_DEFINE_ERROR(ConfigError, kConfig)
UDAPTER_DEFINE_ERROR(DataError, kData)
UDAPTER_DEFINE_ERROR(FormatError, kFormat)
UDAPTER_DEFINE_ERROR(DependencyError, kDependency)
UDAPTER_DEFINE_ERROR(IoError, kIo)

#undef UDAPTER_DEFINE_ERROR

}  // namespace udapter
