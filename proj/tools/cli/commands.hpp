// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "udapter/error.hpp"

namespace udapter::cli {

struct Options {
  std::string command;
  std::vector<std::string> argv;
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> seeds;
  std::optional<std::filesystem::path> run_dir;
  bool overwrite = false;
  // backbone, domain, task, head, joint
  std::map<std::string, std::string> checkpoints;
  std::optional<std::string> split;
  std::optional<std::filesystem::path> data;
  bool task_only = false;
  std::vector<std::string> spans;
  bool retrain = false;
  std::vector<std::size_t> factors;
};

// Runs one subcommand. Library errors propagate to the caller.
void run_command(const Options& options);

int exit_code(ErrorKind kind);

}  // namespace udapter::cli
