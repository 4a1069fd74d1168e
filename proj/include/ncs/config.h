#pragma once

#include "ncs/model.h"
#include "ncs/training.h"

#include <filesystem>
#include <iosfwd>
#include <string>

namespace ncs {

struct RunConfig {
  std::filesystem::path meshPath;
  bool normalize = true;

  ArchConfig arch;

  double rho = 0.04;
  double eta = 0.5;
  std::uint64_t patchSeed = 7;
  // Reuse the global chart and patches of an existing checkpoint (aligned detail transfer).
  std::filesystem::path layoutFrom;

  TrainSchedule schedule{100000, 800000, 1e-4, 1e-6};
  int batchSize = 2048;
  std::uint64_t seed = 1;
  long checkpointEvery = 0;
  long logEvery = 100;

  std::filesystem::path outputDir = "out";
  std::string checkpointName = "model.ncs";
  std::string logName = "train_log.csv";

  void validate() const;
  std::filesystem::path checkpointPath() const { return outputDir / checkpointName; }
  std::filesystem::path logPath() const { return outputDir / logName; }
};

// Sectioned key = value text ([mesh] [arch] [patches] [train] [output]); '#' starts a comment.
// Unknown sections or keys and malformed values throw ConfigError. Relative paths resolve
// against baseDir.
RunConfig parseConfig(std::istream& in, const std::filesystem::path& baseDir = {}, const std::string& name = "<config>");
RunConfig loadConfig(const std::filesystem::path& path);

// Canonical text form; parseConfig(formatConfig(c)) == c.
std::string formatConfig(const RunConfig& config);

} // namespace ncs
