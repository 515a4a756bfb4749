#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace eopd::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kConfigError = 2,
  kIoError = 3,
  kNanAbort = 4,
};

struct Invocation {
  std::string command;  // toy | train | sweep | analyze
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string axis;
  std::vector<std::string> values;
  std::string input;     // analyze: student model or rollout buffer
  std::string analysis;  // analyze: entropy_histogram | retention |
                         // fkl_high_entropy | topk_tradeoff | all
  std::string model;     // analyze: student model paired with a buffer input
};

// Runs one subcommand and maps failures to exit codes. Outputs are written
// only when the whole run succeeds.
int execute(const Invocation& inv);

// Parses argv and calls execute().
int run(int argc, const char* const* argv);

// Reads EOPD_LOG (error | info | debug).
void init_logging();

}  // namespace eopd::cli
