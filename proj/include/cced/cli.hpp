#ifndef CCED_CLI_HPP
#define CCED_CLI_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cced/forest.hpp"
#include "cced/signals.hpp"
#include "cced/trainer.hpp"

namespace cced {

struct TaskConfig {
  std::string kind = "blobs";  // "blobs" | "csv"
  std::size_t classes = 10;
  std::size_t features = 16;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 200;
  std::optional<double> spread;  // preset spread when empty
  std::filesystem::path train_csv;
  std::filesystem::path test_csv;
};

struct ModelConfig {
  std::string preset = "strong";  // "strong" | "weak"
  std::vector<std::size_t> hidden{32};
  std::string mode = "train";  // "train" | "load"
  std::optional<std::filesystem::path> weights;
  TrainConfig train{0.05, 30, 32, 1};
};

struct SignalConfig {
  std::size_t n_per_class = 2000;
  std::size_t max_attempts = 100000;
  SplitFractions split;
};

struct RunConfig {
  std::string env = "transient";  // "none" | "transient" | "always"
  bool force_sdc = true;
  std::size_t count = 1000;
  double budget = 0.10;
};

struct CampaignConfig {
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::filesystem::path output_dir = "cced_out";
  TaskConfig task;
  ModelConfig model;
  SignalConfig signals;
  ForestConfig forest;
  std::vector<double> budgets{0.05, 0.10, 0.15, 0.20};
  RunConfig run;
  std::size_t timing_runs = 1000;

  double spread() const;
  /// Seeds every stage from `seed`.
  void apply_seed(std::uint64_t s);
  /// Fully-defaulted form; its digest identifies the configuration.
  nlohmann::ordered_json to_json() const;
};

inline constexpr double kStrongSpread = 0.2;
inline constexpr double kWeakSpread = 0.44;

/// Unknown keys and bad values throw ConfigError naming the field path.
CampaignConfig parse_config(const nlohmann::json& j);
CampaignConfig load_config(const std::filesystem::path& path);

struct TaskData {
  LabeledDataset train;
  LabeledDataset test;  // also the campaign's evaluation inputs
};

/// Regenerates the blobs from the seed or reads the two CSV files.
TaskData load_task(const CampaignConfig& cfg);

/// Stage entry points; each reads the previous stage's artifacts from
/// cfg.output_dir and records what it writes in manifest.json.
void cmd_train_main(const CampaignConfig& cfg, std::ostream& log);
void cmd_build_signals(const CampaignConfig& cfg, std::ostream& log);
void cmd_train_detector(const CampaignConfig& cfg, std::ostream& log);
void cmd_evaluate(const CampaignConfig& cfg, std::ostream& log);
void cmd_run(const CampaignConfig& cfg, std::ostream& log);

std::string sha256_hex(const std::filesystem::path& path);

/// Exit codes: 0 ok, 2 config or usage, 3 I/O or format, 4 campaign.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cced

#endif  // CCED_CLI_HPP
