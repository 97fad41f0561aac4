#ifndef CCED_EVALUATION_HPP
#define CCED_EVALUATION_HPP

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cced/forest.hpp"
#include "cced/model.hpp"
#include "cced/signals.hpp"

namespace cced {

/// Detection and realized re-computation on the test split for one budget.
struct BudgetPoint {
  double budget = 0.0;
  double threshold = 0.0;
  double detection = 0.0;         // threshold calibrated on the validation split
  double recomputation = 0.0;     // clean flag rate on test at that threshold
  double test_calibrated_detection = 0.0;  // threshold shifted on test itself
};

struct BudgetRow {
  std::string label;
  double default_detection = 0.0;  // score >= 0.5
  double default_recomp = 0.0;
  std::vector<BudgetPoint> points;  // budgets ascending
};

inline constexpr double kDefaultThreshold = 0.5;

/// Fraction of scores at or above the threshold.
double flag_rate(std::span<const double> scores, double threshold);

BudgetRow detection_table(const Forest& forest, const BalancedDataset& test, const BalancedDataset& val,
                          std::span<const double> budgets, std::string label = {});

struct Confusion {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
};

Confusion confusion(const Forest& forest, const ThresholdPolicy& policy, const BalancedDataset& ds);

struct TimingRow {
  double main_ms = 0.0;
  double detector_ms = 0.0;
  double ratio = 0.0;
  std::size_t n_runs = 0;
};

/// Mean milliseconds per call of work(i) for i in [0, n_runs): 10 warm-up
/// calls, then the median of the per-batch means over 10 batches.
double mean_call_ms(const std::function<void(std::size_t)>& work, std::size_t n_runs);

/// Clean forward vs detector score over the same inputs, single-threaded.
TimingRow timing_ratio(const ModelSpec& spec, const Parameters& params, const Forest& forest,
                       const LabeledDataset& sample_inputs, std::size_t n_runs = 1000);

enum class ReportFormat { csv, markdown };

struct ConfusionEntry {
  std::string label;
  double budget = 0.0;
  Confusion counts;
};

/// Detection table (percent, one decimal), then the realized
/// re-computation and test-calibrated detection per budget, confusion
/// counts, and campaign statistics as a footer.
std::string render_report(const std::vector<BudgetRow>& rows, const std::optional<CampaignStats>& stats,
                          ReportFormat format, const std::vector<ConfusionEntry>& confusions = {});

}  // namespace cced

#endif  // CCED_EVALUATION_HPP
