#include "cced/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

#include "cced/errors.hpp"

namespace cced {

double flag_rate(std::span<const double> scores, double threshold) {
  if (scores.empty()) return 0.0;
  const auto flagged = std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= threshold; });
  return static_cast<double>(flagged) / static_cast<double>(scores.size());
}

BudgetRow detection_table(const Forest& forest, const BalancedDataset& test, const BalancedDataset& val,
                          std::span<const double> budgets, std::string label) {
  const std::vector<double> test_error = score_all(forest, test, SignalLabel::error);
  const std::vector<double> test_clean = score_all(forest, test, SignalLabel::clean);
  if (test_error.empty() || test_clean.empty()) throw DomainError("detection_table: empty test partition");
  if (!std::is_sorted(budgets.begin(), budgets.end())) throw DomainError("detection_table: budgets must ascend");
  const std::vector<double> val_clean = score_all(forest, val, SignalLabel::clean);

  BudgetRow row;
  row.label = std::move(label);
  row.default_detection = flag_rate(test_error, kDefaultThreshold);
  row.default_recomp = flag_rate(test_clean, kDefaultThreshold);
  for (double budget : budgets) {
    BudgetPoint p;
    p.budget = budget;
    const ThresholdPolicy policy = calibrate_from_scores(val_clean, budget);
    p.threshold = policy.threshold;
    p.detection = flag_rate(test_error, policy.threshold);
    p.recomputation = flag_rate(test_clean, policy.threshold);
    p.test_calibrated_detection = flag_rate(test_error, calibrate_from_scores(test_clean, budget).threshold);
    row.points.push_back(p);
  }
  return row;
}

Confusion confusion(const Forest& forest, const ThresholdPolicy& policy, const BalancedDataset& ds) {
  Confusion c;
  for (const SignalSample& s : ds.samples) {
    const bool flagged = detect(policy, forest, s.features);
    if (s.label == SignalLabel::error) {
      (flagged ? c.tp : c.fn)++;
    } else {
      (flagged ? c.fp : c.tn)++;
    }
  }
  return c;
}

double mean_call_ms(const std::function<void(std::size_t)>& work, std::size_t n_runs) {
  if (n_runs == 0) throw DomainError("timing needs at least one run");
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < 10; ++i) work(i % n_runs);

  constexpr std::size_t kBatches = 10;
  std::vector<double> batch_means;
  std::size_t start = 0;
  for (std::size_t b = 0; b < kBatches; ++b) {
    const std::size_t end = n_runs * (b + 1) / kBatches;
    if (end == start) continue;
    const auto t0 = clock::now();
    for (std::size_t i = start; i < end; ++i) work(i);
    const auto t1 = clock::now();
    batch_means.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() /
                          static_cast<double>(end - start));
    start = end;
  }
  std::sort(batch_means.begin(), batch_means.end());
  const std::size_t m = batch_means.size();
  return m % 2 ? batch_means[m / 2] : 0.5 * (batch_means[m / 2 - 1] + batch_means[m / 2]);
}

TimingRow timing_ratio(const ModelSpec& spec, const Parameters& params, const Forest& forest,
                       const LabeledDataset& sample_inputs, std::size_t n_runs) {
  if (sample_inputs.size() == 0) throw DomainError("timing_ratio: no inputs");
  std::vector<VectorF> signals;
  signals.reserve(sample_inputs.size());
  for (std::size_t i = 0; i < sample_inputs.size(); ++i) {
    signals.push_back(check_features(forward(spec, params, sample_inputs.sample(i))));
  }

  volatile double sink = 0.0;
  TimingRow row;
  row.n_runs = n_runs;
  row.main_ms = mean_call_ms(
      [&](std::size_t i) {
        sink = sink + forward(spec, params, sample_inputs.sample(i % sample_inputs.size())).check_signal(0);
      },
      n_runs);
  row.detector_ms = mean_call_ms([&](std::size_t i) { sink = sink + score(forest, signals[i % signals.size()]); },
                                 n_runs);
  row.ratio = row.main_ms / row.detector_ms;
  return row;
}

namespace {

std::string pct(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * fraction);
  return buf;
}

std::string budget_name(double budget) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", 100.0 * budget);
  return buf;
}

std::vector<double> budgets_of(const std::vector<BudgetRow>& rows) {
  std::vector<double> budgets;
  if (!rows.empty()) {
    for (const BudgetPoint& p : rows.front().points) budgets.push_back(p.budget);
  }
  return budgets;
}

void render_csv(std::ostringstream& out, const std::vector<BudgetRow>& rows, const std::optional<CampaignStats>& stats,
                const std::vector<ConfusionEntry>& confusions) {
  const std::vector<double> budgets = budgets_of(rows);
  out << "label,default_detection,default_recomp";
  for (double b : budgets) out << ",det_" << budget_name(b);
  out << '\n';
  for (const BudgetRow& r : rows) {
    out << r.label << ',' << pct(r.default_detection) << ',' << pct(r.default_recomp);
    for (const BudgetPoint& p : r.points) out << ',' << pct(p.detection);
    out << '\n';
  }
  if (rows.empty() && !stats && confusions.empty()) return;

  out << "\nlabel,budget,threshold,recomputation,test_calibrated_detection\n";
  for (const BudgetRow& r : rows) {
    for (const BudgetPoint& p : r.points) {
      char threshold[32];
      std::snprintf(threshold, sizeof(threshold), "%.6f", p.threshold);
      out << r.label << ',' << budget_name(p.budget) << ',' << threshold << ',' << pct(p.recomputation) << ','
          << pct(p.test_calibrated_detection) << '\n';
    }
  }
  if (!confusions.empty()) {
    out << "\nlabel,budget,tp,fp,tn,fn\n";
    for (const ConfusionEntry& c : confusions) {
      out << c.label << ',' << budget_name(c.budget) << ',' << c.counts.tp << ',' << c.counts.fp << ','
          << c.counts.tn << ',' << c.counts.fn << '\n';
    }
  }
  if (stats) {
    out << "\nstat,value\n"
        << "flips_attempted," << stats->flips_attempted << '\n'
        << "flips_masked," << stats->flips_masked << '\n'
        << "flips_sdc," << stats->flips_sdc << '\n'
        << "flips_degenerate," << stats->flips_degenerate << '\n';
  }
}

void render_markdown(std::ostringstream& out, const std::vector<BudgetRow>& rows,
                     const std::optional<CampaignStats>& stats, const std::vector<ConfusionEntry>& confusions) {
  const std::vector<double> budgets = budgets_of(rows);
  out << "| Main model | default (re-comp) |";
  for (double b : budgets) out << ' ' << budget_name(b) << "% |";
  out << "\n|---|---|";
  for (std::size_t i = 0; i < budgets.size(); ++i) out << "---|";
  out << '\n';
  for (const BudgetRow& r : rows) {
    out << "| " << r.label << " | " << pct(r.default_detection) << "% (" << pct(r.default_recomp) << "%) |";
    for (const BudgetPoint& p : r.points) out << ' ' << pct(p.detection) << "% |";
    out << '\n';
  }
  if (rows.empty() && !stats && confusions.empty()) return;

  out << "\nDefault column: soft-vote score >= 0.5. Budget columns: threshold calibrated on the validation "
         "split, detection measured on the test split.\n";
  out << "\n### Per-budget detail\n\n"
      << "| Main model | budget | threshold | realized re-comp | test-calibrated detection |\n"
      << "|---|---|---|---|---|\n";
  for (const BudgetRow& r : rows) {
    for (const BudgetPoint& p : r.points) {
      char threshold[32];
      std::snprintf(threshold, sizeof(threshold), "%.6f", p.threshold);
      out << "| " << r.label << " | " << budget_name(p.budget) << "% | " << threshold << " | "
          << pct(p.recomputation) << "% | " << pct(p.test_calibrated_detection) << "% |\n";
    }
  }
  if (!confusions.empty()) {
    out << "\n### Confusion counts\n\n| Main model | budget | TP | FP | TN | FN |\n|---|---|---|---|---|---|\n";
    for (const ConfusionEntry& c : confusions) {
      out << "| " << c.label << " | " << budget_name(c.budget) << "% | " << c.counts.tp << " | " << c.counts.fp
          << " | " << c.counts.tn << " | " << c.counts.fn << " |\n";
    }
  }
  if (stats) {
    out << "\n### Campaign statistics\n\n"
        << "- flips attempted: " << stats->flips_attempted << '\n'
        << "- masked (no prediction change): " << stats->flips_masked << '\n'
        << "- silent data corruptions: " << stats->flips_sdc << '\n'
        << "- degenerate (NaN output): " << stats->flips_degenerate << '\n';
  }
}

}  // namespace

std::string render_report(const std::vector<BudgetRow>& rows, const std::optional<CampaignStats>& stats,
                          ReportFormat format, const std::vector<ConfusionEntry>& confusions) {
  std::ostringstream out;
  if (format == ReportFormat::csv) {
    render_csv(out, rows, stats, confusions);
  } else {
    render_markdown(out, rows, stats, confusions);
  }
  return out.str();
}

}  // namespace cced
