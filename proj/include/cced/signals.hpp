#ifndef CCED_SIGNALS_HPP
#define CCED_SIGNALS_HPP

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "cced/fault.hpp"
#include "cced/model.hpp"
#include "cced/trainer.hpp"

namespace cced {

enum class SignalLabel { clean, error };

/// One check-signal vector with its provenance.
struct SignalSample {
  VectorF features;
  SignalLabel label = SignalLabel::clean;
  std::size_t input_id = 0;
  std::optional<FaultSpec> fault;
  ClassIndex clean_class = kInvalidClass;
  ClassIndex observed_class = kInvalidClass;
  bool degenerate = false;
};

struct CampaignStats {
  std::uint64_t flips_attempted = 0;
  std::uint64_t flips_masked = 0;
  std::uint64_t flips_sdc = 0;
  std::uint64_t flips_degenerate = 0;

  CampaignStats& operator+=(const CampaignStats& o);
  bool operator==(const CampaignStats&) const = default;
};

struct BalancedDataset {
  std::vector<SignalSample> samples;
  std::optional<CampaignStats> stats;

  std::size_t size() const { return samples.size(); }
  std::size_t count(SignalLabel label) const;
  std::size_t feature_count() const { return samples.empty() ? 0 : static_cast<std::size_t>(samples[0].features.size()); }
};

/// The detector's view of an inference: the softmax vector, or all zeros
/// when the output is degenerate (NaN).
VectorF check_features(const InferenceResult& result);

struct CampaignOptions {
  std::size_t n_per_class = 2000;
  std::uint64_t seed = 1;
  std::size_t max_attempts_per_sample = 100000;
  std::size_t threads = 1;
};

/// Balanced clean/error dataset. Sample i of each label uses input
/// i mod |inputs|. The error trial for sample i draws faults from
/// RngStream(seed, i) until the predicted class changes, so the result does
/// not depend on the thread count.
BalancedDataset build_dataset(const ModelSpec& spec, const Parameters& params, const LabeledDataset& inputs,
                              const CampaignOptions& options);

/// Re-executes a sample's recorded (input, fault) and returns the resulting
/// sample. For clean samples this is the fault-free inference.
SignalSample replay(const ModelSpec& spec, const Parameters& params, const LabeledDataset& inputs,
                    const SignalSample& recorded);

struct SplitFractions {
  double train = 0.5;
  double val = 0.25;
  double test = 0.25;
};

struct SignalSplit {
  BalancedDataset train;
  BalancedDataset val;
  BalancedDataset test;
};

/// Stratified seeded split; each part keeps equal label counts up to one
/// sample of rounding.
SignalSplit split(const BalancedDataset& ds, const SplitFractions& fractions, std::uint64_t seed);

/// JSON Lines; the optional first line holds {"stats": {...}}.
void save_signals(const BalancedDataset& ds, const std::filesystem::path& path);
BalancedDataset load_signals(const std::filesystem::path& path);

}  // namespace cced

#endif  // CCED_SIGNALS_HPP
