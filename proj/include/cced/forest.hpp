#ifndef CCED_FOREST_HPP
#define CCED_FOREST_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "cced/numerics.hpp"
#include "cced/signals.hpp"

namespace cced {

struct ForestConfig {
  std::size_t tree_count = 100;
  std::optional<std::size_t> max_depth;           // unlimited when empty
  std::size_t min_samples_split = 2;
  std::optional<std::size_t> features_per_split;  // ceil(sqrt(d)) when empty
  bool bootstrap = true;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t resolved_features_per_split(std::size_t feature_count) const;
};

/// Flattened CART node. Leaves have feature == kLeaf; internal nodes route
/// value < threshold to `left`, anything else to `right`. Siblings are
/// adjacent: right == left + 1.
struct TreeNode {
  static constexpr std::int32_t kLeaf = -1;

  std::int32_t feature = kLeaf;
  double threshold = 0.0;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  double error_fraction = 0.0;
  std::uint32_t sample_count = 0;

  bool is_leaf() const { return feature == kLeaf; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  const TreeNode& leaf_for(std::span<const float> features) const;
  std::size_t depth() const;
};

/// Scoring layout of a whole forest: 12-byte nodes in one array, leaves
/// looping onto themselves so trees can be walked without branches.
struct CompiledForest {
  struct Node {
    float threshold;  // smallest float >= the split midpoint; NaN for leaves
    std::uint32_t feature;
    std::uint32_t left;  // right child is left + 1; for leaves left + 1 == self
  };
  std::vector<Node> nodes;
  std::vector<double> leaf_value;
  std::vector<std::uint32_t> roots;
};

struct Forest {
  std::vector<Tree> trees;
  ForestConfig config;
  std::size_t feature_count = 0;
  CompiledForest compiled;

  /// Rebuilds `compiled` from `trees`. Needed after editing trees by hand;
  /// training and loading do it already.
  void compile();
};

/// Decision rule: flag when score >= threshold.
struct ThresholdPolicy {
  double threshold = 0.5;
  std::optional<double> fp_budget;  // empty until calibrated
  double achieved_fp = 0.0;

  bool calibrated() const { return fp_budget.has_value(); }
};

/// Training rows for the detector: one check signal per row, label 1 for
/// error samples.
struct SignalMatrix {
  MatrixF features;
  std::vector<std::uint8_t> is_error;

  std::size_t size() const { return is_error.size(); }
};

SignalMatrix to_matrix(const BalancedDataset& ds);

struct Split {
  std::size_t feature = 0;
  double threshold = 0.0;
  double impurity_decrease = 0.0;
};

/// Exhaustive Gini split over midpoints of consecutive distinct values.
/// Ties go to the lower feature index, then the lower threshold. Empty when
/// no split lowers the weighted impurity.
std::optional<Split> best_gini_split(const SignalMatrix& data, std::span<const std::size_t> rows,
                                     std::span<const std::size_t> candidate_features);

/// Per-tree RNG streams keyed by (seed, tree index); the result does not
/// depend on `threads`.
Forest train_forest(const SignalMatrix& train, const ForestConfig& cfg, std::size_t threads = 1);
Forest train_forest(const BalancedDataset& train, const ForestConfig& cfg, std::size_t threads = 1);

/// Mean of the reached leaves' error fractions.
double score(const Forest& forest, const Eigen::Ref<const VectorF>& features);

std::vector<double> score_all(const Forest& forest, const BalancedDataset& ds, SignalLabel label);

/// Lowest threshold keeping the flagged share of `clean_scores` within the
/// budget. The threshold is always one of the clean scores, 0 when the
/// budget admits every sample, or just above the maximum when it admits
/// none.
ThresholdPolicy calibrate_from_scores(std::span<const double> clean_scores, double fp_budget);

ThresholdPolicy calibrate_threshold(const Forest& forest, const BalancedDataset& val, double fp_budget);

bool detect(const ThresholdPolicy& policy, const Forest& forest, const Eigen::Ref<const VectorF>& features);

void save_forest(const Forest& forest, const ThresholdPolicy& policy, const std::filesystem::path& path);

struct LoadedForest {
  Forest forest;
  ThresholdPolicy policy;
};

LoadedForest load_forest(const std::filesystem::path& path);

}  // namespace cced

#endif  // CCED_FOREST_HPP
