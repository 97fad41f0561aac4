#include "cced/forest.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <utility>

#include "json.hpp"

#include "cced/errors.hpp"
#include "cced/parallel.hpp"
#include "cced/rng.hpp"

namespace cced {

namespace {

constexpr int kForestFormatVersion = 1;

using Wide = __int128;

// Weighted Gini is n - S where S = (a^2 + b^2)/nl + (c^2 + d^2)/nr. Splits
// are compared on S as an exact fraction.
struct SplitScore {
  Wide num = 0;
  Wide den = 1;

  bool better_than(const SplitScore& o) const { return num * o.den > o.num * den; }
};

SplitScore split_score(std::int64_t left_err, std::int64_t left_n, std::int64_t right_err, std::int64_t right_n) {
  const Wide lc = left_n - left_err, rc = right_n - right_err;
  const Wide left_sq = Wide(left_err) * left_err + lc * lc;
  const Wide right_sq = Wide(right_err) * right_err + rc * rc;
  return {left_sq * right_n + right_sq * left_n, Wide(left_n) * right_n};
}

double to_double(const SplitScore& s) { return static_cast<double>(s.num) / static_cast<double>(s.den); }

}  // namespace

void ForestConfig::validate() const {
  if (tree_count == 0) throw DomainError("forest needs at least one tree");
  if (min_samples_split < 2) throw DomainError("min_samples_split must be at least 2");
  if (max_depth && *max_depth == 0) throw DomainError("max_depth must be positive");
  if (features_per_split && *features_per_split == 0) throw DomainError("features_per_split must be positive");
}

std::size_t ForestConfig::resolved_features_per_split(std::size_t feature_count) const {
  if (features_per_split) return std::min(*features_per_split, feature_count);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(feature_count)))));
}

const TreeNode& Tree::leaf_for(std::span<const float> features) const {
  const TreeNode* node = &nodes[0];
  while (!node->is_leaf()) {
    node = &nodes[static_cast<double>(features[static_cast<std::size_t>(node->feature)]) < node->threshold ? node->left
                                                                                                            : node->right];
  }
  return *node;
}

std::size_t Tree::depth() const {
  std::vector<std::size_t> level(nodes.size(), 0);
  std::size_t deepest = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    deepest = std::max(deepest, level[i]);
    if (!nodes[i].is_leaf()) {
      level[nodes[i].left] = level[i] + 1;
      level[nodes[i].right] = level[i] + 1;
    }
  }
  return deepest;
}

void Forest::compile() {
  compiled = CompiledForest{};
  for (const Tree& tree : trees) {
    const auto base = static_cast<std::uint32_t>(compiled.nodes.size());
    compiled.roots.push_back(base);
    // breadth-first order keeps the shallow, hot levels of all trees close
    std::vector<std::uint32_t> order{0};
    std::vector<std::uint32_t> position(tree.nodes.size(), 0);
    for (std::size_t i = 0; i < order.size(); ++i) {
      const TreeNode& n = tree.nodes[order[i]];
      position[order[i]] = static_cast<std::uint32_t>(i);
      if (!n.is_leaf()) {
        if (n.right != n.left + 1) throw DomainError("compile: sibling nodes must be adjacent");
        order.push_back(n.left);
        order.push_back(n.right);
      }
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
      const TreeNode& n = tree.nodes[order[i]];
      const auto self = base + static_cast<std::uint32_t>(i);
      if (n.is_leaf()) {
        compiled.nodes.push_back({std::numeric_limits<float>::quiet_NaN(), 0, self - 1});
      } else {
        // x < mid (in double) holds exactly when x < the smallest float >= mid
        auto t = static_cast<float>(n.threshold);
        if (static_cast<double>(t) < n.threshold) t = std::nextafter(t, std::numeric_limits<float>::infinity());
        compiled.nodes.push_back({t, static_cast<std::uint32_t>(n.feature), base + position[n.left]});
      }
      compiled.leaf_value.push_back(n.error_fraction);
    }
  }
}

SignalMatrix to_matrix(const BalancedDataset& ds) {
  SignalMatrix m;
  const std::size_t d = ds.feature_count();
  m.features.resize(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(d));
  m.is_error.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (static_cast<std::size_t>(ds.samples[i].features.size()) != d) {
      throw ShapeError("signal sample " + std::to_string(i) + " has a different feature count");
    }
    m.features.row(static_cast<Eigen::Index>(i)) = ds.samples[i].features.transpose();
    m.is_error.push_back(ds.samples[i].label == SignalLabel::error ? 1 : 0);
  }
  return m;
}

namespace {

struct FeatureSearch {
  bool constant = true;
  std::optional<SplitScore> best;
  double threshold = 0.0;
};

FeatureSearch search_feature(const SignalMatrix& data, std::span<const std::size_t> rows, std::size_t feature,
                             std::int64_t total_err, std::vector<std::pair<float, std::uint8_t>>& scratch) {
  scratch.clear();
  const auto col = static_cast<Eigen::Index>(feature);
  for (std::size_t r : rows) scratch.emplace_back(data.features(static_cast<Eigen::Index>(r), col), data.is_error[r]);
  std::sort(scratch.begin(), scratch.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  FeatureSearch out;
  const auto n = static_cast<std::int64_t>(scratch.size());
  std::int64_t left_err = 0;
  for (std::int64_t i = 0; i + 1 < n; ++i) {
    left_err += scratch[static_cast<std::size_t>(i)].second;
    const float lo = scratch[static_cast<std::size_t>(i)].first;
    const float hi = scratch[static_cast<std::size_t>(i + 1)].first;
    if (!(lo < hi)) continue;
    out.constant = false;
    const SplitScore s = split_score(left_err, i + 1, total_err - left_err, n - i - 1);
    if (!out.best || s.better_than(*out.best)) {
      out.best = s;
      out.threshold = (static_cast<double>(lo) + static_cast<double>(hi)) / 2.0;
    }
  }
  return out;
}

}  // namespace

std::optional<Split> best_gini_split(const SignalMatrix& data, std::span<const std::size_t> rows,
                                     std::span<const std::size_t> candidate_features) {
  if (rows.size() < 2) return std::nullopt;
  std::int64_t total_err = 0;
  for (std::size_t r : rows) total_err += data.is_error[r];
  const auto n = static_cast<std::int64_t>(rows.size());
  const SplitScore parent{Wide(total_err) * total_err + Wide(n - total_err) * (n - total_err), n};

  std::vector<std::size_t> features(candidate_features.begin(), candidate_features.end());
  std::sort(features.begin(), features.end());

  std::vector<std::pair<float, std::uint8_t>> scratch;
  std::optional<Split> best;
  SplitScore best_score = parent;
  for (std::size_t f : features) {
    const FeatureSearch found = search_feature(data, rows, f, total_err, scratch);
    if (found.best && found.best->better_than(best_score)) {
      best_score = *found.best;
      best = Split{f, found.threshold, (to_double(*found.best) - to_double(parent)) / static_cast<double>(n)};
    }
  }
  return best;
}

namespace {

class TreeBuilder {
 public:
  TreeBuilder(const SignalMatrix& data, const ForestConfig& cfg, RngStream& rng)
      : data_(data), cfg_(cfg), rng_(rng), per_split_(cfg.resolved_features_per_split(
                                                 static_cast<std::size_t>(data.features.cols()))) {}

  Tree build(std::vector<std::size_t> rows) {
    Tree tree;
    struct Pending {
      std::size_t node;
      std::vector<std::size_t> rows;
      std::size_t depth;
    };
    tree.nodes.emplace_back();
    std::vector<Pending> stack;
    stack.push_back({0, std::move(rows), 0});
    while (!stack.empty()) {
      Pending job = std::move(stack.back());
      stack.pop_back();

      std::int64_t err = 0;
      for (std::size_t r : job.rows) err += data_.is_error[r];
      const auto n = static_cast<std::int64_t>(job.rows.size());
      TreeNode& node = tree.nodes[job.node];
      node.error_fraction = n ? static_cast<double>(err) / static_cast<double>(n) : 0.0;
      node.sample_count = static_cast<std::uint32_t>(n);

      const bool pure = err == 0 || err == n;
      const bool depth_cap = cfg_.max_depth && job.depth >= *cfg_.max_depth;
      if (pure || depth_cap || job.rows.size() < cfg_.min_samples_split) continue;

      const std::optional<Split> split = choose_split(job.rows);
      if (!split) continue;

      std::vector<std::size_t> left, right;
      const auto col = static_cast<Eigen::Index>(split->feature);
      for (std::size_t r : job.rows) {
        (static_cast<double>(data_.features(static_cast<Eigen::Index>(r), col)) < split->threshold ? left : right)
            .push_back(r);
      }
      const auto left_id = static_cast<std::uint32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      TreeNode& parent = tree.nodes[job.node];
      parent.feature = static_cast<std::int32_t>(split->feature);
      parent.threshold = split->threshold;
      parent.left = left_id;
      parent.right = left_id + 1;
      // right pushed first so the left subtree is expanded first
      stack.push_back({left_id + 1, std::move(right), job.depth + 1});
      stack.push_back({left_id, std::move(left), job.depth + 1});
    }
    return tree;
  }

 private:
  // Draws features without replacement until per_split_ non-constant ones
  // have been examined (or none remain), then keeps the best of them.
  std::optional<Split> choose_split(const std::vector<std::size_t>& rows) {
    const auto d = static_cast<std::size_t>(data_.features.cols());
    order_.resize(d);
    for (std::size_t f = 0; f < d; ++f) order_[f] = f;
    std::vector<std::size_t> examined;
    std::size_t informative = 0;
    for (std::size_t k = 0; k < d && informative < per_split_; ++k) {
      const std::size_t pick = k + static_cast<std::size_t>(rng_.below(d - k));
      std::swap(order_[k], order_[pick]);
      const std::size_t f = order_[k];
      const auto col = static_cast<Eigen::Index>(f);
      float lo = std::numeric_limits<float>::infinity(), hi = -lo;
      for (std::size_t r : rows) {
        const float v = data_.features(static_cast<Eigen::Index>(r), col);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (lo < hi) ++informative;
      examined.push_back(f);
    }
    return best_gini_split(data_, rows, examined);
  }

  const SignalMatrix& data_;
  const ForestConfig& cfg_;
  RngStream& rng_;
  std::size_t per_split_;
  std::vector<std::size_t> order_;
};

}  // namespace

Forest train_forest(const SignalMatrix& train, const ForestConfig& cfg, std::size_t threads) {
  cfg.validate();
  if (train.size() == 0) throw DomainError("train_forest: empty training set");
  if (static_cast<std::size_t>(train.features.rows()) != train.size()) {
    throw ShapeError("train_forest: feature rows and labels differ in count");
  }

  Forest forest;
  forest.config = cfg;
  forest.feature_count = static_cast<std::size_t>(train.features.cols());
  forest.trees.resize(cfg.tree_count);
  parallel_for(cfg.tree_count, threads, [&](std::size_t t) {
    RngStream rng(cfg.seed, t);
    std::vector<std::size_t> rows(train.size());
    if (cfg.bootstrap) {
      for (std::size_t& r : rows) r = static_cast<std::size_t>(rng.below(train.size()));
    } else {
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    }
    TreeBuilder builder(train, cfg, rng);
    forest.trees[t] = builder.build(std::move(rows));
  });
  forest.compile();
  return forest;
}

Forest train_forest(const BalancedDataset& train, const ForestConfig& cfg, std::size_t threads) {
  if (train.size() == 0) throw DomainError("train_forest: empty training set");
  return train_forest(to_matrix(train), cfg, threads);
}

namespace {

constexpr std::size_t kLanes = 16;

// Walks up to kLanes trees in lockstep so their independent root-to-leaf
// chains overlap. Leaves loop onto themselves, so a lane that has arrived
// just stays put until the whole block has.
template <std::size_t Width>
double walk_block(const CompiledForest& c, const float* x, std::size_t base, std::size_t width, double total) {
  const CompiledForest::Node* nodes = c.nodes.data();
  std::array<std::uint32_t, Width> at;
  for (std::size_t k = 0; k < Width; ++k) at[k] = c.roots[base + (k < width ? k : 0)];
  std::uint32_t moving = 0;
  do {
    moving = 0;
#pragma GCC unroll 16
    for (std::size_t k = 0; k < Width; ++k) {
      const CompiledForest::Node& node = nodes[at[k]];
      const std::uint32_t next = node.left + static_cast<std::uint32_t>(!(x[node.feature] < node.threshold));
      moving |= next ^ at[k];
      at[k] = next;
    }
  } while (moving != 0);
  for (std::size_t k = 0; k < width; ++k) total += c.leaf_value[at[k]];
  return total;
}

}  // namespace

double score(const Forest& forest, const Eigen::Ref<const VectorF>& features) {
  if (static_cast<std::size_t>(features.size()) != forest.feature_count) {
    throw ShapeError("score: got " + std::to_string(features.size()) + " features, forest expects " +
                     std::to_string(forest.feature_count));
  }
  const CompiledForest& c = forest.compiled;
  if (c.roots.size() != forest.trees.size()) throw DomainError("score: forest is not compiled");
  const std::size_t n_trees = c.roots.size();
  double total = 0.0;
  for (std::size_t base = 0; base < n_trees; base += kLanes) {
    total = walk_block<kLanes>(c, features.data(), base, std::min(kLanes, n_trees - base), total);
  }
  return total / static_cast<double>(n_trees);
}

std::vector<double> score_all(const Forest& forest, const BalancedDataset& ds, SignalLabel label) {
  std::vector<double> scores;
  for (const SignalSample& s : ds.samples) {
    if (s.label == label) scores.push_back(score(forest, s.features));
  }
  return scores;
}

ThresholdPolicy calibrate_from_scores(std::span<const double> clean_scores, double fp_budget) {
  if (clean_scores.empty()) throw DomainError("calibration needs at least one clean sample");
  if (!(fp_budget >= 0.0 && fp_budget <= 1.0)) throw DomainError("fp budget must lie in [0, 1]");

  std::vector<double> sorted(clean_scores.begin(), clean_scores.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t n = sorted.size();
  const auto allowed = static_cast<std::size_t>(std::floor(fp_budget * static_cast<double>(n) + 1e-9));

  ThresholdPolicy policy;
  policy.fp_budget = fp_budget;
  if (allowed >= n) {
    policy.threshold = 0.0;
  } else {
    // sorted[allowed] is the highest clean score that must stay unflagged;
    // the next-higher distinct score is the lowest admissible threshold.
    const double blocked = sorted[allowed];
    std::size_t k = allowed;
    while (k > 0 && sorted[k - 1] == blocked) --k;
    policy.threshold = k == 0 ? std::nextafter(blocked, std::numeric_limits<double>::infinity()) : sorted[k - 1];
  }
  const auto flagged = std::count_if(sorted.begin(), sorted.end(), [&](double s) { return s >= policy.threshold; });
  policy.achieved_fp = static_cast<double>(flagged) / static_cast<double>(n);
  return policy;
}

ThresholdPolicy calibrate_threshold(const Forest& forest, const BalancedDataset& val, double fp_budget) {
  const std::vector<double> clean = score_all(forest, val, SignalLabel::clean);
  return calibrate_from_scores(clean, fp_budget);
}

bool detect(const ThresholdPolicy& policy, const Forest& forest, const Eigen::Ref<const VectorF>& features) {
  return score(forest, features) >= policy.threshold;
}

namespace {

nlohmann::json node_json(const Tree& tree, std::size_t id) {
  const TreeNode& n = tree.nodes[id];
  if (n.is_leaf()) return {{"error_fraction", n.error_fraction}, {"samples", n.sample_count}};
  return {{"feature", n.feature},
          {"threshold", n.threshold},
          {"left", node_json(tree, n.left)},
          {"right", node_json(tree, n.right)}};
}

void parse_node(const nlohmann::json& j, Tree& tree, std::size_t id, std::size_t feature_count) {
  if (j.contains("feature")) {
    TreeNode node;
    j.at("feature").get_to(node.feature);
    if (node.feature < 0 || static_cast<std::size_t>(node.feature) >= feature_count) {
      throw FormatError("node feature index out of range");
    }
    j.at("threshold").get_to(node.threshold);
    node.left = static_cast<std::uint32_t>(tree.nodes.size());
    node.right = node.left + 1;
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    tree.nodes[id] = node;
    parse_node(j.at("left"), tree, node.left, feature_count);
    parse_node(j.at("right"), tree, node.right, feature_count);
  } else {
    TreeNode& leaf = tree.nodes[id];
    j.at("error_fraction").get_to(leaf.error_fraction);
    j.at("samples").get_to(leaf.sample_count);
  }
}

nlohmann::json optional_json(const std::optional<std::size_t>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<std::size_t> optional_size(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::size_t>();
}

}  // namespace

void save_forest(const Forest& forest, const ThresholdPolicy& policy, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = kForestFormatVersion;
  j["feature_count"] = forest.feature_count;
  j["config"] = {{"tree_count", forest.config.tree_count},
                 {"max_depth", optional_json(forest.config.max_depth)},
                 {"min_samples_split", forest.config.min_samples_split},
                 {"features_per_split", optional_json(forest.config.features_per_split)},
                 {"bootstrap", forest.config.bootstrap},
                 {"seed", forest.config.seed}};
  j["trees"] = nlohmann::json::array();
  for (const Tree& t : forest.trees) j["trees"].push_back(node_json(t, 0));
  j["policy"] = {{"threshold", policy.threshold},
                 {"fp_budget", policy.fp_budget ? nlohmann::json(*policy.fp_budget) : nlohmann::json(nullptr)},
                 {"achieved_fp", policy.achieved_fp}};

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

LoadedForest load_forest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    if (!j.contains("version") || j.at("version") != kForestFormatVersion) {
      throw FormatError("unsupported forest version (expected " + std::to_string(kForestFormatVersion) + ")");
    }
    LoadedForest out;
    Forest& f = out.forest;
    j.at("feature_count").get_to(f.feature_count);
    const auto& cfg = j.at("config");
    cfg.at("tree_count").get_to(f.config.tree_count);
    f.config.max_depth = optional_size(cfg.at("max_depth"));
    cfg.at("min_samples_split").get_to(f.config.min_samples_split);
    f.config.features_per_split = optional_size(cfg.at("features_per_split"));
    cfg.at("bootstrap").get_to(f.config.bootstrap);
    cfg.at("seed").get_to(f.config.seed);

    const auto& trees = j.at("trees");
    if (!trees.is_array() || trees.empty()) throw FormatError("'trees' must be a non-empty array");
    for (const auto& t : trees) {
      Tree tree;
      tree.nodes.emplace_back();
      parse_node(t, tree, 0, f.feature_count);
      f.trees.push_back(std::move(tree));
    }

    f.compile();
    const auto& p = j.at("policy");
    p.at("threshold").get_to(out.policy.threshold);
    if (!p.at("fp_budget").is_null()) out.policy.fp_budget = p.at("fp_budget").get<double>();
    p.at("achieved_fp").get_to(out.policy.achieved_fp);
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace cced
