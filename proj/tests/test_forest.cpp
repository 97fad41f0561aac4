#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"

#include "cced/forest.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cced;

namespace {

SignalMatrix make_rows(std::initializer_list<std::pair<float, int>> rows) {
  SignalMatrix m;
  m.features.resize(static_cast<Eigen::Index>(rows.size()), 1);
  Eigen::Index i = 0;
  for (auto [v, e] : rows) {
    m.features(i++, 0) = v;
    m.is_error.push_back(static_cast<std::uint8_t>(e));
  }
  return m;
}

std::vector<std::size_t> all_rows(const SignalMatrix& m) {
  std::vector<std::size_t> r(m.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = i;
  return r;
}


Forest hand_forest(std::initializer_list<double> leaf_values) {
  Forest f;
  f.feature_count = 1;
  for (double v : leaf_values) {
    Tree t;
    TreeNode leaf;
    leaf.error_fraction = v;
    t.nodes.push_back(leaf);
    f.trees.push_back(t);
  }
  f.compile();
  return f;
}

}  // namespace

TEST_CASE("best_gini_split examples") {
  const SignalMatrix m = make_rows({{0, 0}, {1, 0}, {2, 1}, {3, 1}});
  const std::vector<std::size_t> f0{0};
  const auto split = best_gini_split(m, all_rows(m), f0);
  REQUIRE(split);
  CHECK(split->feature == 0);
  CHECK(split->threshold == 1.5);
  CHECK(split->impurity_decrease == doctest::Approx(0.5));

  const SignalMatrix pure = make_rows({{0, 1}, {1, 1}, {2, 1}});
  CHECK_FALSE(best_gini_split(pure, all_rows(pure), f0));
  const SignalMatrix flat = make_rows({{2, 0}, {2, 1}, {2, 0}});
  CHECK_FALSE(best_gini_split(flat, all_rows(flat), f0));
}

TEST_CASE("depth-1 split equals the exhaustive Gini minimiser") {
  std::mt19937_64 gen(31);
  std::uniform_int_distribution<std::size_t> n_dist(2, 30), d_dist(1, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const SignalMatrix m = test::random_matrix(gen, n_dist(gen), d_dist(gen), 5);
    const test::OracleSplit oracle = test::brute_force_split(m);

    std::vector<std::size_t> features(static_cast<std::size_t>(m.features.cols()));
    for (std::size_t f = 0; f < features.size(); ++f) features[f] = f;
    const auto split = best_gini_split(m, all_rows(m), features);
    REQUIRE(split.has_value() == oracle.found);

    ForestConfig cfg;
    cfg.tree_count = 1;
    cfg.max_depth = 1;
    cfg.bootstrap = false;
    cfg.features_per_split = features.size();
    const Forest forest = train_forest(m, cfg);
    const TreeNode& root = forest.trees[0].nodes[0];
    if (oracle.found) {
      CHECK(split->feature == oracle.feature);
      CHECK(split->threshold == oracle.threshold);
      REQUIRE_FALSE(root.is_leaf());
      CHECK(static_cast<std::size_t>(root.feature) == oracle.feature);
      CHECK(root.threshold == oracle.threshold);
    } else {
      CHECK(root.is_leaf());
    }
  }
}

TEST_CASE("train_forest edge cases") {
  const SignalMatrix errors = make_rows({{0.1f, 1}, {0.7f, 1}, {0.3f, 1}});
  ForestConfig cfg;
  cfg.tree_count = 5;
  const Forest f = train_forest(errors, cfg);
  for (const Tree& t : f.trees) {
    for (const TreeNode& n : t.nodes) {
      if (n.is_leaf()) CHECK(n.error_fraction == 1.0);
    }
  }
  VectorF x(1);
  x << 0.42f;
  CHECK(score(f, x) == 1.0);

  const SignalMatrix sep = make_rows({{0, 0}, {1, 0}, {2, 1}, {3, 1}});
  ForestConfig single;
  single.tree_count = 1;
  single.bootstrap = false;
  const Forest g = train_forest(sep, single);
  for (std::size_t i = 0; i < sep.size(); ++i) {
    VectorF v(1);
    v << sep.features(static_cast<Eigen::Index>(i), 0);
    CHECK(score(g, v) == static_cast<double>(sep.is_error[i]));
  }

  CHECK_THROWS_AS(train_forest(SignalMatrix{}, cfg), DomainError);
  CHECK_THROWS_AS(train_forest(BalancedDataset{}, cfg), DomainError);
  ForestConfig bad;
  bad.tree_count = 0;
  CHECK_THROWS_AS(train_forest(sep, bad), DomainError);
  CHECK_THROWS_AS(score(g, VectorF::Zero(2)), ShapeError);
}

TEST_CASE("forest training is deterministic and thread-count independent") {
  std::mt19937_64 gen(8);
  const SignalMatrix m = test::random_matrix(gen, 400, 6, 40);
  ForestConfig cfg;
  cfg.tree_count = 12;
  cfg.seed = 77;
  const Forest a = train_forest(m, cfg, 1);
  const Forest b = train_forest(m, cfg, 4);
  REQUIRE(a.trees.size() == b.trees.size());
  for (std::size_t t = 0; t < a.trees.size(); ++t) {
    REQUIRE(a.trees[t].nodes.size() == b.trees[t].nodes.size());
    for (std::size_t i = 0; i < a.trees[t].nodes.size(); ++i) {
      const TreeNode &x = a.trees[t].nodes[i], &y = b.trees[t].nodes[i];
      CHECK(x.feature == y.feature);
      CHECK(x.threshold == y.threshold);
      CHECK(x.left == y.left);
      CHECK(x.error_fraction == y.error_fraction);
    }
  }
  cfg.seed = 78;
  const Forest c = train_forest(m, cfg, 1);
  bool differs = false;
  for (std::size_t t = 0; t < a.trees.size(); ++t) differs = differs || a.trees[t].nodes.size() != c.trees[t].nodes.size();
  CHECK(differs);
}

TEST_CASE("score is the mean of leaf fractions") {
  CHECK(score(hand_forest({0.0, 1.0}), VectorF::Zero(1)) == 0.5);
  CHECK(score(hand_forest({0.25}), VectorF::Zero(1)) == 0.25);
}

TEST_CASE("score matches an independent traversal") {
  std::mt19937_64 gen(19);
  const SignalMatrix m = test::random_matrix(gen, 300, 5, 1000);
  ForestConfig cfg;
  cfg.tree_count = 37;
  const Forest f = train_forest(m, cfg);
  std::uniform_real_distribution<float> u(-0.1f, 260.0f);
  for (int i = 0; i < 100; ++i) {
    VectorF x(5);
    for (Eigen::Index k = 0; k < 5; ++k) x(k) = u(gen);
    // exact split values exercise the < / >= boundary
    if (i % 4 == 0) x(i % 5) = static_cast<float>(f.trees[0].nodes[0].threshold);
    CHECK(score(f, x) == test::oracle_score(f, x));
  }
  VectorF nan_x = VectorF::Constant(5, std::numeric_limits<float>::quiet_NaN());
  CHECK(score(f, nan_x) == test::oracle_score(f, nan_x));
}

TEST_CASE("score is monotone in leaf composition") {
  std::mt19937_64 gen(4);
  const SignalMatrix m = test::random_matrix(gen, 200, 3, 50);
  ForestConfig cfg;
  cfg.tree_count = 9;
  const Forest base = train_forest(m, cfg);
  Forest raised = base;
  std::uniform_real_distribution<double> bump(0.0, 1.0);
  for (Tree& t : raised.trees) {
    for (TreeNode& n : t.nodes) n.error_fraction = std::min(1.0, n.error_fraction + bump(gen) * 0.3);
  }
  raised.compile();
  std::uniform_real_distribution<float> u(0.0f, 13.0f);
  for (int i = 0; i < 200; ++i) {
    VectorF x(3);
    for (Eigen::Index k = 0; k < 3; ++k) x(k) = u(gen);
    CHECK(score(raised, x) >= score(base, x));
  }
}

TEST_CASE("calibrate_from_scores") {
  const std::vector<double> tenths{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  const auto everything = calibrate_from_scores(tenths, 1.0);
  CHECK(everything.threshold == 0.0);
  CHECK(everything.achieved_fp == 1.0);

  const auto nothing = calibrate_from_scores(tenths, 0.0);
  CHECK(nothing.threshold > 0.9);
  CHECK(nothing.achieved_fp == 0.0);

  // sort-and-count: the one allowed flag must be the 0.9 sample
  const auto tenth = calibrate_from_scores(tenths, 0.10);
  CHECK(tenth.threshold == 0.9);
  CHECK(tenth.achieved_fp == doctest::Approx(0.10));
  CHECK(tenth.fp_budget == 0.10);

  const std::vector<double> ties{0.0, 0.0, 0.0, 0.5, 0.5, 1.0};
  CHECK(calibrate_from_scores(ties, 0.2).threshold == 1.0);
  CHECK(calibrate_from_scores(ties, 0.5).threshold == 0.5);
  CHECK(calibrate_from_scores(ties, 0.6).threshold == 0.5);

  CHECK_THROWS_AS(calibrate_from_scores(std::vector<double>{}, 0.1), DomainError);
  CHECK_THROWS_AS(calibrate_from_scores(tenths, 1.5), DomainError);
}

TEST_CASE("calibration contract over random score sets") {
  std::mt19937_64 gen(99);
  std::uniform_int_distribution<int> n_dist(1, 200), level(0, 20);
  std::uniform_real_distribution<double> budget_dist(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> clean(static_cast<std::size_t>(n_dist(gen)));
    for (double& s : clean) s = level(gen) / 20.0;
    const double b1 = budget_dist(gen), b2 = budget_dist(gen);
    const double lo = std::min(b1, b2), hi = std::max(b1, b2);
    const ThresholdPolicy p = calibrate_from_scores(clean, lo);
    CHECK(p.achieved_fp <= lo + 1e-12);
    for (double s : clean) {
      if (s < p.threshold) {
        const auto flagged = std::count_if(clean.begin(), clean.end(), [&](double c) { return c >= s; });
        CHECK(static_cast<double>(flagged) / static_cast<double>(clean.size()) > lo);
      }
    }
    CHECK(calibrate_from_scores(clean, hi).threshold <= p.threshold);
  }
}

TEST_CASE("detect uses >=") {
  const Forest f = hand_forest({0.5});
  ThresholdPolicy p;
  p.threshold = 0.5;
  CHECK(detect(p, f, VectorF::Zero(1)));
  p.threshold = 0.50001;
  CHECK_FALSE(detect(p, f, VectorF::Zero(1)));
  const Forest high = hand_forest({0.99});
  p.threshold = 0.5;
  CHECK(detect(p, high, VectorF::Zero(1)));
}

TEST_CASE("forest file round trip and errors") {
  test::TempDir dir;
  std::mt19937_64 gen(5);
  const SignalMatrix m = test::random_matrix(gen, 250, 4, 300);
  ForestConfig cfg;
  cfg.tree_count = 10;
  cfg.max_depth = 7;
  const Forest f = train_forest(m, cfg);
  ThresholdPolicy policy;
  policy.threshold = 0.37;
  policy.fp_budget = 0.1;
  policy.achieved_fp = 0.095;
  save_forest(f, policy, dir / "forest.json");

  const LoadedForest back = load_forest(dir / "forest.json");
  CHECK(back.policy.threshold == 0.37);
  CHECK(back.policy.fp_budget == 0.1);
  CHECK(back.forest.config.max_depth == 7);
  CHECK_FALSE(back.forest.config.features_per_split.has_value());
  std::uniform_real_distribution<float> u(0.0f, 76.0f);
  for (int i = 0; i < 100; ++i) {
    VectorF x(4);
    for (Eigen::Index k = 0; k < 4; ++k) x(k) = u(gen);
    CHECK(score(back.forest, x) == score(f, x));
  }

  const LoadedForest uncalibrated = [&] {
    save_forest(f, ThresholdPolicy{}, dir / "plain.json");
    return load_forest(dir / "plain.json");
  }();
  CHECK_FALSE(uncalibrated.policy.calibrated());

  std::ifstream in(dir / "forest.json");
  auto j = nlohmann::json::parse(in);
  auto write = [&](const std::string& name, const nlohmann::json& content) {
    std::ofstream(dir / name) << content.dump();
    return dir / name;
  };
  auto no_trees = j;
  no_trees.erase("trees");
  CHECK_THROWS_AS(load_forest(write("no_trees.json", no_trees)), FormatError);
  auto wrong_version = j;
  wrong_version["version"] = 99;
  CHECK_THROWS_AS(load_forest(write("version.json", wrong_version)), FormatError);
  std::ofstream(dir / "garbage.json") << "{not json";
  CHECK_THROWS_AS(load_forest(dir / "garbage.json"), FormatError);
}
