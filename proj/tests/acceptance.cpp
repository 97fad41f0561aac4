// Acceptance run: one PASS/FAIL line per criterion.

#include <unistd.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cced/cli.hpp"
#include "cced/evaluation.hpp"
#include "cced/fault.hpp"
#include "cced/rng.hpp"
#include "cced/runtime.hpp"
#include "oracles.hpp"

using namespace cced;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = "failed: " + what + (detail.empty() ? "" : "; " + detail);
    pass = pass && ok;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

fs::path g_root;
std::size_t g_threads = 1;

int run_criterion(int id, const char* name, double limit_s, const std::function<Verdict()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs > limit_s) v.require(false, "runtime " + fmt("%.1f", secs) + " s over the limit");
  std::printf("%s %2d  %-34s %7.2f s (limit %g s)  %s\n", v.pass ? "PASS" : "FAIL", id, name, secs, limit_s,
              v.detail.c_str());
  std::fflush(stdout);
  return v.pass ? 0 : 1;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cced");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

// Runs the listed stages with the given config; returns the output dir.
fs::path stages(const std::string& tag, const json& config, std::initializer_list<const char*> commands) {
  const fs::path dir = g_root / tag;
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << config.dump();
  for (const char* c : commands) {
    if (cli({c, "--config", (dir / "config.json").string(), "--out", (dir / "out").string(), "--threads",
             std::to_string(g_threads)}) != 0) {
      throw std::runtime_error(tag + ": `" + c + "` failed");
    }
  }
  return dir / "out";
}

double read_accuracy(const fs::path& out) {
  std::ifstream in(out / "main_accuracy.json");
  return json::parse(in).at("test_accuracy").get<double>();
}

BudgetRow table_of(const fs::path& out, std::vector<double> budgets) {
  const LoadedForest f = load_forest(out / "forest.json");
  return detection_table(f.forest, load_signals(out / "signals_test.jsonl"), load_signals(out / "signals_val.jsonl"),
                         budgets);
}

// ---- criteria ---------------------------------------------------------------

Verdict bit_flips() {
  Verdict v;
  v.require(flip_bit(1.0f, 31) == -1.0f, "sign flip of 1.0");
  v.require(flip_bit(1.0f, 23) == 0.5f, "exponent LSB flip of 1.0");
  v.require(std::isinf(flip_bit(1.0f, 30)) && flip_bit(1.0f, 30) > 0, "bit 30 flip of 1.0");

  const ModelSpec spec{{8, 16, 4}};
  Parameters params(spec);
  RngStream gen(2024, 0);
  for (float& x : params.buffer()) x = static_cast<float>(gen.unit() * 2.0 - 1.0);

  std::size_t bad_involution = 0, bad_locality = 0;
  for (std::size_t i = 0; i < 10000; ++i) {
    const auto raw = static_cast<std::uint32_t>(gen());
    const float x = std::bit_cast<float>(raw);
    const auto bit = static_cast<unsigned>(gen.below(32));
    const auto once = std::bit_cast<std::uint32_t>(flip_bit(x, bit));
    const auto twice = std::bit_cast<std::uint32_t>(flip_bit(std::bit_cast<float>(once), bit));
    if (twice != raw) ++bad_involution;
    if ((once ^ raw) != (1u << bit)) ++bad_locality;

    const FaultSpec f = sample_fault(gen, params.size());
    const Parameters hit = apply_fault(params, f);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto a = std::bit_cast<std::uint32_t>(params.buffer()[k]);
      const auto b = std::bit_cast<std::uint32_t>(hit.buffer()[k]);
      if ((a ^ b) != (k == f.param_index ? (1u << f.bit) : 0u)) ++bad_locality;
    }
  }
  v.require(bad_involution == 0, std::to_string(bad_involution) + " involution failures");
  v.require(bad_locality == 0, std::to_string(bad_locality) + " locality failures");
  if (v.pass) v.detail = "3 analytic cases, 10000 random cases";
  return v;
}

Verdict numerics() {
  Verdict v;
  std::mt19937_64 gen(11);
  std::uniform_int_distribution<int> len(1, 512);
  std::uniform_real_distribution<float> mag(-50.0f, 50.0f);
  double worst_sum = 0.0, worst_shift = 0.0;
  for (int t = 0; t < 2000; ++t) {
    VectorF x(len(gen));
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = mag(gen);
    const VectorF p = softmax(x);
    worst_sum = std::max(worst_sum, std::abs(static_cast<double>(p.cast<double>().sum()) - 1.0));
    const VectorF q = softmax((x.array() + 3.5f).matrix().eval());
    worst_shift = std::max(worst_shift, static_cast<double>((p - q).cwiseAbs().maxCoeff()));
  }
  v.require(worst_sum <= 1e-6, "softmax sum off by " + fmt("%.3g", worst_sum));
  v.require(worst_shift <= 1e-6, "shift changed softmax by " + fmt("%.3g", worst_shift));

  VectorF tie(4);
  tie << 0.1f, 0.7f, 0.7f, 0.2f;
  v.require(argmax(tie) == 1, "argmax tie goes to the lower index");

  const ModelSpec spec{{3, 5, 3}};
  const LabeledDataset data = make_blobs(3, 3, 4, 0.5, 2);
  std::vector<std::size_t> rows(data.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  double worst_rel = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Parameters init = init_parameters(spec, seed);
    std::vector<double> w(init.buffer().begin(), init.buffer().end());
    const auto analytic = loss_and_gradient<double>(spec, w, data, rows);
    constexpr double h = 1e-3;
    for (std::size_t k = 0; k < w.size(); ++k) {
      std::vector<double> plus = w, minus = w;
      plus[k] += h;
      minus[k] -= h;
      const double numeric =
          (loss_and_gradient<double>(spec, plus, data, rows).loss - loss_and_gradient<double>(spec, minus, data, rows).loss) /
          (2 * h);
      const double scale = std::max({std::abs(analytic.gradient[k]), std::abs(numeric), 1e-6});
      worst_rel = std::max(worst_rel, std::abs(analytic.gradient[k] - numeric) / scale);
    }
  }
  v.require(worst_rel <= 1e-3, "gradient relative error " + fmt("%.3g", worst_rel));
  if (v.pass) {
    v.detail = "max |sum-1| " + fmt("%.2g", worst_sum) + ", max shift delta " + fmt("%.2g", worst_shift) +
               ", gradient rel err " + fmt("%.2g", worst_rel);
  }
  return v;
}

Verdict sdc_integrity() {
  Verdict v;
  const json config = json::object();
  const fs::path out = stages("c3", config, {"train-main"});
  const CampaignConfig cfg = parse_config(config);
  const TaskData task = load_task(cfg);
  const LoadedModel model = load_weights(out / "weights.bin");
  CampaignOptions opt;
  opt.n_per_class = 2000;
  opt.seed = 3;
  opt.threads = g_threads;
  const BalancedDataset ds = build_dataset(model.spec, model.params, task.test, opt);
  v.require(ds.count(SignalLabel::clean) == 2000 && ds.count(SignalLabel::error) == 2000, "label counts");
  std::size_t changed = 0, errors = 0;
  for (const SignalSample& s : ds.samples) {
    if (s.label != SignalLabel::error) continue;
    ++errors;
    const auto input = task.test.sample(s.input_id);
    const ClassIndex clean = forward(model.spec, model.params, input).predicted_class;
    const ClassIndex faulty = faulty_forward(model.spec, model.params, input, *s.fault).predicted_class;
    changed += faulty != clean;
  }
  v.require(changed == errors, std::to_string(errors - changed) + " error samples replay without a class change");
  const CampaignStats& st = *ds.stats;
  v.detail = std::to_string(changed) + "/" + std::to_string(errors) + " replayed SDCs; " +
             std::to_string(st.flips_attempted) + " flips, " + std::to_string(st.flips_degenerate) + " degenerate";
  return v;
}

Verdict forest_oracles() {
  Verdict v;
  std::mt19937_64 gen(404);
  std::uniform_int_distribution<std::size_t> n_dist(2, 30), d_dist(1, 3);
  std::size_t split_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const SignalMatrix m = test::random_matrix(gen, n_dist(gen), d_dist(gen), 6);
    const test::OracleSplit oracle = test::brute_force_split(m);
    ForestConfig cfg;
    cfg.tree_count = 1;
    cfg.max_depth = 1;
    cfg.bootstrap = false;
    cfg.features_per_split = static_cast<std::size_t>(m.features.cols());
    const Forest single = train_forest(m, cfg);
    const TreeNode& root = single.trees[0].nodes[0];
    const bool same = oracle.found ? (!root.is_leaf() && static_cast<std::size_t>(root.feature) == oracle.feature &&
                                      root.threshold == oracle.threshold)
                                   : root.is_leaf();
    split_mismatch += !same;
  }
  v.require(split_mismatch == 0, std::to_string(split_mismatch) + " depth-1 splits differ from the exhaustive search");

  const SignalMatrix train = test::random_matrix(gen, 500, 10, 400);
  ForestConfig cfg;
  cfg.seed = 5;
  const Forest forest = train_forest(train, cfg, g_threads);
  std::uniform_real_distribution<float> u(0.0f, 100.0f);
  std::size_t score_mismatch = 0;
  for (int i = 0; i < 100; ++i) {
    VectorF x(10);
    for (Eigen::Index k = 0; k < 10; ++k) x(k) = u(gen);
    score_mismatch += score(forest, x) != test::oracle_score(forest, x);
  }
  v.require(score_mismatch == 0, std::to_string(score_mismatch) + " scores differ from the traversal oracle");
  if (v.pass) v.detail = "100 splits and 100 scores identical";
  return v;
}

Verdict calibration() {
  Verdict v;
  const std::vector<double> budgets{0.05, 0.10, 0.15, 0.20};
  std::string detail;
  for (std::uint64_t seed : {1, 2}) {
    const json config = {{"seed", seed}, {"task", {{"test_per_class", 800}}}, {"signals", {{"n_per_class", 8000}}}};
    const fs::path out = stages("c5_" + std::to_string(seed), config, {"train-main", "build-signals", "train-detector"});
    const LoadedForest f = load_forest(out / "forest.json");
    const BalancedDataset val = load_signals(out / "signals_val.jsonl");
    const BalancedDataset test = load_signals(out / "signals_test.jsonl");
    v.require(test.count(SignalLabel::clean) >= 500, "test split has fewer than 500 clean samples");
    const BudgetRow row = detection_table(f.forest, test, val, budgets);
    double previous = 0.0;
    detail += "seed " + std::to_string(seed) + ":";
    for (const BudgetPoint& p : row.points) {
      const ThresholdPolicy policy = calibrate_threshold(f.forest, val, p.budget);
      v.require(policy.achieved_fp <= p.budget, "achieved FP over budget " + fmt("%.2f", p.budget));
      v.require(p.recomputation <= p.budget + 0.02, "realized recomputation " + fmt("%.4f", p.recomputation) +
                                                        " at budget " + fmt("%.2f", p.budget));
      v.require(p.detection >= previous, "detection decreased at budget " + fmt("%.2f", p.budget));
      previous = p.detection;
      detail += " " + fmt("%.0f%%", 100 * p.budget) + "->recomp " + fmt("%.1f%%", 100 * p.recomputation) + "/det " +
                fmt("%.1f%%", 100 * p.detection);
    }
    detail += "; ";
  }
  if (v.pass) v.detail = detail;
  return v;
}

struct SeedResult {
  double accuracy;
  double det10;
};

SeedResult preset_run(const std::string& preset, std::uint64_t seed) {
  const json config = {{"seed", seed}, {"model", {{"preset", preset}}}};
  const fs::path out = stages(preset + "_" + std::to_string(seed), config,
                              {"train-main", "build-signals", "train-detector", "evaluate"});
  return {read_accuracy(out), table_of(out, {0.10}).points[0].detection};
}

std::vector<SeedResult> g_strong;

Verdict headline() {
  Verdict v;
  for (std::uint64_t seed : {1, 2, 3}) {
    const SeedResult r = preset_run("strong", seed);
    g_strong.push_back(r);
    v.require(r.accuracy >= 0.95, "seed " + std::to_string(seed) + " accuracy " + fmt("%.4f", r.accuracy));
    v.require(r.det10 >= 0.90, "seed " + std::to_string(seed) + " detection@10% " + fmt("%.4f", r.det10));
    v.detail += "seed " + std::to_string(seed) + ": acc " + fmt("%.3f", r.accuracy) + " det@10% " +
                fmt("%.1f%%", 100 * r.det10) + "; ";
  }
  return v;
}

Verdict accuracy_trend() {
  Verdict v;
  if (g_strong.size() != 3) throw std::runtime_error("strong-model runs missing");
  for (std::uint64_t seed : {1, 2, 3}) {
    const SeedResult weak = preset_run("weak", seed);
    const SeedResult& strong = g_strong[seed - 1];
    v.require(weak.accuracy >= 0.65 && weak.accuracy <= 0.75,
              "seed " + std::to_string(seed) + " weak accuracy " + fmt("%.4f", weak.accuracy));
    v.require(weak.det10 < strong.det10, "seed " + std::to_string(seed) + " weak detection not below strong");
    v.detail += "seed " + std::to_string(seed) + ": weak acc " + fmt("%.3f", weak.accuracy) + " det " +
                fmt("%.1f%%", 100 * weak.det10) + " < " + fmt("%.1f%%", 100 * strong.det10) + "; ";
  }
  return v;
}

Verdict protocol() {
  Verdict v;
  const fs::path out = g_root / "strong_1" / "out";
  const CampaignConfig cfg = parse_config(json{{"seed", 1}});
  const TaskData task = load_task(cfg);
  const LoadedModel model = load_weights(out / "weights.bin");
  const LoadedForest det = load_forest(out / "forest_calibrated.json");
  if (!det.policy.calibrated()) throw std::runtime_error("policy not calibrated");

  std::size_t flagged = 0, restored = 0, draws = 0;
  for (std::size_t i = 0; flagged < 1000 && i < 1000000; ++i) {
    const auto input = task.test.sample(i % task.test.size());
    const ClassIndex clean = forward(model.spec, model.params, input).predicted_class;
    RngStream rng(99, i);
    const FaultSpec fault = sample_fault(rng, model.params.size());
    ++draws;
    FaultEnvironment env = FaultEnvironment::transient(fault);
    const RunOutcome o = run_with_cced(model.spec, model.params, det.forest, det.policy, input, env);
    if (!o.first_flag) continue;
    ++flagged;
    restored += o.final_class == clean;
  }
  v.require(flagged == 1000, "only " + std::to_string(flagged) + " flagged runs");
  v.require(restored == flagged, std::to_string(flagged - restored) + " flagged runs kept a wrong class");

  std::size_t changed = 0;
  for (std::size_t i = 0; i < task.test.size(); ++i) {
    const auto input = task.test.sample(i);
    FaultEnvironment env = FaultEnvironment::none();
    const RunOutcome o = run_with_cced(model.spec, model.params, det.forest, det.policy, input, env);
    changed += o.final_class != forward(model.spec, model.params, input).predicted_class;
  }
  v.require(changed == 0, std::to_string(changed) + " fault-free inputs changed class");
  if (v.pass) {
    v.detail = std::to_string(restored) + "/1000 flagged transient runs restored (" + std::to_string(draws) +
               " faults drawn); " + std::to_string(task.test.size()) + " fault-free inputs unchanged";
  }
  return v;
}

Verdict overhead() {
  Verdict v;
  // 784-input model, the size of a flattened 28x28 image
  const LabeledDataset all = make_blobs(10, 784, 400, 0.05, 1);
  auto [train_part, held] = holdout_split(all, 200);
  const ModelSpec spec{{784, 128, 10}};
  TrainConfig tc;
  tc.epochs = 5;
  const Parameters params = train(spec, train_part, tc);
  CampaignOptions opt;
  opt.n_per_class = 2000;
  opt.threads = g_threads;
  const SignalSplit parts = split(build_dataset(spec, params, held, opt), SplitFractions{}, 1);
  const Forest forest = train_forest(parts.train, ForestConfig{}, g_threads);

  const auto t0 = std::chrono::steady_clock::now();
  const TimingRow row = timing_ratio(spec, params, forest, held, 1000);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  v.require(row.ratio >= 50.0, "ratio " + fmt("%.1f", row.ratio));
  v.require(secs < 60.0, "timing run took " + fmt("%.1f", secs) + " s");
  v.detail = "main " + fmt("%.4f", row.main_ms) + " ms, detector " + fmt("%.5f", row.detector_ms) + " ms, ratio " +
             fmt("%.1f", row.ratio) + "x (accuracy " + fmt("%.3f", evaluate_accuracy(spec, params, held)) +
             ", timing run " + fmt("%.1f", secs) + " s)";
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict determinism() {
  Verdict v;
  const json config = {{"seed", 42}};
  const std::initializer_list<const char*> all = {"train-main", "build-signals", "train-detector", "evaluate", "run"};
  const fs::path a = stages("c10_a", config, all);
  const fs::path b = stages("c10_b", config, all);
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    const std::string name = entry.path().filename().string();
    // manifest carries timestamps, timing.json wall-clock measurements
    if (name == "manifest.json" || name == "timing.json") continue;
    ++compared;
    v.require(fs::exists(b / name) && slurp(a / name) == slurp(b / name), name + " differs");
  }
  v.require(compared >= 12, "only " + std::to_string(compared) + " artifacts produced");
  if (v.pass) v.detail = std::to_string(compared) + " artifacts byte-identical";
  return v;
}

}  // namespace

int main() {
  g_root = fs::temp_directory_path() / ("cced_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(g_root);
  g_threads = std::max(1u, std::thread::hardware_concurrency());

  int failures = 0;
  failures += run_criterion(1, "bit-flip correctness", 5, bit_flips);
  failures += run_criterion(2, "numerics and gradient", 10, numerics);
  failures += run_criterion(3, "SDC dataset integrity", 120, sdc_integrity);
  failures += run_criterion(4, "forest oracle equivalence", 30, forest_oracles);
  failures += run_criterion(5, "calibration contract", 60, calibration);
  failures += run_criterion(6, "strong model detection @10%", 300, headline);
  failures += run_criterion(7, "accuracy dependence", 300, accuracy_trend);
  failures += run_criterion(8, "re-run protocol", 60, protocol);
  failures += run_criterion(9, "detector overhead", 120, overhead);
  failures += run_criterion(10, "end-to-end determinism", 120, determinism);

  std::error_code ec;
  fs::remove_all(g_root, ec);
  std::printf("%d of 10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
