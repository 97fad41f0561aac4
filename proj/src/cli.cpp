#include "cced/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "cced/errors.hpp"
#include "cced/evaluation.hpp"
#include "cced/fault.hpp"
#include "cced/rng.hpp"
#include "cced/runtime.hpp"

namespace cced {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";
// Fault streams for `run` sit far above the campaign's per-trial streams.
constexpr std::uint64_t kRunStreamBase = 1ull << 40;

// Reads one JSON object, tracking the field path for error messages and
// rejecting keys nobody asked for.
class Fields {
 public:
  Fields(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) out = to_size(*v, at(key));
  }
  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) out = to_double(*v, at(key));
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out, std::initializer_list<const char*> allowed) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(at(key) + ": expected a string");
      out = v->get<std::string>();
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return out == a; })) {
        std::string options;
        for (const char* a : allowed) options += std::string(options.empty() ? "" : ", ") + a;
        throw ConfigError(at(key) + ": '" + out + "' is not one of " + options);
      }
    }
  }
  void read(const std::string& key, fs::path& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(at(key) + ": expected a path string");
      out = v->get<std::string>();
    }
  }
  void read(const std::string& key, std::optional<std::size_t>& out) {
    if (const json* v = find(key)) out = v->is_null() ? std::nullopt : std::optional(to_size(*v, at(key)));
  }
  void read(const std::string& key, std::optional<double>& out) {
    if (const json* v = find(key)) out = v->is_null() ? std::nullopt : std::optional(to_double(*v, at(key)));
  }
  void read(const std::string& key, std::optional<fs::path>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else if (v->is_string()) {
        out = v->get<std::string>();
      } else {
        throw ConfigError(at(key) + ": expected a path string or null");
      }
    }
  }
  template <class T>
  void read_list(const std::string& key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(at(key) + ": expected an array");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        const std::string p = at(key) + "[" + std::to_string(i) + "]";
        if constexpr (std::is_same_v<T, double>) {
          out.push_back(to_double((*v)[i], p));
        } else {
          out.push_back(to_size((*v)[i], p));
        }
      }
    }
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError(at(key) + ": unknown field");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  static std::size_t to_size(const json& v, const std::string& path) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(path + ": expected a non-negative integer");
    }
    return v.get<std::size_t>();
  }
  static double to_double(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    return v.get<double>();
  }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

// ---- artifacts ------------------------------------------------------------

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string config_digest(const CampaignConfig& cfg) {
  const std::string text = cfg.to_json().dump();
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

/// Merges newly written files into manifest.json, re-digesting every entry.
void record(const CampaignConfig& cfg, const std::vector<std::string>& written,
            const std::optional<double>& accuracy = std::nullopt) {
  const fs::path path = cfg.output_dir / "manifest.json";
  json m = json::object();
  if (fs::exists(path)) {
    std::ifstream in(path);
    m = json::parse(in, nullptr, false);
    if (m.is_discarded() || !m.is_object()) m = json::object();
  }
  const std::string now = utc_now();
  if (!m.contains("created")) m["created"] = now;
  m["updated"] = now;
  m["version"] = kVersion;
  m["config_sha256"] = config_digest(cfg);
  if (accuracy) m["main_accuracy"] = *accuracy;

  std::set<std::string> names;
  if (m.contains("artifacts")) {
    for (const auto& a : m["artifacts"]) names.insert(a.at("path").get<std::string>());
  }
  names.insert(written.begin(), written.end());
  json artifacts = json::array();
  for (const std::string& name : names) {
    const fs::path file = cfg.output_dir / name;
    if (!fs::exists(file)) continue;
    artifacts.push_back({{"path", name}, {"sha256", sha256_hex(file)}, {"bytes", fs::file_size(file)}});
  }
  m["artifacts"] = artifacts;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << m.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_json(const fs::path& path, const ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path require_artifact(const CampaignConfig& cfg, const std::string& name, const char* producer) {
  const fs::path p = cfg.output_dir / name;
  if (!fs::exists(p)) throw IoError(p.string() + " not found; run `" + producer + "` first");
  return p;
}

// ---- task and model -------------------------------------------------------

ModelSpec model_spec(const CampaignConfig& cfg, const TaskData& task) {
  ModelSpec spec;
  spec.layer_dims.push_back(task.train.feature_count());
  spec.layer_dims.insert(spec.layer_dims.end(), cfg.model.hidden.begin(), cfg.model.hidden.end());
  spec.layer_dims.push_back(task.train.class_count);
  return spec;
}

LoadedModel load_main(const CampaignConfig& cfg, const TaskData& task) {
  LoadedModel m = load_weights(require_artifact(cfg, "weights.bin", "train-main"));
  if (m.spec.input_dim() != task.test.feature_count() || m.spec.output_dim() != task.test.class_count) {
    throw ShapeError("weights.bin does not match the configured task");
  }
  return m;
}

std::string row_label(const CampaignConfig& cfg) { return cfg.model.preset; }

char* fixed(char (&buf)[32], double v, int digits = 4) {
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

TaskData load_task(const CampaignConfig& cfg) {
  if (cfg.task.kind == "csv") {
    TaskData d;
    d.train = load_csv_dataset(cfg.task.train_csv);
    d.test = load_csv_dataset(cfg.task.test_csv, d.train.class_count);
    if (d.test.feature_count() != d.train.feature_count()) {
      throw FormatError(cfg.task.test_csv.string() + ": feature count differs from the training file");
    }
    d.test.class_count = d.train.class_count;
    return d;
  }
  const LabeledDataset all = make_blobs(cfg.task.classes, cfg.task.features,
                                        cfg.task.train_per_class + cfg.task.test_per_class, cfg.spread(), cfg.seed);
  auto [train, test] = holdout_split(all, cfg.task.test_per_class);
  return {std::move(train), std::move(test)};
}

// ---- config ---------------------------------------------------------------

double CampaignConfig::spread() const {
  if (task.spread) return *task.spread;
  return model.preset == "weak" ? kWeakSpread : kStrongSpread;
}

void CampaignConfig::apply_seed(std::uint64_t s) {
  seed = s;
  model.train.seed = s;
  forest.seed = s;
}

ordered_json CampaignConfig::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  j["threads"] = threads;
  j["output_dir"] = output_dir.string();
  ordered_json task_j;
  task_j["kind"] = task.kind;
  if (task.kind == "csv") {
    task_j["train"] = task.train_csv.string();
    task_j["test"] = task.test_csv.string();
  } else {
    task_j["classes"] = task.classes;
    task_j["features"] = task.features;
    task_j["train_per_class"] = task.train_per_class;
    task_j["test_per_class"] = task.test_per_class;
    task_j["spread"] = spread();
  }
  j["task"] = task_j;
  j["model"] = {{"preset", model.preset},
                {"hidden", model.hidden},
                {"mode", model.mode},
                {"weights", model.weights ? ordered_json(model.weights->string()) : ordered_json(nullptr)},
                {"train",
                 {{"learning_rate", model.train.learning_rate},
                  {"epochs", model.train.epochs},
                  {"batch_size", model.train.batch_size}}}};
  j["signals"] = {{"n_per_class", signals.n_per_class},
                  {"max_attempts", signals.max_attempts},
                  {"split", {{"train", signals.split.train}, {"val", signals.split.val}, {"test", signals.split.test}}}};
  j["forest"] = {{"trees", forest.tree_count},
                 {"max_depth", forest.max_depth ? ordered_json(*forest.max_depth) : ordered_json(nullptr)},
                 {"min_samples_split", forest.min_samples_split},
                 {"features_per_split",
                  forest.features_per_split ? ordered_json(*forest.features_per_split) : ordered_json(nullptr)},
                 {"bootstrap", forest.bootstrap}};
  j["budgets"] = budgets;
  j["run"] = {{"env", run.env}, {"force_sdc", run.force_sdc}, {"count", run.count}, {"budget", run.budget}};
  j["timing"] = {{"runs", timing_runs}};
  return j;
}

CampaignConfig parse_config(const json& j) {
  CampaignConfig cfg;
  Fields root(j, "");
  std::uint64_t seed = cfg.seed;
  if (const json* v = root.find("seed")) {
    if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
      throw ConfigError("seed: expected a non-negative integer");
    }
    seed = v->get<std::uint64_t>();
  }
  root.read("threads", cfg.threads);
  root.read("output_dir", cfg.output_dir);

  if (const json* t = root.find("task")) {
    Fields f(*t, "task");
    f.read("kind", cfg.task.kind, {"blobs", "csv"});
    if (cfg.task.kind == "csv") {
      f.read("train", cfg.task.train_csv);
      f.read("test", cfg.task.test_csv);
      check(!cfg.task.train_csv.empty(), "task.train", "required when task.kind is \"csv\"");
      check(!cfg.task.test_csv.empty(), "task.test", "required when task.kind is \"csv\"");
    } else {
      f.read("classes", cfg.task.classes);
      f.read("features", cfg.task.features);
      f.read("train_per_class", cfg.task.train_per_class);
      f.read("test_per_class", cfg.task.test_per_class);
      f.read("spread", cfg.task.spread);
    }
    f.finish();
  }
  if (cfg.task.kind == "blobs") {
    check(cfg.task.classes >= 2, "task.classes", "must be at least 2");
    check(cfg.task.features >= 1, "task.features", "must be at least 1");
    check(cfg.task.train_per_class >= 1, "task.train_per_class", "must be at least 1");
    check(cfg.task.test_per_class >= 1, "task.test_per_class", "must be at least 1");
    check(!cfg.task.spread || *cfg.task.spread >= 0.0, "task.spread", "must be non-negative");
  }

  if (const json* m = root.find("model")) {
    Fields f(*m, "model");
    f.read("preset", cfg.model.preset, {"strong", "weak"});
    f.read_list("hidden", cfg.model.hidden);
    f.read("mode", cfg.model.mode, {"train", "load"});
    f.read("weights", cfg.model.weights);
    if (const json* tr = f.find("train")) {
      Fields g(*tr, "model.train");
      g.read("learning_rate", cfg.model.train.learning_rate);
      g.read("epochs", cfg.model.train.epochs);
      g.read("batch_size", cfg.model.train.batch_size);
      g.finish();
    }
    f.finish();
  }
  for (std::size_t i = 0; i < cfg.model.hidden.size(); ++i) {
    check(cfg.model.hidden[i] >= 1, "model.hidden[" + std::to_string(i) + "]", "must be at least 1");
  }
  check(cfg.model.mode != "load" || cfg.model.weights, "model.weights", "required when model.mode is \"load\"");
  check(cfg.model.train.learning_rate > 0.0, "model.train.learning_rate", "must be positive");
  check(cfg.model.train.batch_size >= 1, "model.train.batch_size", "must be at least 1");

  if (const json* s = root.find("signals")) {
    Fields f(*s, "signals");
    f.read("n_per_class", cfg.signals.n_per_class);
    f.read("max_attempts", cfg.signals.max_attempts);
    if (const json* sp = f.find("split")) {
      Fields g(*sp, "signals.split");
      g.read("train", cfg.signals.split.train);
      g.read("val", cfg.signals.split.val);
      g.read("test", cfg.signals.split.test);
      g.finish();
    }
    f.finish();
  }
  check(cfg.signals.max_attempts >= 1, "signals.max_attempts", "must be at least 1");
  for (auto [name, v] : {std::pair{"train", cfg.signals.split.train}, {"val", cfg.signals.split.val},
                         {"test", cfg.signals.split.test}}) {
    check(v >= 0.0 && v <= 1.0, std::string("signals.split.") + name, "must lie in [0, 1]");
  }
  check(std::abs(cfg.signals.split.train + cfg.signals.split.val + cfg.signals.split.test - 1.0) <= 1e-9,
        "signals.split", "fractions must sum to 1");

  if (const json* fo = root.find("forest")) {
    Fields f(*fo, "forest");
    f.read("trees", cfg.forest.tree_count);
    f.read("max_depth", cfg.forest.max_depth);
    f.read("min_samples_split", cfg.forest.min_samples_split);
    f.read("features_per_split", cfg.forest.features_per_split);
    f.read("bootstrap", cfg.forest.bootstrap);
    f.finish();
  }
  check(cfg.forest.tree_count >= 1, "forest.trees", "must be at least 1");
  check(!cfg.forest.max_depth || *cfg.forest.max_depth >= 1, "forest.max_depth", "must be at least 1 or null");
  check(cfg.forest.min_samples_split >= 2, "forest.min_samples_split", "must be at least 2");
  check(!cfg.forest.features_per_split || *cfg.forest.features_per_split >= 1, "forest.features_per_split",
        "must be at least 1 or null");

  root.read_list("budgets", cfg.budgets);
  for (std::size_t i = 0; i < cfg.budgets.size(); ++i) {
    check(cfg.budgets[i] > 0.0 && cfg.budgets[i] <= 1.0, "budgets[" + std::to_string(i) + "]", "must lie in (0, 1]");
  }
  std::sort(cfg.budgets.begin(), cfg.budgets.end());
  cfg.budgets.erase(std::unique(cfg.budgets.begin(), cfg.budgets.end()), cfg.budgets.end());

  if (const json* r = root.find("run")) {
    Fields f(*r, "run");
    f.read("env", cfg.run.env, {"none", "transient", "always"});
    f.read("force_sdc", cfg.run.force_sdc);
    f.read("count", cfg.run.count);
    f.read("budget", cfg.run.budget);
    f.finish();
  }
  check(cfg.run.budget > 0.0 && cfg.run.budget <= 1.0, "run.budget", "must lie in (0, 1]");

  if (const json* t = root.find("timing")) {
    Fields f(*t, "timing");
    f.read("runs", cfg.timing_runs);
    f.finish();
  }
  check(cfg.timing_runs >= 1, "timing.runs", "must be at least 1");
  root.finish();

  cfg.apply_seed(seed);
  return cfg;
}

CampaignConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config: cannot open " + path.string());
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("--config: " + path.string() + " is not valid JSON");
  return parse_config(j);
}

std::string sha256_hex(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof(byte), "%02x", md[i]);
    hex += byte;
  }
  return hex;
}

// ---- stages ---------------------------------------------------------------

void cmd_train_main(const CampaignConfig& cfg, std::ostream& log) {
  fs::create_directories(cfg.output_dir);
  const TaskData task = load_task(cfg);
  LoadedModel model{model_spec(cfg, task), Parameters{}};
  if (cfg.model.mode == "load") {
    if (!fs::exists(*cfg.model.weights)) {
      throw ConfigError("model.weights: " + cfg.model.weights->string() + " does not exist");
    }
    model = load_weights(*cfg.model.weights);
    if (model.spec.input_dim() != task.test.feature_count() || model.spec.output_dim() != task.test.class_count) {
      throw ShapeError(cfg.model.weights->string() + " does not match the configured task");
    }
  } else {
    model.params = train(model.spec, task.train, cfg.model.train);
  }
  const double accuracy = evaluate_accuracy(model.spec, model.params, task.test);
  save_weights(model.spec, model.params, cfg.output_dir / "weights.bin");

  ordered_json report;
  report["preset"] = cfg.model.preset;
  report["layer_dims"] = model.spec.layer_dims;
  report["parameters"] = model.params.size();
  report["train_samples"] = task.train.size();
  report["test_samples"] = task.test.size();
  report["test_accuracy"] = accuracy;
  write_json(cfg.output_dir / "main_accuracy.json", report);
  record(cfg, {"weights.bin", "main_accuracy.json"}, accuracy);

  char buf[32];
  log << "held-out accuracy " << fixed(buf, accuracy) << " (" << task.test.size() << " samples, "
      << model.params.size() << " parameters)\n";
}

void cmd_build_signals(const CampaignConfig& cfg, std::ostream& log) {
  const TaskData task = load_task(cfg);
  const LoadedModel model = load_main(cfg, task);
  CampaignOptions opt;
  opt.n_per_class = cfg.signals.n_per_class;
  opt.seed = cfg.seed;
  opt.max_attempts_per_sample = cfg.signals.max_attempts;
  opt.threads = cfg.threads;
  const BalancedDataset ds = build_dataset(model.spec, model.params, task.test, opt);
  const SignalSplit parts = split(ds, cfg.signals.split, cfg.seed);
  save_signals(parts.train, cfg.output_dir / "signals_train.jsonl");
  save_signals(parts.val, cfg.output_dir / "signals_val.jsonl");
  save_signals(parts.test, cfg.output_dir / "signals_test.jsonl");
  record(cfg, {"signals_train.jsonl", "signals_val.jsonl", "signals_test.jsonl"});

  const CampaignStats& st = *ds.stats;
  log << "signals: train " << parts.train.size() << ", val " << parts.val.size() << ", test " << parts.test.size()
      << '\n'
      << "flips attempted " << st.flips_attempted << " = masked " << st.flips_masked << " + sdc " << st.flips_sdc
      << " + degenerate " << st.flips_degenerate << '\n';
}

void cmd_train_detector(const CampaignConfig& cfg, std::ostream& log) {
  const BalancedDataset train_set = load_signals(require_artifact(cfg, "signals_train.jsonl", "build-signals"));
  if (train_set.size() == 0) throw DomainError("signals_train.jsonl holds no samples");
  const Forest forest = train_forest(train_set, cfg.forest, cfg.threads);
  save_forest(forest, ThresholdPolicy{}, cfg.output_dir / "forest.json");
  record(cfg, {"forest.json"});

  const auto clean = score_all(forest, train_set, SignalLabel::clean);
  const auto error = score_all(forest, train_set, SignalLabel::error);
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  std::size_t nodes = 0;
  for (const Tree& t : forest.trees) nodes += t.nodes.size();
  char a[32], b[32];
  log << "forest: " << forest.trees.size() << " trees, " << nodes << " nodes\n"
      << "mean training score: clean " << fixed(a, mean(clean)) << ", error " << fixed(b, mean(error)) << '\n';
}

void cmd_evaluate(const CampaignConfig& cfg, std::ostream& log) {
  const LoadedForest loaded = load_forest(require_artifact(cfg, "forest.json", "train-detector"));
  const BalancedDataset val = load_signals(require_artifact(cfg, "signals_val.jsonl", "build-signals"));
  const BalancedDataset test = load_signals(require_artifact(cfg, "signals_test.jsonl", "build-signals"));
  const Forest& forest = loaded.forest;

  const BudgetRow row = detection_table(forest, test, val, cfg.budgets, row_label(cfg));
  std::vector<ConfusionEntry> confusions;
  for (const BudgetPoint& p : row.points) {
    ThresholdPolicy policy;
    policy.threshold = p.threshold;
    confusions.push_back({row.label, p.budget, confusion(forest, policy, test)});
  }
  write_text(cfg.output_dir / "report.csv", render_report({row}, test.stats, ReportFormat::csv, confusions));
  write_text(cfg.output_dir / "report.md", render_report({row}, test.stats, ReportFormat::markdown, confusions));

  const ThresholdPolicy policy = calibrate_threshold(forest, val, cfg.run.budget);
  save_forest(forest, policy, cfg.output_dir / "forest_calibrated.json");

  // softmax patterns behind the clean/error contrast, first samples of each label
  std::ostringstream patterns;
  const std::size_t classes = test.feature_count();
  patterns << "label,input_id,clean_class,observed_class,degenerate";
  for (std::size_t k = 0; k < classes; ++k) patterns << ",p" << k;
  patterns << '\n';
  std::size_t written[2] = {0, 0};
  char buf[32];
  for (const SignalSample& s : test.samples) {
    std::size_t& n = written[s.label == SignalLabel::error];
    if (n >= 20) continue;
    ++n;
    patterns << (s.label == SignalLabel::error ? "error" : "clean") << ',' << s.input_id << ',' << s.clean_class
             << ',' << s.observed_class << ',' << (s.degenerate ? 1 : 0);
    for (Eigen::Index k = 0; k < s.features.size(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.6g", static_cast<double>(s.features(k)));
      patterns << ',' << buf;
    }
    patterns << '\n';
  }
  write_text(cfg.output_dir / "patterns.csv", patterns.str());

  // timings vary run to run, so they stay out of the reports
  const TaskData task = load_task(cfg);
  const LoadedModel model = load_main(cfg, task);
  const TimingRow timing = timing_ratio(model.spec, model.params, forest, task.test, cfg.timing_runs);
  ordered_json tj;
  tj["main_forward_ms"] = timing.main_ms;
  tj["detector_score_ms"] = timing.detector_ms;
  tj["ratio"] = timing.ratio;
  tj["runs"] = timing.n_runs;
  write_json(cfg.output_dir / "timing.json", tj);
  record(cfg, {"report.csv", "report.md", "forest_calibrated.json", "patterns.csv", "timing.json"});

  log << render_report({row}, std::nullopt, ReportFormat::markdown);
  char t[32];
  log << "calibrated threshold at " << fixed(t, 100.0 * cfg.run.budget, 1) << "% budget: " << fixed(buf, policy.threshold, 6)
      << '\n';
  char r[32];
  log << "timing: main " << fixed(buf, timing.main_ms, 5) << " ms, detector " << fixed(t, timing.detector_ms, 5)
      << " ms, ratio " << fixed(r, timing.ratio, 1) << "x\n";
}

void cmd_run(const CampaignConfig& cfg, std::ostream& log) {
  const LoadedForest loaded = load_forest(require_artifact(cfg, "forest_calibrated.json", "evaluate"));
  if (!loaded.policy.calibrated()) throw ConfigError("forest_calibrated.json: policy is not calibrated; run `evaluate`");
  const TaskData task = load_task(cfg);
  const LoadedModel model = load_main(cfg, task);
  if (loaded.forest.feature_count != task.test.class_count) {
    throw ShapeError("forest feature count does not match the main model's output width");
  }

  std::ostringstream lines;
  std::map<std::string, std::size_t> histogram;
  std::size_t inferences = 0, first_flags = 0, final_matches = 0, flagged_matches = 0, faulted = 0;
  for (std::size_t i = 0; i < cfg.run.count; ++i) {
    const std::size_t input_id = i % task.test.size();
    const auto input = task.test.sample(input_id);
    const ClassIndex clean_class = forward(model.spec, model.params, input).predicted_class;

    std::optional<FaultSpec> fault;
    FaultEnvironment env = FaultEnvironment::none();
    if (cfg.run.env == "transient") {
      RngStream rng(cfg.seed, kRunStreamBase + i);
      for (std::size_t attempt = 0;; ++attempt) {
        if (attempt == cfg.signals.max_attempts) {
          throw CampaignError("run input " + std::to_string(input_id) + ": no classification change after " +
                              std::to_string(attempt) + " flips");
        }
        fault = sample_fault(rng, model.params.size());
        if (!cfg.run.force_sdc) break;
        if (faulty_forward(model.spec, model.params, input, *fault).predicted_class != clean_class) break;
      }
      env = FaultEnvironment::transient(*fault);
      ++faulted;
    } else if (cfg.run.env == "always") {
      env = FaultEnvironment::always(cfg.seed, kRunStreamBase + i);
    }

    const RunOutcome o = run_with_cced(model.spec, model.params, loaded.forest, loaded.policy, input, env);
    inferences += static_cast<std::size_t>(o.inferences_used);
    first_flags += o.first_flag;
    final_matches += o.final_class == clean_class;
    if (o.first_flag) flagged_matches += o.final_class == clean_class;
    ++histogram[std::string(to_string(o.disposition))];

    ordered_json line;
    line["index"] = i;
    line["input_id"] = input_id;
    line["fault"] = fault ? ordered_json{{"param_index", fault->param_index}, {"bit", fault->bit}} : ordered_json(nullptr);
    line["clean_class"] = clean_class;
    line["final_class"] = o.final_class;
    line["inferences_used"] = o.inferences_used;
    line["first_flag"] = o.first_flag;
    line["second_flag"] = o.second_flag ? ordered_json(*o.second_flag) : ordered_json(nullptr);
    line["disposition"] = to_string(o.disposition);
    lines << line.dump() << '\n';
  }
  write_text(cfg.output_dir / "outcomes.jsonl", lines.str());

  const double n = std::max<double>(1.0, static_cast<double>(cfg.run.count));
  ordered_json summary;
  summary["env"] = cfg.run.env;
  summary["force_sdc"] = cfg.run.force_sdc;
  summary["count"] = cfg.run.count;
  summary["faulted"] = faulted;
  summary["mean_inferences"] = static_cast<double>(inferences) / n;
  summary["first_flag_rate"] = static_cast<double>(first_flags) / n;
  summary["final_equals_clean"] = final_matches;
  summary["flagged_final_equals_clean"] = flagged_matches;
  summary["threshold"] = loaded.policy.threshold;
  summary["fp_budget"] = loaded.policy.fp_budget ? ordered_json(*loaded.policy.fp_budget) : ordered_json(nullptr);
  ordered_json hist;
  for (const char* d : {"accepted_first", "corrected_by_rerun", "persistent_flag_ignored"}) hist[d] = histogram[d];
  summary["dispositions"] = hist;
  write_json(cfg.output_dir / "run_summary.json", summary);
  record(cfg, {"outcomes.jsonl", "run_summary.json"});

  char buf[32];
  log << "run: " << cfg.run.count << " inputs, env " << cfg.run.env << ", mean inferences "
      << fixed(buf, static_cast<double>(inferences) / n) << '\n'
      << "dispositions: accepted_first " << hist["accepted_first"] << ", corrected_by_rerun "
      << hist["corrected_by_rerun"] << ", persistent_flag_ignored " << hist["persistent_flag_ignored"] << '\n'
      << "flagged runs ending on the fault-free class: " << flagged_matches << " of " << first_flags << '\n';
}

// ---- entry ----------------------------------------------------------------

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Concurrent classifier error detection: fault campaigns, detector training and evaluation"};
  app.require_subcommand(1);

  struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
  };
  Common common;
  using Stage = void (*)(const CampaignConfig&, std::ostream&);
  const std::vector<std::tuple<const char*, const char*, std::vector<Stage>>> commands = {
      {"train-main", "Train (or load) the main classifier and report held-out accuracy", {cmd_train_main}},
      {"build-signals", "Run the fault campaign and write train/val/test signal files", {cmd_build_signals}},
      {"train-detector", "Train the random-forest detector on the training signals", {cmd_train_detector}},
      {"evaluate", "Calibrate per budget, write report.csv/report.md and timing", {cmd_evaluate}},
      {"run", "Stream inputs through the detect-and-rerun protocol", {cmd_run}},
      {"pipeline",
       "All stages in order",
       {cmd_train_main, cmd_build_signals, cmd_train_detector, cmd_evaluate, cmd_run}},
  };
  std::vector<std::pair<CLI::App*, const std::vector<Stage>*>> subs;
  for (const auto& [name, help, stages] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", common.config, "JSON configuration file (defaults apply to missing fields)");
    sub->add_option("--out", common.out, "Output directory (overrides output_dir)");
    sub->add_option("--seed", common.seed, "Seed (overrides seed)");
    sub->add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber);
    subs.emplace_back(sub, &stages);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    CampaignConfig cfg = common.config.empty() ? parse_config(json::object()) : load_config(common.config);
    if (!common.out.empty()) cfg.output_dir = common.out;
    if (common.seed) cfg.apply_seed(*common.seed);
    if (common.threads) cfg.threads = *common.threads;
    for (const auto& [sub, stages] : subs) {
      if (!sub->parsed()) continue;
      for (Stage stage : *stages) stage(cfg, out);
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const CampaignError& e) {
    err << "campaign error: " << e.what() << '\n';
    return 4;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return 3;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return 3;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return 3;
  } catch (const DomainError& e) {
    err << "data error: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace cced
