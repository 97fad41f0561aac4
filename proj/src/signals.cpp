#include "cced/signals.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"

#include "cced/errors.hpp"
#include "cced/parallel.hpp"
#include "cced/rng.hpp"

namespace cced {

CampaignStats& CampaignStats::operator+=(const CampaignStats& o) {
  flips_attempted += o.flips_attempted;
  flips_masked += o.flips_masked;
  flips_sdc += o.flips_sdc;
  flips_degenerate += o.flips_degenerate;
  return *this;
}

std::size_t BalancedDataset::count(SignalLabel label) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [label](const SignalSample& s) { return s.label == label; }));
}

VectorF check_features(const InferenceResult& result) {
  if (result.degenerate()) return VectorF::Zero(result.check_signal.size());
  return result.check_signal;
}

namespace {

struct ErrorTrial {
  SignalSample sample;
  CampaignStats stats;
  bool exhausted = false;
};

ErrorTrial run_error_trial(FaultInjector& injector, const LabeledDataset& inputs, std::size_t trial,
                           const InferenceResult& clean, const CampaignOptions& options, std::size_t n_params) {
  const std::size_t input_id = trial % inputs.size();
  RngStream rng(options.seed, trial);
  ErrorTrial out;
  for (std::size_t attempt = 0; attempt < options.max_attempts_per_sample; ++attempt) {
    const FaultSpec fault = sample_fault(rng, n_params);
    const InferenceResult observed = injector.run(inputs.sample(input_id), fault);
    ++out.stats.flips_attempted;
    if (observed.degenerate()) {
      ++out.stats.flips_degenerate;
    } else if (observed.predicted_class == clean.predicted_class) {
      ++out.stats.flips_masked;
      continue;
    } else {
      ++out.stats.flips_sdc;
    }
    out.sample.features = check_features(observed);
    out.sample.label = SignalLabel::error;
    out.sample.input_id = input_id;
    out.sample.fault = fault;
    out.sample.clean_class = clean.predicted_class;
    out.sample.observed_class = observed.predicted_class;
    out.sample.degenerate = observed.degenerate();
    return out;
  }
  out.exhausted = true;
  return out;
}

}  // namespace

BalancedDataset build_dataset(const ModelSpec& spec, const Parameters& params, const LabeledDataset& inputs,
                              const CampaignOptions& options) {
  BalancedDataset ds;
  ds.stats = CampaignStats{};
  if (options.n_per_class == 0) return ds;
  if (inputs.size() == 0) throw DomainError("build_dataset: no evaluation inputs");
  if (inputs.feature_count() != spec.input_dim()) {
    throw ShapeError("build_dataset: inputs have " + std::to_string(inputs.feature_count()) +
                     " features, model expects " + std::to_string(spec.input_dim()));
  }

  const std::size_t used_inputs = std::min(inputs.size(), options.n_per_class);
  std::vector<InferenceResult> clean(used_inputs);
  for (std::size_t i = 0; i < used_inputs; ++i) {
    clean[i] = forward(spec, params, inputs.sample(i));
    if (clean[i].degenerate()) {
      throw CampaignError("fault-free inference on input " + std::to_string(i) + " is degenerate");
    }
  }

  const std::size_t n_params = params.size();
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, options.n_per_class));
  std::vector<ErrorTrial> trials(options.n_per_class);
  // Workers own disjoint strided trial sets and one injector each.
  parallel_for(threads, threads, [&](std::size_t worker) {
    FaultInjector injector(spec, params);
    for (std::size_t t = worker; t < options.n_per_class; t += threads) {
      trials[t] = run_error_trial(injector, inputs, t, clean[t % inputs.size()], options, n_params);
    }
  });

  ds.samples.reserve(2 * options.n_per_class);
  for (std::size_t t = 0; t < options.n_per_class; ++t) {
    if (trials[t].exhausted) {
      throw CampaignError("input " + std::to_string(t % inputs.size()) + ": no classification change after " +
                          std::to_string(options.max_attempts_per_sample) + " flips (trial " + std::to_string(t) +
                          ")");
    }
    const std::size_t input_id = t % inputs.size();
    SignalSample c;
    c.features = clean[input_id].check_signal;
    c.label = SignalLabel::clean;
    c.input_id = input_id;
    c.clean_class = clean[input_id].predicted_class;
    c.observed_class = c.clean_class;
    ds.samples.push_back(std::move(c));
    ds.samples.push_back(std::move(trials[t].sample));
    *ds.stats += trials[t].stats;
  }
  return ds;
}

SignalSample replay(const ModelSpec& spec, const Parameters& params, const LabeledDataset& inputs,
                    const SignalSample& recorded) {
  if (recorded.input_id >= inputs.size()) throw DomainError("replay: input id out of range");
  const InferenceResult clean = forward(spec, params, inputs.sample(recorded.input_id));
  SignalSample out = recorded;
  out.clean_class = clean.predicted_class;
  if (!recorded.fault) {
    out.features = clean.check_signal;
    out.observed_class = clean.predicted_class;
    out.degenerate = false;
    return out;
  }
  const InferenceResult observed = faulty_forward(spec, params, inputs.sample(recorded.input_id), *recorded.fault);
  out.features = check_features(observed);
  out.observed_class = observed.predicted_class;
  out.degenerate = observed.degenerate();
  return out;
}

SignalSplit split(const BalancedDataset& ds, const SplitFractions& fractions, std::uint64_t seed) {
  const double f[3] = {fractions.train, fractions.val, fractions.test};
  for (double x : f) {
    if (!(x >= 0.0) || x > 1.0) throw DomainError("split fractions must lie in [0, 1]");
  }
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw DomainError("split fractions must sum to 1");

  // part index per sample; assigned per label after a seeded shuffle
  std::vector<int> part(ds.size(), 2);
  for (const SignalLabel label : {SignalLabel::clean, SignalLabel::error}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.samples[i].label == label) idx.push_back(i);
    }
    RngStream rng(seed, label == SignalLabel::clean ? 0 : 1);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.below(i))]);

    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(f[0] * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(f[1] * n)));
    for (std::size_t k = 0; k < idx.size(); ++k) part[idx[k]] = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
  }

  SignalSplit out;
  BalancedDataset* parts[3] = {&out.train, &out.val, &out.test};
  for (BalancedDataset* p : parts) p->stats = ds.stats;
  for (std::size_t i = 0; i < ds.size(); ++i) parts[part[i]]->samples.push_back(ds.samples[i]);
  return out;
}

namespace {

nlohmann::json stats_json(const CampaignStats& s) {
  return {{"flips_attempted", s.flips_attempted},
          {"flips_masked", s.flips_masked},
          {"flips_sdc", s.flips_sdc},
          {"flips_degenerate", s.flips_degenerate}};
}

CampaignStats stats_from_json(const nlohmann::json& j) {
  CampaignStats s;
  j.at("flips_attempted").get_to(s.flips_attempted);
  j.at("flips_masked").get_to(s.flips_masked);
  j.at("flips_sdc").get_to(s.flips_sdc);
  j.at("flips_degenerate").get_to(s.flips_degenerate);
  return s;
}

std::string format_floats(const VectorF& v) {
  std::string out = "[";
  char buf[32];
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) out.push_back(',');
    const auto res = std::to_chars(buf, buf + sizeof(buf), v(i));
    out.append(buf, res.ptr);
  }
  out.push_back(']');
  return out;
}

// Reads the features array straight from the line text as float so values
// round-trip without passing through double.
VectorF parse_features(const std::string& line, std::size_t expected) {
  static constexpr std::string_view key = "\"features\":[";
  const std::size_t at = line.find(key);
  if (at == std::string::npos) throw FormatError("features array not found");
  const char* p = line.data() + at + key.size();
  const char* end = line.data() + line.size();
  VectorF v(static_cast<Eigen::Index>(expected));
  for (std::size_t i = 0; i < expected; ++i) {
    while (p < end && (*p == ' ' || *p == ',')) ++p;
    float x = 0.0f;
    const auto res = std::from_chars(p, end, x);
    if (res.ec != std::errc()) throw FormatError("bad feature value");
    v(static_cast<Eigen::Index>(i)) = x;
    p = res.ptr;
  }
  return v;
}

}  // namespace

void save_signals(const BalancedDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  if (ds.stats) out << nlohmann::json{{"stats", stats_json(*ds.stats)}}.dump() << '\n';
  for (const SignalSample& s : ds.samples) {
    nlohmann::ordered_json rest;
    rest["label"] = s.label == SignalLabel::clean ? "clean" : "error";
    rest["input_id"] = s.input_id;
    rest["fault"] = s.fault ? nlohmann::json(*s.fault) : nlohmann::json(nullptr);
    rest["clean_class"] = s.clean_class;
    rest["observed_class"] = s.observed_class;
    rest["degenerate"] = s.degenerate;
    const std::string tail = rest.dump();
    out << "{\"features\":" << format_floats(s.features) << ',' << tail.substr(1) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

BalancedDataset load_signals(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  BalancedDataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("stats")) {
        if (line_no != 1 || !ds.samples.empty()) throw FormatError("stats header must be the first line");
        ds.stats = stats_from_json(j.at("stats"));
        continue;
      }
      SignalSample s;
      const std::string label = j.at("label").get<std::string>();
      if (label == "clean") {
        s.label = SignalLabel::clean;
      } else if (label == "error") {
        s.label = SignalLabel::error;
      } else {
        throw FormatError("unknown label '" + label + "'");
      }
      const auto& features = j.at("features");
      if (!features.is_array()) throw FormatError("features must be an array");
      s.features = parse_features(line, features.size());
      j.at("input_id").get_to(s.input_id);
      if (!j.at("fault").is_null()) s.fault = j.at("fault").get<FaultSpec>();
      j.at("clean_class").get_to(s.clean_class);
      j.at("observed_class").get_to(s.observed_class);
      j.at("degenerate").get_to(s.degenerate);
      if ((s.label == SignalLabel::error) != s.fault.has_value()) {
        throw FormatError("error samples carry a fault and clean samples do not");
      }
      if (!ds.samples.empty() && ds.samples.front().features.size() != s.features.size()) {
        throw FormatError("feature count differs from earlier lines");
      }
      ds.samples.push_back(std::move(s));
    } catch (const FormatError& e) {
      throw FormatError(where + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + e.what());
    } catch (const DomainError& e) {
      throw FormatError(where + e.what());
    }
  }
  return ds;
}

}  // namespace cced
