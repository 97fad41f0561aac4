#include "cced/trainer.hpp"

#include <charconv>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "cced/errors.hpp"
#include "cced/rng.hpp"

namespace cced {

void LabeledDataset::validate() const {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw ShapeError("dataset has " + std::to_string(features.rows()) + " feature rows but " +
                     std::to_string(labels.size()) + " labels");
  }
  for (ClassIndex label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= class_count) {
      throw DomainError("label " + std::to_string(label) + " outside [0, " + std::to_string(class_count) + ")");
    }
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw DomainError("learning_rate must be positive");
  if (batch_size == 0) throw DomainError("batch_size must be positive");
}

LabeledDataset make_blobs(std::size_t class_count, std::size_t features, std::size_t samples_per_class,
                          double spread, std::uint64_t seed) {
  if (class_count < 2) throw DomainError("make_blobs: need at least two classes");
  if (features == 0) throw DomainError("make_blobs: need at least one feature");
  if (spread < 0.0) throw DomainError("make_blobs: spread must be non-negative");

  RngStream rng(seed, 0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Matrix<double> centres(static_cast<Eigen::Index>(class_count), static_cast<Eigen::Index>(features));
  for (Eigen::Index c = 0; c < centres.rows(); ++c) {
    for (Eigen::Index f = 0; f < centres.cols(); ++f) centres(c, f) = gauss(rng);
    centres.row(c).normalize();
  }

  LabeledDataset data;
  data.class_count = class_count;
  data.features.resize(static_cast<Eigen::Index>(class_count * samples_per_class), static_cast<Eigen::Index>(features));
  data.labels.reserve(class_count * samples_per_class);
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < class_count; ++c) {
    for (std::size_t s = 0; s < samples_per_class; ++s, ++row) {
      for (Eigen::Index f = 0; f < centres.cols(); ++f) {
        data.features(row, f) = static_cast<float>(centres(static_cast<Eigen::Index>(c), f) + spread * gauss(rng));
      }
      data.labels.push_back(static_cast<ClassIndex>(c));
    }
  }
  return data;
}

std::pair<LabeledDataset, LabeledDataset> holdout_split(const LabeledDataset& data, std::size_t holdout_per_class) {
  std::vector<std::size_t> per_class(data.class_count, 0);
  for (ClassIndex label : data.labels) ++per_class[static_cast<std::size_t>(label)];

  std::vector<std::size_t> seen(data.class_count, 0);
  std::vector<Eigen::Index> keep, hold;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto c = static_cast<std::size_t>(data.labels[i]);
    const bool to_holdout = seen[c] + holdout_per_class >= per_class[c];
    (to_holdout ? hold : keep).push_back(static_cast<Eigen::Index>(i));
    ++seen[c];
  }

  auto gather = [&](const std::vector<Eigen::Index>& idx) {
    LabeledDataset out;
    out.class_count = data.class_count;
    out.features = data.features(idx, Eigen::all);
    for (Eigen::Index i : idx) out.labels.push_back(data.labels[static_cast<std::size_t>(i)]);
    return out;
  };
  return {gather(keep), gather(hold)};
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

LabeledDataset load_csv_dataset(const std::filesystem::path& path, std::optional<std::size_t> class_count) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());

  std::string line;
  std::size_t line_no = 0;
  std::size_t arity = 0;
  std::vector<std::vector<float>> rows;
  std::vector<ClassIndex> labels;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_commas(line);
    if (arity == 0) {
      if (cells.size() < 2 || trim(cells.back()) != "label") {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": header must end with 'label'");
      }
      arity = cells.size();
      continue;
    }
    if (cells.size() != arity) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(arity) +
                        " fields, got " + std::to_string(cells.size()));
    }
    std::vector<float> row(arity - 1);
    for (std::size_t i = 0; i + 1 < arity; ++i) {
      const std::string_view cell = trim(cells[i]);
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), row[i]);
      if (ec != std::errc() || ptr != cell.data() + cell.size()) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": feature " + std::to_string(i) +
                          " is not a number: '" + std::string(cell) + "'");
      }
    }
    const std::string_view label_cell = trim(cells.back());
    long long label = 0;
    const auto [ptr, ec] = std::from_chars(label_cell.data(), label_cell.data() + label_cell.size(), label);
    if (ec != std::errc() || ptr != label_cell.data() + label_cell.size()) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": label is not an integer: '" +
                        std::string(label_cell) + "'");
    }
    if (label < 0 || (class_count && static_cast<std::size_t>(label) >= *class_count)) {
      throw DomainError(path.string() + ":" + std::to_string(line_no) + ": label " + std::to_string(label) +
                        " out of range");
    }
    rows.push_back(std::move(row));
    labels.push_back(static_cast<ClassIndex>(label));
  }
  if (rows.empty()) throw FormatError(path.string() + ": empty dataset");

  LabeledDataset data;
  data.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(arity - 1));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    data.features.row(static_cast<Eigen::Index>(r)) =
        Eigen::Map<const Eigen::RowVectorXf>(rows[r].data(), static_cast<Eigen::Index>(rows[r].size()));
  }
  data.labels = std::move(labels);
  if (class_count) {
    data.class_count = *class_count;
  } else {
    data.class_count = static_cast<std::size_t>(*std::max_element(data.labels.begin(), data.labels.end())) + 1;
  }
  return data;
}

void save_csv_dataset(const LabeledDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (std::size_t f = 0; f < data.feature_count(); ++f) out << 'f' << f << ',';
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (Eigen::Index f = 0; f < data.features.cols(); ++f) {
      const auto res = std::to_chars(buf, buf + sizeof(buf), data.features(static_cast<Eigen::Index>(i), f));
      out.write(buf, res.ptr - buf);
      out << ',';
    }
    out << data.labels[i] << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Parameters init_parameters(const ModelSpec& spec, std::uint64_t seed) {
  Parameters params(spec);
  RngStream rng(seed, 0);
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const double fan_in = static_cast<double>(spec.layer_dims[l]);
    const double fan_out = static_cast<double>(spec.layer_dims[l + 1]);
    const double s = std::sqrt(6.0 / (fan_in + fan_out));
    auto w = params.weights(l);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = static_cast<float>((2.0 * rng.unit() - 1.0) * s);
    }
  }
  return params;
}

namespace {

void check_shapes(const ModelSpec& spec, const LabeledDataset& data) {
  spec.validate();
  data.validate();
  if (data.feature_count() != spec.input_dim()) {
    throw ShapeError("dataset has " + std::to_string(data.feature_count()) + " features, model expects " +
                     std::to_string(spec.input_dim()));
  }
  if (data.class_count != spec.class_count()) {
    throw ShapeError("dataset has " + std::to_string(data.class_count) + " classes, model outputs " +
                     std::to_string(spec.class_count()));
  }
}

}  // namespace

Parameters train(const ModelSpec& spec, const LabeledDataset& data, const TrainConfig& cfg) {
  return train(spec, data, cfg, nullptr);
}

Parameters train(const ModelSpec& spec, const LabeledDataset& data, const TrainConfig& cfg,
                 std::vector<double>* epoch_losses) {
  check_shapes(spec, data);
  cfg.validate();
  Parameters params = init_parameters(spec, cfg.seed);
  RngStream shuffle_rng(cfg.seed, 1);

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const auto lr = static_cast<float>(cfg.learning_rate);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(i))]);
    }
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      const auto grad = loss_and_gradient<float>(spec, params.buffer(), data,
                                                 std::span<const std::size_t>(order).subspan(start, len));
      auto buf = params.buffer();
      for (std::size_t k = 0; k < buf.size(); ++k) buf[k] -= lr * grad.gradient[k];
    }
    if (epoch_losses) {
      std::vector<std::size_t> all(data.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      epoch_losses->push_back(loss_and_gradient<float>(spec, params.buffer(), data, all).loss);
    }
  }
  return params;
}

double evaluate_accuracy(const ModelSpec& spec, const Parameters& params, const LabeledDataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const InferenceResult r = forward(spec, params, data.sample(i));
    if (!r.degenerate() && r.predicted_class == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace cced
