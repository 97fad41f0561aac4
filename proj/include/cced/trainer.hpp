#ifndef CCED_TRAINER_HPP
#define CCED_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "cced/model.hpp"
#include "cced/numerics.hpp"

namespace cced {

/// Samples as rows of `features`, one class label per row.
struct LabeledDataset {
  MatrixF features;
  std::vector<ClassIndex> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_count() const { return static_cast<std::size_t>(features.cols()); }
  auto sample(std::size_t i) const { return features.row(static_cast<Eigen::Index>(i)).transpose(); }

  void validate() const;
};

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Isotropic Gaussian clusters around unit-norm class centres drawn from the
/// seed. Samples are ordered class by class. Larger spread means more
/// overlap and a lower achievable accuracy.
LabeledDataset make_blobs(std::size_t class_count, std::size_t features, std::size_t samples_per_class,
                          double spread, std::uint64_t seed);

/// Splits off the last `holdout_per_class` samples of every class.
std::pair<LabeledDataset, LabeledDataset> holdout_split(const LabeledDataset& data, std::size_t holdout_per_class);

/// CSV with header `f0,...,fn,label`. When class_count is given, labels must
/// be below it; otherwise it is inferred as max label + 1.
LabeledDataset load_csv_dataset(const std::filesystem::path& path,
                                std::optional<std::size_t> class_count = std::nullopt);

void save_csv_dataset(const LabeledDataset& data, const std::filesystem::path& path);

/// Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)), zero biases.
Parameters init_parameters(const ModelSpec& spec, std::uint64_t seed);

/// Minibatch SGD on softmax cross-entropy.
Parameters train(const ModelSpec& spec, const LabeledDataset& data, const TrainConfig& cfg);

/// Same as train(), also returning the full-data loss after every epoch.
Parameters train(const ModelSpec& spec, const LabeledDataset& data, const TrainConfig& cfg,
                 std::vector<double>* epoch_losses);

double evaluate_accuracy(const ModelSpec& spec, const Parameters& params, const LabeledDataset& data);

// Mean cross-entropy over the selected rows and its gradient w.r.t. a flat
// parameter buffer laid out like Parameters. Templated so gradient checks
// can run in double.
template <typename Scalar>
struct LossGradient {
  Scalar loss = 0;
  std::vector<Scalar> gradient;
};

template <typename Scalar>
LossGradient<Scalar> loss_and_gradient(const ModelSpec& spec, std::span<const Scalar> buffer,
                                       const LabeledDataset& data, std::span<const std::size_t> rows) {
  using Vec = Vector<Scalar>;
  using MatMap = Eigen::Map<const Matrix<Scalar>>;
  using VecMap = Eigen::Map<const Vec>;
  using GradMap = Eigen::Map<Matrix<Scalar>>;
  using GradVecMap = Eigen::Map<Vec>;

  const auto layout = make_layout(spec);
  const std::size_t layers = layout.size();
  LossGradient<Scalar> out;
  out.gradient.assign(buffer.size(), Scalar(0));
  if (rows.empty()) return out;

  auto weights = [&](std::size_t l) {
    return MatMap(buffer.data() + layout[l].weight_offset, static_cast<Eigen::Index>(layout[l].rows),
                  static_cast<Eigen::Index>(layout[l].cols));
  };
  auto bias = [&](std::size_t l) {
    return VecMap(buffer.data() + layout[l].bias_offset, static_cast<Eigen::Index>(layout[l].rows));
  };

  std::vector<Vec> acts(layers + 1);
  std::vector<Vec> pre(layers);
  for (std::size_t row : rows) {
    acts[0] = data.sample(row).template cast<Scalar>();
    for (std::size_t l = 0; l < layers; ++l) {
      pre[l] = affine(weights(l), bias(l), acts[l]);
      acts[l + 1] = (l + 1 < layers) ? relu(pre[l]) : softmax(pre[l]);
    }
    const auto label = static_cast<Eigen::Index>(data.labels[row]);
    out.loss -= std::log(std::max(acts[layers](label), std::numeric_limits<Scalar>::min()));

    Vec delta = acts[layers];
    delta(label) -= Scalar(1);
    for (std::size_t l = layers; l-- > 0;) {
      GradMap gw(out.gradient.data() + layout[l].weight_offset, static_cast<Eigen::Index>(layout[l].rows),
                 static_cast<Eigen::Index>(layout[l].cols));
      GradVecMap gb(out.gradient.data() + layout[l].bias_offset, static_cast<Eigen::Index>(layout[l].rows));
      gw.noalias() += delta * acts[l].transpose();
      gb += delta;
      if (l > 0) {
        Vec back = weights(l).transpose() * delta;
        delta = back.cwiseProduct((pre[l - 1].array() > Scalar(0)).matrix().template cast<Scalar>());
      }
    }
  }
  const Scalar scale = Scalar(1) / static_cast<Scalar>(rows.size());
  out.loss *= scale;
  for (Scalar& g : out.gradient) g *= scale;
  return out;
}

}  // namespace cced

#endif  // CCED_TRAINER_HPP
