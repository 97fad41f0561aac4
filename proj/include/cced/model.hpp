#ifndef CCED_MODEL_HPP
#define CCED_MODEL_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cced/numerics.hpp"

namespace cced {

/// Layer widths [d0, d1, ..., dL] of a rectifier MLP with a softmax head.
/// d0 is the input feature count, dL the class count.
struct ModelSpec {
  std::vector<std::size_t> layer_dims;

  std::size_t layer_count() const { return layer_dims.empty() ? 0 : layer_dims.size() - 1; }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t output_dim() const { return layer_dims.back(); }
  std::size_t class_count() const { return layer_dims.back(); }

  /// Throws ShapeError unless L >= 1, every dim >= 1 and dL >= 2.
  void validate() const;

  bool operator==(const ModelSpec&) const = default;
};

struct LayerLayout {
  std::size_t weight_offset;
  std::size_t rows;
  std::size_t cols;
  std::size_t bias_offset;
};

/// Number of weights and biases: sum of d(i+1)*d(i) + d(i+1).
std::size_t param_count(const ModelSpec& spec);

/// All weights and biases in one flat float buffer. Layer i stores its
/// row-major weight matrix followed by its bias vector.
class Parameters {
 public:
  Parameters() = default;
  explicit Parameters(const ModelSpec& spec);
  Parameters(const ModelSpec& spec, std::vector<float> buffer);

  std::span<const float> buffer() const { return buffer_; }
  std::span<float> buffer() { return buffer_; }
  std::size_t size() const { return buffer_.size(); }
  const std::vector<LayerLayout>& layout() const { return layout_; }

  Eigen::Map<const MatrixF> weights(std::size_t layer) const;
  Eigen::Map<MatrixF> weights(std::size_t layer);
  Eigen::Map<const VectorF> bias(std::size_t layer) const;
  Eigen::Map<VectorF> bias(std::size_t layer);

  bool consistent_with(const ModelSpec& spec) const;

  /// Bitwise equality of the buffers (distinguishes -0/+0 and NaN payloads).
  bool bit_equal(const Parameters& other) const;

 private:
  std::vector<float> buffer_;
  std::vector<LayerLayout> layout_;
};

std::vector<LayerLayout> make_layout(const ModelSpec& spec);

struct InferenceResult {
  VectorF check_signal;  // softmax of the final layer
  ClassIndex predicted_class = kInvalidClass;

  bool degenerate() const { return predicted_class == kInvalidClass; }
};

/// Rectifier layers then an affine softmax head. Never mutates params.
InferenceResult forward(const ModelSpec& spec, const Parameters& params,
                        const Eigen::Ref<const VectorF>& input);

/// Binary weight file: "CCEDW1", u32 dim count, u32 dims, raw f32 buffer,
/// all little-endian.
void save_weights(const ModelSpec& spec, const Parameters& params, const std::filesystem::path& path);

struct LoadedModel {
  ModelSpec spec;
  Parameters params;
};

LoadedModel load_weights(const std::filesystem::path& path);

}  // namespace cced

#endif  // CCED_MODEL_HPP
