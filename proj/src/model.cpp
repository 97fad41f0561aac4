#include "cced/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "cced/errors.hpp"

namespace cced {

void ModelSpec::validate() const {
  if (layer_dims.size() < 2) throw ShapeError("model spec needs at least two layer dims");
  for (std::size_t d : layer_dims) {
    if (d == 0) throw ShapeError("model spec has a zero-width layer");
  }
  if (layer_dims.back() < 2) throw ShapeError("model spec needs at least two classes");
}

std::size_t param_count(const ModelSpec& spec) {
  std::size_t total = 0;
  for (std::size_t i = 0; i + 1 < spec.layer_dims.size(); ++i) {
    total += spec.layer_dims[i + 1] * spec.layer_dims[i] + spec.layer_dims[i + 1];
  }
  return total;
}

std::vector<LayerLayout> make_layout(const ModelSpec& spec) {
  std::vector<LayerLayout> layout;
  std::size_t offset = 0;
  for (std::size_t i = 0; i + 1 < spec.layer_dims.size(); ++i) {
    const std::size_t rows = spec.layer_dims[i + 1];
    const std::size_t cols = spec.layer_dims[i];
    layout.push_back({offset, rows, cols, offset + rows * cols});
    offset += rows * cols + rows;
  }
  return layout;
}

Parameters::Parameters(const ModelSpec& spec) : buffer_(param_count(spec), 0.0f), layout_(make_layout(spec)) {
  spec.validate();
}

Parameters::Parameters(const ModelSpec& spec, std::vector<float> buffer)
    : buffer_(std::move(buffer)), layout_(make_layout(spec)) {
  spec.validate();
  if (buffer_.size() != param_count(spec)) {
    throw ShapeError("parameter buffer has " + std::to_string(buffer_.size()) + " values, spec needs " +
                     std::to_string(param_count(spec)));
  }
}

Eigen::Map<const MatrixF> Parameters::weights(std::size_t layer) const {
  const LayerLayout& l = layout_.at(layer);
  return {buffer_.data() + l.weight_offset, static_cast<Eigen::Index>(l.rows), static_cast<Eigen::Index>(l.cols)};
}

Eigen::Map<MatrixF> Parameters::weights(std::size_t layer) {
  const LayerLayout& l = layout_.at(layer);
  return {buffer_.data() + l.weight_offset, static_cast<Eigen::Index>(l.rows), static_cast<Eigen::Index>(l.cols)};
}

Eigen::Map<const VectorF> Parameters::bias(std::size_t layer) const {
  const LayerLayout& l = layout_.at(layer);
  return {buffer_.data() + l.bias_offset, static_cast<Eigen::Index>(l.rows)};
}

Eigen::Map<VectorF> Parameters::bias(std::size_t layer) {
  const LayerLayout& l = layout_.at(layer);
  return {buffer_.data() + l.bias_offset, static_cast<Eigen::Index>(l.rows)};
}

bool Parameters::consistent_with(const ModelSpec& spec) const {
  if (buffer_.size() != param_count(spec)) return false;
  const auto expected = make_layout(spec);
  if (expected.size() != layout_.size()) return false;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].rows != layout_[i].rows || expected[i].cols != layout_[i].cols) return false;
  }
  return true;
}

bool Parameters::bit_equal(const Parameters& other) const {
  return buffer_.size() == other.buffer_.size() &&
         std::memcmp(buffer_.data(), other.buffer_.data(), buffer_.size() * sizeof(float)) == 0;
}

InferenceResult forward(const ModelSpec& spec, const Parameters& params, const Eigen::Ref<const VectorF>& input) {
  if (!params.consistent_with(spec)) throw ShapeError("forward: parameters do not match model spec");
  if (static_cast<std::size_t>(input.size()) != spec.input_dim()) {
    throw ShapeError("forward: input has " + std::to_string(input.size()) + " features, model expects " +
                     std::to_string(spec.input_dim()));
  }
  const std::size_t layers = spec.layer_count();
  VectorF activation = input;
  for (std::size_t i = 0; i + 1 < layers; ++i) {
    activation = relu(affine(params.weights(i), params.bias(i), activation));
  }
  VectorF logits = affine(params.weights(layers - 1), params.bias(layers - 1), activation);
  InferenceResult result;
  result.check_signal = softmax(logits);
  result.predicted_class = argmax(result.check_signal);
  return result;
}

namespace {

constexpr char kMagic[6] = {'C', 'C', 'E', 'D', 'W', '1'};

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const std::string& bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  return v;
}

}  // namespace

void save_weights(const ModelSpec& spec, const Parameters& params, const std::filesystem::path& path) {
  spec.validate();
  if (!params.consistent_with(spec)) throw ShapeError("save_weights: parameters do not match model spec");
  std::string bytes(kMagic, sizeof(kMagic));
  put_u32(bytes, static_cast<std::uint32_t>(spec.layer_dims.size()));
  for (std::size_t d : spec.layer_dims) put_u32(bytes, static_cast<std::uint32_t>(d));
  for (float v : params.buffer()) put_u32(bytes, std::bit_cast<std::uint32_t>(v));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

LoadedModel load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  auto need = [&](std::size_t offset, std::size_t count, const char* what) {
    if (bytes.size() < offset + count) {
      throw FormatError(path.string() + ": truncated at byte " + std::to_string(bytes.size()) + " while reading " +
                        what + " (expected " + std::to_string(offset + count) + " bytes, got " +
                        std::to_string(bytes.size()) + ")");
    }
  };

  need(0, sizeof(kMagic), "magic");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path.string() + ": bad magic at byte 0");
  }
  std::size_t offset = sizeof(kMagic);
  need(offset, 4, "layer count");
  const std::uint32_t dim_count = get_u32(bytes, offset);
  offset += 4;
  if (dim_count < 2 || dim_count > 4096) {
    throw FormatError(path.string() + ": implausible layer count " + std::to_string(dim_count) + " at byte 6");
  }
  need(offset, 4ull * dim_count, "layer dims");
  ModelSpec spec;
  for (std::uint32_t i = 0; i < dim_count; ++i, offset += 4) spec.layer_dims.push_back(get_u32(bytes, offset));
  try {
    spec.validate();
  } catch (const ShapeError& e) {
    throw FormatError(path.string() + ": invalid dims at byte 10: " + e.what());
  }

  const std::size_t count = param_count(spec);
  const std::size_t body = bytes.size() - offset;
  if (body != 4 * count) {
    throw FormatError(path.string() + ": parameter buffer at byte " + std::to_string(offset) + " has " +
                      std::to_string(body) + " bytes, expected " + std::to_string(4 * count));
  }
  std::vector<float> buffer(count);
  for (std::size_t i = 0; i < count; ++i, offset += 4) buffer[i] = std::bit_cast<float>(get_u32(bytes, offset));
  Parameters params(spec, std::move(buffer));
  return {std::move(spec), std::move(params)};
}

}  // namespace cced
