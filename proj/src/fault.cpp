#include "cced/fault.hpp"

#include <bit>
#include <string>

#include "cced/errors.hpp"

namespace cced {

void to_json(nlohmann::json& j, const FaultSpec& f) {
  j = nlohmann::json{{"param_index", f.param_index}, {"bit", f.bit}};
}

void from_json(const nlohmann::json& j, FaultSpec& f) {
  j.at("param_index").get_to(f.param_index);
  j.at("bit").get_to(f.bit);
  if (f.bit > 31) throw DomainError("fault bit " + std::to_string(f.bit) + " out of range");
}

FaultSpec sample_fault(RngStream& rng, std::size_t param_count) {
  if (param_count == 0) throw DomainError("sample_fault: model has no parameters");
  FaultSpec f;
  f.param_index = static_cast<std::size_t>(rng.below(param_count));
  f.bit = static_cast<unsigned>(rng.below(32));
  return f;
}

float flip_bit(float value, unsigned bit) {
  if (bit > 31) throw DomainError("flip_bit: bit " + std::to_string(bit) + " out of range");
  return std::bit_cast<float>(std::bit_cast<std::uint32_t>(value) ^ (std::uint32_t{1} << bit));
}

namespace {

void check_fault(const Parameters& params, const FaultSpec& fault) {
  if (fault.param_index >= params.size()) {
    throw DomainError("fault index " + std::to_string(fault.param_index) + " out of range for " +
                      std::to_string(params.size()) + " parameters");
  }
  if (fault.bit > 31) throw DomainError("fault bit " + std::to_string(fault.bit) + " out of range");
}

}  // namespace

Parameters apply_fault(const Parameters& params, const FaultSpec& fault) {
  check_fault(params, fault);
  Parameters out = params;
  float& target = out.buffer()[fault.param_index];
  target = flip_bit(target, fault.bit);
  return out;
}

InferenceResult faulty_forward(const ModelSpec& spec, const Parameters& params,
                               const Eigen::Ref<const VectorF>& input, const FaultSpec& fault) {
  return forward(spec, apply_fault(params, fault), input);
}

FaultInjector::FaultInjector(const ModelSpec& spec, const Parameters& params) : spec_(spec), working_(params) {
  if (!working_.consistent_with(spec_)) throw ShapeError("FaultInjector: parameters do not match model spec");
}

InferenceResult FaultInjector::run(const Eigen::Ref<const VectorF>& input, const FaultSpec& fault) {
  check_fault(working_, fault);
  float& target = working_.buffer()[fault.param_index];
  const float original = target;
  target = flip_bit(original, fault.bit);
  InferenceResult result;
  try {
    result = forward(spec_, working_, input);
  } catch (...) {
    target = original;
    throw;
  }
  target = original;
  return result;
}

InferenceResult FaultInjector::run_clean(const Eigen::Ref<const VectorF>& input) const {
  return forward(spec_, working_, input);
}

}  // namespace cced
