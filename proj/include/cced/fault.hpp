#ifndef CCED_FAULT_HPP
#define CCED_FAULT_HPP

#include <cstddef>
#include <cstdint>

#include "json.hpp"

#include "cced/model.hpp"
#include "cced/rng.hpp"

namespace cced {

/// One transient single-bit upset: bit `bit` (0 = mantissa LSB, 31 = sign)
/// of parameter `param_index`.
struct FaultSpec {
  std::size_t param_index = 0;
  unsigned bit = 0;

  bool operator==(const FaultSpec&) const = default;
};

void to_json(nlohmann::json& j, const FaultSpec& f);
void from_json(const nlohmann::json& j, FaultSpec& f);

/// Parameter index and bit position drawn uniformly and independently.
FaultSpec sample_fault(RngStream& rng, std::size_t param_count);

/// XOR-toggles one bit of a single float.
float flip_bit(float value, unsigned bit);

/// Copy of params with the fault applied. The input is untouched.
Parameters apply_fault(const Parameters& params, const FaultSpec& fault);

/// forward() on a faulted copy of the parameters. The fault lives for this
/// one inference only.
InferenceResult faulty_forward(const ModelSpec& spec, const Parameters& params,
                               const Eigen::Ref<const VectorF>& input, const FaultSpec& fault);

/// Owns a private working copy of the parameters and runs faulted inferences
/// by flipping in place, computing, and flipping back. One injector per
/// worker; the shared source parameters are never written.
class FaultInjector {
 public:
  FaultInjector(const ModelSpec& spec, const Parameters& params);

  InferenceResult run(const Eigen::Ref<const VectorF>& input, const FaultSpec& fault);
  InferenceResult run_clean(const Eigen::Ref<const VectorF>& input) const;

  const Parameters& working_params() const { return working_; }

 private:
  ModelSpec spec_;
  Parameters working_;
};

}  // namespace cced

#endif  // CCED_FAULT_HPP
