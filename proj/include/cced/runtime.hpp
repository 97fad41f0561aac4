#ifndef CCED_RUNTIME_HPP
#define CCED_RUNTIME_HPP

#include <cstdint>
#include <optional>
#include <string_view>
#include <variant>

#include "json.hpp"

#include "cced/fault.hpp"
#include "cced/forest.hpp"
#include "cced/model.hpp"

namespace cced {

/// What afflicts successive executions of one inference request.
class FaultEnvironment {
 public:
  static FaultEnvironment none() { return FaultEnvironment(None{}); }
  /// The fault hits the next execution only.
  static FaultEnvironment transient(const FaultSpec& fault) { return FaultEnvironment(Transient{fault}); }
  /// Every execution draws a fresh fault from RngStream(seed, stream).
  static FaultEnvironment always(std::uint64_t seed, std::uint64_t stream) {
    return FaultEnvironment(Always{RngStream(seed, stream)});
  }

  /// Fault for the next execution, consuming a transient one.
  std::optional<FaultSpec> next_execution(std::size_t param_count);

 private:
  struct None {};
  struct Transient {
    std::optional<FaultSpec> pending;
  };
  struct Always {
    RngStream rng;
  };
  using Mode = std::variant<None, Transient, Always>;

  explicit FaultEnvironment(Mode mode) : mode_(std::move(mode)) {}
  Mode mode_;
};

enum class Disposition { accepted_first, corrected_by_rerun, persistent_flag_ignored };

std::string_view to_string(Disposition d);

struct RunOutcome {
  ClassIndex final_class = kInvalidClass;
  int inferences_used = 1;
  bool first_flag = false;
  std::optional<bool> second_flag;  // only set when a re-run happened
  Disposition disposition = Disposition::accepted_first;
};

void to_json(nlohmann::json& j, const RunOutcome& o);

/// Runs the inference, scores its check signal and re-runs once on a flag.
/// A flag on the re-run is recorded but its result is still returned.
RunOutcome run_with_cced(const ModelSpec& spec, const Parameters& params, const Forest& forest,
                         const ThresholdPolicy& policy, const Eigen::Ref<const VectorF>& input, FaultEnvironment& env);

}  // namespace cced

#endif  // CCED_RUNTIME_HPP
