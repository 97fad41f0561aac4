#include "cced/runtime.hpp"

#include "cced/signals.hpp"

namespace cced {

std::optional<FaultSpec> FaultEnvironment::next_execution(std::size_t param_count) {
  return std::visit(
      [&](auto& mode) -> std::optional<FaultSpec> {
        using T = std::decay_t<decltype(mode)>;
        if constexpr (std::is_same_v<T, None>) {
          return std::nullopt;
        } else if constexpr (std::is_same_v<T, Transient>) {
          return std::exchange(mode.pending, std::nullopt);
        } else {
          return sample_fault(mode.rng, param_count);
        }
      },
      mode_);
}

std::string_view to_string(Disposition d) {
  switch (d) {
    case Disposition::accepted_first:
      return "accepted_first";
    case Disposition::corrected_by_rerun:
      return "corrected_by_rerun";
    case Disposition::persistent_flag_ignored:
      return "persistent_flag_ignored";
  }
  return "unknown";
}

void to_json(nlohmann::json& j, const RunOutcome& o) {
  j = nlohmann::json{{"final_class", o.final_class},
                     {"inferences_used", o.inferences_used},
                     {"first_flag", o.first_flag},
                     {"second_flag", o.second_flag ? nlohmann::json(*o.second_flag) : nlohmann::json(nullptr)},
                     {"disposition", to_string(o.disposition)}};
}

namespace {

InferenceResult execute(const ModelSpec& spec, const Parameters& params, const Eigen::Ref<const VectorF>& input,
                        FaultEnvironment& env) {
  const std::optional<FaultSpec> fault = env.next_execution(params.size());
  return fault ? faulty_forward(spec, params, input, *fault) : forward(spec, params, input);
}

}  // namespace

RunOutcome run_with_cced(const ModelSpec& spec, const Parameters& params, const Forest& forest,
                         const ThresholdPolicy& policy, const Eigen::Ref<const VectorF>& input, FaultEnvironment& env) {
  RunOutcome out;
  const InferenceResult first = execute(spec, params, input, env);
  out.first_flag = detect(policy, forest, check_features(first));
  if (!out.first_flag) {
    out.final_class = first.predicted_class;
    return out;
  }
  const InferenceResult second = execute(spec, params, input, env);
  out.inferences_used = 2;
  out.second_flag = detect(policy, forest, check_features(second));
  out.final_class = second.predicted_class;
  out.disposition = *out.second_flag ? Disposition::persistent_flag_ignored : Disposition::corrected_by_rerun;
  return out;
}

}  // namespace cced
