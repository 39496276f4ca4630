#pragma once

#include <optional>
#include <vector>

#include "stage/state.h"

namespace stage {

// Any state entry beyond this magnitude counts as a penalty blow-up; the
// caller discards the result.
constexpr double kDivergenceGuard = 1e6;

struct StepOutcome {
  SystemState state;
  bool diverged = false;
  // substeps actually executed (for budget accounting)
  long steps = 0;
};

struct RolloutOutcome {
  std::vector<SystemState> states;  // end state after each action
  bool diverged = false;
  int failed_action = -1;
  long steps = 0;
};

// Advances the state by action.duration seconds of semi-implicit Euler with
// penalty contacts and regularized Coulomb friction. Pure: identical inputs
// give bit-identical outputs. Throws ValidationError on non-finite input or
// mismatched dimensions.
StepOutcome step(const SystemState& state, const ActionCommand& action,
                 const SceneSpec& scene);

// Folds step over the sequence, recording the state after each action.
RolloutOutcome rollout(const SystemState& state, const std::vector<ActionCommand>& actions,
                       const SceneSpec& scene);

// Minimum signed distance over all robot-object, object-object and
// object-surface pairs. Negative means penetration.
double min_separation(const SystemState& state, const SceneSpec& scene);
double pair_separation(const SystemState& state, const SceneSpec& scene,
                       const FrameRef& a, const FrameRef& b);

// Penetrating pairs with the forces the integrator would apply right now.
ContactReport contacts(const SystemState& state, const SceneSpec& scene);

// All contactable pairs of a scene: (object, surface), (object, robot) and
// (object, object), object frame first, in deterministic order.
std::vector<std::pair<FrameRef, FrameRef>> contact_pairs(const SceneSpec& scene);

// --- batch kernels -------------------------------------------------------
// One step per candidate action from a shared start state. The parallel
// version writes independent slots and must match the serial reference
// bit-for-bit at any worker count.

std::vector<StepOutcome> evaluate_actions_serial(const SystemState& state,
                                                 const std::vector<ActionCommand>& candidates,
                                                 const SceneSpec& scene);
std::vector<StepOutcome> evaluate_actions_parallel(const SystemState& state,
                                                   const std::vector<ActionCommand>& candidates,
                                                   const SceneSpec& scene);

struct ExecPolicy {
  bool parallel = true;
};

std::vector<StepOutcome> evaluate_actions(const SystemState& state,
                                          const std::vector<ActionCommand>& candidates,
                                          const SceneSpec& scene, ExecPolicy exec = {});

// One rollout per candidate plan from a shared start state, same contract as
// evaluate_actions: independent slots, parallel matches serial bit-for-bit.
std::vector<RolloutOutcome> evaluate_plans_serial(
    const SystemState& state, const std::vector<std::vector<ActionCommand>>& plans,
    const SceneSpec& scene);
std::vector<RolloutOutcome> evaluate_plans_parallel(
    const SystemState& state, const std::vector<std::vector<ActionCommand>>& plans,
    const SceneSpec& scene);
std::vector<RolloutOutcome> evaluate_plans(const SystemState& state,
                                           const std::vector<std::vector<ActionCommand>>& plans,
                                           const SceneSpec& scene, ExecPolicy exec = {});

}  // namespace stage
