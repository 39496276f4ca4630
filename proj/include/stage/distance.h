#pragma once

#include "stage/state.h"

namespace stage {

// Relative weights of the task-space error terms. Object pose error dominates
// so that trajectories count as different when the objects end up elsewhere,
// not merely when the robots took another route. The velocity weight must sit
// well below the positional signal: a rolling sphere carries omega = v/r, so
// its squared angular rate is ~(1/r^2)·v^2 and anything heavier than ~0.01
// drowns out genuine positional progress toward rest-state targets.
struct StateWeights {
  double object = 10.0;
  double robot = 1.0;
  double velocity = 0.01;
};

// Squared weighted distance:
//   object * sum_i (|dp_i|^2 + ang(q_i, q'_i)^2)
// + robot  * |dq|^2
// + velocity * (|dv_rob|^2 + sum_i |dv_i|^2 + |dw_i|^2)
// Throws DimensionMismatch when the states describe different systems. The
// square root of this value is a proper metric and is what thresholds
// (epsilon, d_min) are expressed in.
double weighted_squared_distance(const SystemState& a, const SystemState& b,
                                 const StateWeights& w);

double weighted_distance(const SystemState& a, const SystemState& b, const StateWeights& w);

}  // namespace stage
