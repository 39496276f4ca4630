#include "stage/distance.h"

#include <cmath>

#include "stage/errors.h"
#include "stage/geometry.h"

namespace stage {

double weighted_squared_distance(const SystemState& a, const SystemState& b,
                                 const StateWeights& w) {
  if (a.robot_q.size() != b.robot_q.size() || a.object_poses.size() != b.object_poses.size())
    throw DimensionMismatch("states describe different systems");

  double obj = 0.0;
  for (size_t i = 0; i < a.object_poses.size(); ++i) {
    obj += (a.object_poses[i].pos - b.object_poses[i].pos).squaredNorm();
    double ang = quat_angle(a.object_poses[i].quat, b.object_poses[i].quat);
    obj += ang * ang;
  }
  double rob = (a.robot_q - b.robot_q).squaredNorm();
  double vel = (a.robot_v - b.robot_v).squaredNorm();
  for (size_t i = 0; i < a.object_vels.size(); ++i) {
    vel += (a.object_vels[i].lin - b.object_vels[i].lin).squaredNorm();
    vel += (a.object_vels[i].ang - b.object_vels[i].ang).squaredNorm();
  }
  return w.object * obj + w.robot * rob + w.velocity * vel;
}

double weighted_distance(const SystemState& a, const SystemState& b, const StateWeights& w) {
  return std::sqrt(weighted_squared_distance(a, b, w));
}

}  // namespace stage
