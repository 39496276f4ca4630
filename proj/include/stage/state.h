#pragma once

#include <vector>

#include "stage/json.h"

#include "stage/scene.h"

namespace stage {

struct RigidPose {
  Vec3 pos{0, 0, 0};
  Quat quat{1, 0, 0, 0};
};

struct RigidVel {
  Vec3 lin{0, 0, 0};
  Vec3 ang{0, 0, 0};
};

// Full configuration + velocity of all robots and free objects.
struct SystemState {
  Eigen::VectorXd robot_q;  // 3 per robot
  Eigen::VectorXd robot_v;
  std::vector<RigidPose> object_poses;
  std::vector<RigidVel> object_vels;

  Vec3 robot_pos(int i) const { return robot_q.segment<3>(3 * i); }
  Vec3 robot_vel(int i) const { return robot_v.segment<3>(3 * i); }
  void set_robot_pos(int i, const Vec3& p) { robot_q.segment<3>(3 * i) = p; }
  void set_robot_vel(int i, const Vec3& v) { robot_v.segment<3>(3 * i) = v; }

  bool all_finite() const;
  double max_abs() const;
  void zero_velocities();

  friend bool operator==(const SystemState& a, const SystemState& b);
};

// Commanded robot velocities held for `duration` seconds (an integer number
// of scene.dt substeps).
struct ActionCommand {
  std::vector<Vec3> robot_target_vel;
  double duration = 0.25;
};

struct ContactPair {
  FrameRef body_a;
  FrameRef body_b;
  Vec3 point{0, 0, 0};
  Vec3 normal{0, 0, 1};  // pushes body_a away from body_b
  double penetration = 0.0;
  Vec3 force{0, 0, 0};  // on body_a
};

struct ContactReport {
  std::vector<ContactPair> pairs;
};

// State with all robots at rest in the middle of their limits and all objects
// resting at the workspace center; a convenient template for tests and
// samplers to edit.
SystemState default_state(const SceneSpec& scene);

ActionCommand zero_action(const SceneSpec& scene, double duration);

void to_json(json& j, const SystemState& s);
void from_json(const json& j, SystemState& s);
void to_json(json& j, const ActionCommand& a);
void from_json(const json& j, ActionCommand& a);

}  // namespace stage
