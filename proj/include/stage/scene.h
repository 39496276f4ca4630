#pragma once

#include <string>
#include <vector>

#include "stage/json.h"

#include "stage/geometry.h"

namespace stage {

// Half-space n.x >= offset is free space; the boundary plane n.x == offset is
// the contact surface.
struct HalfSpace {
  Vec3 normal{0, 0, 1};
  double offset = 0.0;
  std::string name;
};

struct RobotSpec {
  double radius = 0.05;
  Vec3 pos_lo{-1, -1, 0};
  Vec3 pos_hi{1, 1, 1};
  double max_speed = 1.0;
};

enum class ShapeKind { Sphere, Box };

struct ObjectSpec {
  ShapeKind kind = ShapeKind::Sphere;
  double radius = 0.1;            // sphere
  Vec3 half_extents{0.05, 0.05, 0.05};  // box
  double mass = 1.0;
};

struct SceneSpec {
  std::string name;
  std::vector<HalfSpace> surfaces;
  std::vector<RobotSpec> robots;
  std::vector<ObjectSpec> objects;
  double friction_mu = 0.5;
  double gravity = 9.81;          // magnitude, acting along -z
  double dt = 0.01;
  double contact_stiffness = 1e4;  // N/m
  double contact_damping = 50.0;   // N*s/m
  // Sampling volume for object poses and uniform targets.
  Vec3 workspace_lo{-1, -1, 0};
  Vec3 workspace_hi{1, 1, 1};

  Vec3 gravity_vec() const { return Vec3(0, 0, -gravity); }
  int robot_dof() const { return 3 * int(robots.size()); }

  // Throws ValidationError on malformed geometry or unsupported shapes.
  void validate() const;
};

// A scene entity that can take part in a contact: a static surface, a robot
// sphere, or a free object.
struct FrameRef {
  enum Kind { Surface, Robot, Object };
  Kind kind = Surface;
  int index = 0;

  friend bool operator==(const FrameRef& a, const FrameRef& b) {
    return a.kind == b.kind && a.index == b.index;
  }
  friend bool operator<(const FrameRef& a, const FrameRef& b) {
    return a.kind != b.kind ? a.kind < b.kind : a.index < b.index;
  }
};

std::string frame_name(const FrameRef& f, const SceneSpec& scene);

// Built-in named scenes; throws ValidationError for unknown names.
SceneSpec builtin_scene(const std::string& name);
bool is_builtin_scene(const std::string& name);

void to_json(json& j, const SceneSpec& s);
void from_json(const json& j, SceneSpec& s);
void to_json(json& j, const FrameRef& f);
void from_json(const json& j, FrameRef& f);

}  // namespace stage
