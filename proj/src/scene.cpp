#include "stage/scene.h"

#include <cmath>

#include "stage/errors.h"

namespace stage {

namespace {

// Numbers chosen so the penalty layer stays stable at dt=0.01: with
// stiffness 1e4, a 1 kg ball has sqrt(k/m)*dt = 1.0 and a 2 kg box resting
// on four corners has sqrt(4k/m)*dt ~ 1.4, both comfortably inside the
// semi-implicit stability region with damping 50.
constexpr double kBallMass = 1.0;
constexpr double kBoxMass = 2.0;
constexpr double kRampAngle = 15.0 * M_PI / 180.0;

SceneSpec make_spheres_ramp() {
  SceneSpec s;
  s.name = "spheres_ramp";
  // Tilted plane through the origin, free side above.
  s.surfaces.push_back({Vec3(-std::sin(kRampAngle), 0.0, std::cos(kRampAngle)), 0.0, "ramp"});
  s.surfaces.push_back({Vec3(0.0, 1.0, 0.0), -0.6, "wall_neg_y"});
  s.surfaces.push_back({Vec3(0.0, -1.0, 0.0), -0.6, "wall_pos_y"});

  RobotSpec r;
  r.radius = 0.08;
  r.pos_lo = Vec3(-0.9, -0.55, 0.0);
  r.pos_hi = Vec3(0.9, 0.55, 0.9);
  r.max_speed = 1.0;
  s.robots.push_back(r);

  ObjectSpec ball;
  ball.kind = ShapeKind::Sphere;
  ball.radius = 0.1;
  ball.mass = kBallMass;
  s.objects.push_back(ball);

  s.workspace_lo = Vec3(-1.0, -0.6, -0.3);
  s.workspace_hi = Vec3(1.0, 0.6, 1.0);
  return s;
}

SceneSpec make_spheres_cube() {
  SceneSpec s;
  s.name = "spheres_cube";
  s.surfaces.push_back({Vec3(0.0, 0.0, 1.0), 0.0, "floor"});
  s.surfaces.push_back({Vec3(1.0, 0.0, 0.0), -0.55, "wall_neg_x"});
  s.surfaces.push_back({Vec3(-1.0, 0.0, 0.0), -0.55, "wall_pos_x"});

  RobotSpec r;
  r.radius = 0.06;
  r.pos_lo = Vec3(-0.5, -0.5, 0.0);
  r.pos_hi = Vec3(0.5, 0.5, 0.8);
  r.max_speed = 1.0;
  s.robots.push_back(r);
  s.robots.push_back(r);

  ObjectSpec cube;
  cube.kind = ShapeKind::Box;
  cube.half_extents = Vec3(0.06, 0.06, 0.06);
  cube.mass = kBoxMass;
  s.objects.push_back(cube);

  s.workspace_lo = Vec3(-0.6, -0.6, -0.1);
  s.workspace_hi = Vec3(0.6, 0.6, 0.9);
  return s;
}

}  // namespace

void SceneSpec::validate() const {
  auto fail = [&](const std::string& what) { throw ValidationError("scene '" + name + "': " + what); };
  if (surfaces.empty()) fail("needs at least one support surface");
  if (robots.empty()) fail("needs at least one robot");
  if (objects.empty()) fail("needs at least one object");
  int boxes = 0;
  for (const auto& h : surfaces) {
    if (std::abs(h.normal.norm() - 1.0) > 1e-9) fail("surface normal must be unit length");
    if (!h.normal.allFinite() || !std::isfinite(h.offset)) fail("non-finite surface");
  }
  for (const auto& r : robots) {
    if (!(r.radius > 0.0)) fail("robot radius must be positive");
    if (!(r.max_speed > 0.0)) fail("robot max_speed must be positive");
    if (((r.pos_hi - r.pos_lo).array() <= 0.0).any()) fail("robot bounds must have positive extent");
  }
  for (const auto& o : objects) {
    if (!(o.mass > 0.0)) fail("object mass must be positive");
    if (o.kind == ShapeKind::Sphere) {
      if (!(o.radius > 0.0)) fail("sphere radius must be positive");
    } else {
      ++boxes;
      if ((o.half_extents.array() <= 0.0).any()) fail("box half extents must be positive");
    }
  }
  if (boxes > 1) fail("at most one box object is supported");
  if (((workspace_hi - workspace_lo).array() <= 0.0).any()) fail("workspace must have positive extent");
  if (!(friction_mu >= 0.0)) fail("friction coefficient must be non-negative");
  if (!(dt > 0.0) || !(gravity > 0.0) || !(contact_stiffness > 0.0) || !(contact_damping >= 0.0))
    fail("dt, gravity and contact parameters must be positive");
}

std::string frame_name(const FrameRef& f, const SceneSpec& scene) {
  switch (f.kind) {
    case FrameRef::Kind::Surface:
      return scene.surfaces.at(static_cast<size_t>(f.index)).name;
    case FrameRef::Kind::Robot:
      return "robot" + std::to_string(f.index);
    case FrameRef::Kind::Object:
      return "object" + std::to_string(f.index);
  }
  return "?";
}

bool is_builtin_scene(const std::string& name) {
  return name == "spheres_ramp" || name == "spheres_cube";
}

SceneSpec builtin_scene(const std::string& name) {
  if (name == "spheres_ramp") return make_spheres_ramp();
  if (name == "spheres_cube") return make_spheres_cube();
  throw ValidationError("unknown scene '" + name + "' (expected spheres_ramp or spheres_cube)");
}

// --- json ------------------------------------------------------------------


void to_json(json& j, const HalfSpace& h) {
  j = json{{"normal", vec_to_json(h.normal)}, {"offset", h.offset}, {"name", h.name}};
}

void from_json(const json& j, HalfSpace& h) {
  h.normal = vec_from_json(j.at("normal"));
  h.offset = j.at("offset").get<double>();
  h.name = j.value("name", std::string("surface"));
}

void to_json(json& j, const RobotSpec& r) {
  j = json{{"radius", r.radius},
           {"pos_lo", vec_to_json(r.pos_lo)},
           {"pos_hi", vec_to_json(r.pos_hi)},
           {"max_speed", r.max_speed}};
}

void from_json(const json& j, RobotSpec& r) {
  r.radius = j.at("radius").get<double>();
  r.pos_lo = vec_from_json(j.at("pos_lo"));
  r.pos_hi = vec_from_json(j.at("pos_hi"));
  r.max_speed = j.at("max_speed").get<double>();
}

void to_json(json& j, const ObjectSpec& o) {
  if (o.kind == ShapeKind::Sphere) {
    j = json{{"kind", "sphere"}, {"radius", o.radius}, {"mass", o.mass}};
  } else {
    j = json{{"kind", "box"}, {"half_extents", vec_to_json(o.half_extents)}, {"mass", o.mass}};
  }
}

void from_json(const json& j, ObjectSpec& o) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "sphere") {
    o.kind = ShapeKind::Sphere;
    o.radius = j.at("radius").get<double>();
  } else if (kind == "box") {
    o.kind = ShapeKind::Box;
    o.half_extents = vec_from_json(j.at("half_extents"));
  } else {
    throw ValidationError("unknown object kind '" + kind + "'");
  }
  o.mass = j.at("mass").get<double>();
}

void to_json(json& j, const SceneSpec& s) {
  j = json{{"name", s.name},
           {"surfaces", s.surfaces},
           {"robots", s.robots},
           {"objects", s.objects},
           {"friction_mu", s.friction_mu},
           {"gravity", s.gravity},
           {"dt", s.dt},
           {"contact_stiffness", s.contact_stiffness},
           {"contact_damping", s.contact_damping},
           {"workspace_lo", vec_to_json(s.workspace_lo)},
           {"workspace_hi", vec_to_json(s.workspace_hi)}};
}

void from_json(const json& j, SceneSpec& s) {
  s.name = j.value("name", std::string("scene"));
  s.surfaces = j.at("surfaces").get<std::vector<HalfSpace>>();
  s.robots = j.at("robots").get<std::vector<RobotSpec>>();
  s.objects = j.at("objects").get<std::vector<ObjectSpec>>();
  s.friction_mu = j.value("friction_mu", 0.5);
  s.gravity = j.value("gravity", 9.81);
  s.dt = j.value("dt", 0.01);
  s.contact_stiffness = j.value("contact_stiffness", 1e4);
  s.contact_damping = j.value("contact_damping", 50.0);
  s.workspace_lo = vec_from_json(j.at("workspace_lo"));
  s.workspace_hi = vec_from_json(j.at("workspace_hi"));
  s.validate();
}

void to_json(json& j, const FrameRef& f) {
  const char* kind = f.kind == FrameRef::Kind::Surface  ? "surface"
                     : f.kind == FrameRef::Kind::Robot ? "robot"
                                                        : "object";
  j = json{{"kind", kind}, {"index", f.index}};
}

void from_json(const json& j, FrameRef& f) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "surface")
    f.kind = FrameRef::Kind::Surface;
  else if (kind == "robot")
    f.kind = FrameRef::Kind::Robot;
  else if (kind == "object")
    f.kind = FrameRef::Kind::Object;
  else
    throw ValidationError("unknown frame kind '" + kind + "'");
  f.index = j.at("index").get<int>();
}

}  // namespace stage
