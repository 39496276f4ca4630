#include "stage/state.h"

#include <cmath>

#include "stage/errors.h"

namespace stage {

bool SystemState::all_finite() const {
  if (!robot_q.allFinite() || !robot_v.allFinite()) return false;
  for (const auto& p : object_poses)
    if (!p.pos.allFinite() || !p.quat.coeffs().allFinite()) return false;
  for (const auto& v : object_vels)
    if (!v.lin.allFinite() || !v.ang.allFinite()) return false;
  return true;
}

double SystemState::max_abs() const {
  double m = 0.0;
  auto upd = [&m](double x) { m = std::max(m, std::abs(x)); };
  for (int i = 0; i < robot_q.size(); ++i) upd(robot_q[i]);
  for (int i = 0; i < robot_v.size(); ++i) upd(robot_v[i]);
  for (const auto& p : object_poses)
    for (int i = 0; i < 3; ++i) upd(p.pos[i]);
  for (const auto& v : object_vels)
    for (int i = 0; i < 3; ++i) {
      upd(v.lin[i]);
      upd(v.ang[i]);
    }
  return m;
}

void SystemState::zero_velocities() {
  robot_v.setZero();
  for (auto& v : object_vels) {
    v.lin.setZero();
    v.ang.setZero();
  }
}

bool operator==(const SystemState& a, const SystemState& b) {
  if (a.robot_q.size() != b.robot_q.size() || a.object_poses.size() != b.object_poses.size())
    return false;
  if (a.robot_q != b.robot_q || a.robot_v != b.robot_v) return false;
  for (size_t i = 0; i < a.object_poses.size(); ++i) {
    if (a.object_poses[i].pos != b.object_poses[i].pos) return false;
    if (a.object_poses[i].quat.coeffs() != b.object_poses[i].quat.coeffs()) return false;
    if (a.object_vels[i].lin != b.object_vels[i].lin) return false;
    if (a.object_vels[i].ang != b.object_vels[i].ang) return false;
  }
  return true;
}

SystemState default_state(const SceneSpec& scene) {
  SystemState s;
  s.robot_q.resize(scene.robot_dof());
  s.robot_v = Eigen::VectorXd::Zero(scene.robot_dof());
  s.object_poses.resize(scene.objects.size());
  s.object_vels.resize(scene.objects.size());

  // Spread robots and objects along y on the dominant support surface, each
  // resting exactly at contact with zero penetration.
  const HalfSpace& ground = scene.surfaces.front();
  auto rest_on = [&](double radius, double x, double y) {
    // point p = q + n*(offset + radius - n.q) projects q to height radius above plane
    Vec3 p(x, y, 0.0);
    double h = ground.normal.dot(p) - ground.offset;
    return Vec3(p + ground.normal * (radius - h));
  };

  const int nr = static_cast<int>(scene.robots.size());
  for (int i = 0; i < nr; ++i) {
    double y = (nr == 1) ? -0.35 : -0.35 + 0.25 * i;
    Vec3 p = rest_on(scene.robots[i].radius, -0.35, y);
    p = p.cwiseMax(scene.robots[i].pos_lo).cwiseMin(scene.robots[i].pos_hi);
    s.set_robot_pos(i, p);
  }
  const int no = static_cast<int>(scene.objects.size());
  for (int i = 0; i < no; ++i) {
    const ObjectSpec& o = scene.objects[i];
    double r = o.kind == ShapeKind::Sphere ? o.radius : o.half_extents.z();
    double y = -0.2 + 0.22 * i;
    s.object_poses[i].pos = rest_on(r, 0.1, y);
    if (o.kind == ShapeKind::Box && scene.surfaces.front().normal != Vec3(0, 0, 1)) {
      // Align the box bottom face with the (tilted) support plane.
      s.object_poses[i].quat =
          Quat::FromTwoVectors(Vec3(0, 0, 1), scene.surfaces.front().normal).normalized();
    }
  }
  return s;
}

ActionCommand zero_action(const SceneSpec& scene, double duration) {
  ActionCommand a;
  a.robot_target_vel.assign(scene.robots.size(), Vec3::Zero());
  a.duration = duration;
  return a;
}

// --- json ------------------------------------------------------------------

namespace {
json quat_to_json(const Quat& q) { return json::array({q.w(), q.x(), q.y(), q.z()}); }
Quat quat_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ValidationError("expected a quaternion [w,x,y,z]");
  return Quat(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
              j.at(3).get<double>());
}
}  // namespace

void to_json(json& j, const SystemState& s) {
  json poses = json::array();
  json vels = json::array();
  for (const auto& p : s.object_poses)
    poses.push_back(json{{"pos", vec_to_json(p.pos)}, {"quat", quat_to_json(p.quat)}});
  for (const auto& v : s.object_vels)
    vels.push_back(json{{"lin", vec_to_json(v.lin)}, {"ang", vec_to_json(v.ang)}});
  j = json{{"robot_q", std::vector<double>(s.robot_q.data(), s.robot_q.data() + s.robot_q.size())},
           {"robot_v", std::vector<double>(s.robot_v.data(), s.robot_v.data() + s.robot_v.size())},
           {"objects", poses},
           {"object_vels", vels}};
}

void from_json(const json& j, SystemState& s) {
  auto q = j.at("robot_q").get<std::vector<double>>();
  auto v = j.at("robot_v").get<std::vector<double>>();
  if (q.size() != v.size() || q.size() % 3 != 0)
    throw ValidationError("robot_q/robot_v must have matching length divisible by 3");
  s.robot_q = Eigen::Map<const Eigen::VectorXd>(q.data(), static_cast<long>(q.size()));
  s.robot_v = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
  s.object_poses.clear();
  s.object_vels.clear();
  for (const auto& e : j.at("objects")) {
    RigidPose p;
    p.pos = vec_from_json(e.at("pos"));
    p.quat = quat_from_json(e.at("quat"));
    s.object_poses.push_back(p);
  }
  if (j.contains("object_vels")) {
    for (const auto& e : j.at("object_vels")) {
      RigidVel rv;
      rv.lin = vec_from_json(e.at("lin"));
      rv.ang = vec_from_json(e.at("ang"));
      s.object_vels.push_back(rv);
    }
  } else {
    s.object_vels.resize(s.object_poses.size());
  }
  if (s.object_vels.size() != s.object_poses.size())
    throw ValidationError("object_vels must match objects");
  if (!s.all_finite()) throw ValidationError("state contains non-finite values");
}

void to_json(json& j, const ActionCommand& a) {
  json tv = json::array();
  for (const auto& v : a.robot_target_vel) tv.push_back(vec_to_json(v));
  j = json{{"robot_target_vel", tv}, {"duration", a.duration}};
}

void from_json(const json& j, ActionCommand& a) {
  a.robot_target_vel.clear();
  for (const auto& e : j.at("robot_target_vel")) a.robot_target_vel.push_back(vec_from_json(e));
  a.duration = j.value("duration", 0.25);
  if (!(a.duration > 0.0)) throw ValidationError("action duration must be positive");
}

}  // namespace stage
