#include "stage/sim.h"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "stage/errors.h"
#include "stage/geometry.h"

namespace stage {

namespace {

// One geometric contact feature between frames a and b. normal points from b
// into a (the direction a is pushed); separation < 0 means penetration.
struct ContactGeom {
  Vec3 normal;
  double separation;
  Vec3 point;
  // Multi-feature contacts split the configured stiffness so a flat box face
  // resting on four corners sums to contact_stiffness, keeping every contact
  // mode inside the integrator's stable band.
  double stiffness_scale = 1.0;
};

ContactGeom sphere_halfspace(const Vec3& c, double r, const HalfSpace& h) {
  ContactGeom g;
  g.normal = h.normal;
  g.separation = h.normal.dot(c) - h.offset - r;
  g.point = c - h.normal * r;
  return g;
}

ContactGeom sphere_sphere(const Vec3& ca, double ra, const Vec3& cb, double rb) {
  ContactGeom g;
  Vec3 d = ca - cb;
  double dist = d.norm();
  g.normal = dist > 1e-12 ? Vec3(d / dist) : Vec3(0, 0, 1);
  g.separation = dist - ra - rb;
  g.point = 0.5 * (ca - g.normal * ra + cb + g.normal * rb);
  return g;
}

// Sphere against an oriented box; handles the center-inside-box case by
// pushing out through the nearest face.
ContactGeom sphere_box(const Vec3& c, double r, const RigidPose& box, const Vec3& he) {
  ContactGeom g;
  Vec3 local = quat_rotate_inv(box.quat, Vec3(c - box.pos));
  Vec3 clamped = local.cwiseMax(-he).cwiseMin(he);
  if ((local - clamped).squaredNorm() > 1e-24) {
    Vec3 delta = local - clamped;
    double dist = delta.norm();
    Vec3 n_local = delta / dist;
    g.normal = quat_rotate(box.quat, n_local);
    g.separation = dist - r;
    g.point = box.pos + quat_rotate(box.quat, clamped);
  } else {
    int axis = 0;
    double best = he[0] - std::abs(local[0]);
    for (int i = 1; i < 3; ++i) {
      double di = he[i] - std::abs(local[i]);
      if (di < best) {
        best = di;
        axis = i;
      }
    }
    Vec3 n_local = Vec3::Zero();
    n_local[axis] = local[axis] >= 0.0 ? 1.0 : -1.0;
    g.normal = quat_rotate(box.quat, n_local);
    g.separation = -(best + r);
    Vec3 face = local;
    face[axis] = n_local[axis] * he[axis];
    g.point = box.pos + quat_rotate(box.quat, face);
  }
  return g;
}

Vec3 box_corner(const Vec3& he, int i) {
  return Vec3((i & 1) ? he.x() : -he.x(), (i & 2) ? he.y() : -he.y(),
              (i & 4) ? he.z() : -he.z());
}

// Up to eight per-corner features so the box can topple and settle flat.
void box_halfspace(const RigidPose& box, const Vec3& he, const HalfSpace& h,
                   std::vector<ContactGeom>& out) {
  for (int i = 0; i < 8; ++i) {
    Vec3 corner = box.pos + quat_rotate(box.quat, box_corner(he, i));
    ContactGeom g;
    g.normal = h.normal;
    g.separation = h.normal.dot(corner) - h.offset;
    g.point = corner;
    g.stiffness_scale = 0.25;
    out.push_back(g);
  }
}

void pair_geoms(const SystemState& s, const SceneSpec& scene, const FrameRef& a,
                const FrameRef& b, std::vector<ContactGeom>& out) {
  out.clear();
  auto sphere_of = [&](const FrameRef& f, Vec3& c, double& r) {
    if (f.kind == FrameRef::Kind::Robot) {
      c = s.robot_pos(f.index);
      r = scene.robots[static_cast<size_t>(f.index)].radius;
      return true;
    }
    const ObjectSpec& o = scene.objects[static_cast<size_t>(f.index)];
    if (o.kind != ShapeKind::Sphere) return false;
    c = s.object_poses[static_cast<size_t>(f.index)].pos;
    r = o.radius;
    return true;
  };
  auto box_of = [&](const FrameRef& f, RigidPose& p, Vec3& he) {
    if (f.kind != FrameRef::Kind::Object) return false;
    const ObjectSpec& o = scene.objects[static_cast<size_t>(f.index)];
    if (o.kind != ShapeKind::Box) return false;
    p = s.object_poses[static_cast<size_t>(f.index)];
    he = o.half_extents;
    return true;
  };

  Vec3 ca, cb, he;
  double ra, rb;
  RigidPose box;
  if (b.kind == FrameRef::Kind::Surface) {
    const HalfSpace& h = scene.surfaces[static_cast<size_t>(b.index)];
    if (sphere_of(a, ca, ra)) {
      out.push_back(sphere_halfspace(ca, ra, h));
    } else if (box_of(a, box, he)) {
      box_halfspace(box, he, h, out);
    }
    return;
  }
  if (sphere_of(a, ca, ra) && sphere_of(b, cb, rb)) {
    out.push_back(sphere_sphere(ca, ra, cb, rb));
  } else if (sphere_of(a, ca, ra) && box_of(b, box, he)) {
    ContactGeom g = sphere_box(ca, ra, box, he);
    out.push_back(g);
  } else if (box_of(a, box, he) && sphere_of(b, cb, rb)) {
    ContactGeom g = sphere_box(cb, rb, box, he);
    g.normal = -g.normal;  // now pushes the box (frame a) away from the sphere
    out.push_back(g);
  }
}

Vec3 point_velocity(const SystemState& s, const FrameRef& f, const Vec3& p) {
  switch (f.kind) {
    case FrameRef::Kind::Surface:
      return Vec3::Zero();
    case FrameRef::Kind::Robot:
      return s.robot_vel(f.index);
    case FrameRef::Kind::Object: {
      const auto& pose = s.object_poses[static_cast<size_t>(f.index)];
      const auto& vel = s.object_vels[static_cast<size_t>(f.index)];
      return vel.lin + vel.ang.cross(p - pose.pos);
    }
  }
  return Vec3::Zero();
}

// Tangential stick spring: integrated slip displacement per contact feature,
// live only within one step() call. The tangential effective mass of a
// rolling sphere is m/3.5, so both constants run at a quarter of their
// normal-direction counterparts to stay inside the integrator's stable band.
constexpr double kTangentialStiffnessRatio = 0.25;
constexpr double kTangentialDampingRatio = 0.25;

struct FrictionState {
  Vec3 stretch{0, 0, 0};
  bool active = false;
};

// Spring-damper normal force plus stick-spring Coulomb friction clamped at
// mu*fn, evaluated at the contact point so spinning and rolling couple
// correctly. `mem` carries the accumulated slip of this feature between
// substeps; pass nullptr for the stateless first-touch force.
Vec3 contact_force(const SystemState& s, const SceneSpec& scene, const FrameRef& a,
                   const FrameRef& b, const ContactGeom& g, FrictionState* mem) {
  double pen = -g.separation;
  Vec3 v_rel = point_velocity(s, a, g.point) - point_velocity(s, b, g.point);
  double approach = -v_rel.dot(g.normal);
  const double kn = g.stiffness_scale * scene.contact_stiffness;
  const double cn = g.stiffness_scale * scene.contact_damping;
  double fn = kn * pen + cn * approach;
  if (fn < 0.0) fn = 0.0;
  Vec3 vt = v_rel - v_rel.dot(g.normal) * g.normal;

  const double kt = kTangentialStiffnessRatio * kn;
  Vec3 stretch = Vec3::Zero();
  if (mem && mem->active) stretch = mem->stretch - mem->stretch.dot(g.normal) * g.normal;
  stretch += vt * scene.dt;
  Vec3 ft = -kt * stretch - kTangentialDampingRatio * cn * vt;
  const double limit = scene.friction_mu * fn;
  if (ft.norm() > limit) {
    ft *= limit / ft.norm();
    stretch = -ft / kt;  // anchor slides so the spring sits at the cone edge
  }
  if (mem) {
    mem->stretch = stretch;
    mem->active = true;
  }
  return fn * g.normal + ft;
}

Vec3 inertia_diag(const ObjectSpec& o) {
  if (o.kind == ShapeKind::Sphere) {
    double i = 0.4 * o.mass * o.radius * o.radius;
    return Vec3(i, i, i);
  }
  const Vec3& h = o.half_extents;
  return Vec3(o.mass / 3.0 * (h.y() * h.y() + h.z() * h.z()),
              o.mass / 3.0 * (h.x() * h.x() + h.z() * h.z()),
              o.mass / 3.0 * (h.x() * h.x() + h.y() * h.y()));
}

void check_input(const SystemState& state, const ActionCommand& action, const SceneSpec& scene) {
  if (state.robot_q.size() != scene.robot_dof() || state.robot_v.size() != scene.robot_dof())
    throw ValidationError("state robot dimension does not match scene");
  if (state.object_poses.size() != scene.objects.size() ||
      state.object_vels.size() != scene.objects.size())
    throw ValidationError("state object count does not match scene");
  if (!state.all_finite()) throw ValidationError("non-finite state");
  if (action.robot_target_vel.size() != scene.robots.size())
    throw ValidationError("action robot count does not match scene");
  for (const auto& v : action.robot_target_vel)
    if (!v.allFinite()) throw ValidationError("non-finite action");
  if (!(action.duration > 0.0)) throw ValidationError("action duration must be positive");
}

}  // namespace

std::vector<std::pair<FrameRef, FrameRef>> contact_pairs(const SceneSpec& scene) {
  std::vector<std::pair<FrameRef, FrameRef>> pairs;
  const int no = static_cast<int>(scene.objects.size());
  const int nr = static_cast<int>(scene.robots.size());
  const int ns = static_cast<int>(scene.surfaces.size());
  for (int i = 0; i < no; ++i)
    for (int j = 0; j < ns; ++j)
      pairs.push_back({{FrameRef::Kind::Object, i}, {FrameRef::Kind::Surface, j}});
  for (int i = 0; i < no; ++i)
    for (int r = 0; r < nr; ++r)
      pairs.push_back({{FrameRef::Kind::Object, i}, {FrameRef::Kind::Robot, r}});
  for (int i = 0; i < no; ++i)
    for (int j = i + 1; j < no; ++j)
      pairs.push_back({{FrameRef::Kind::Object, i}, {FrameRef::Kind::Object, j}});
  return pairs;
}

double pair_separation(const SystemState& state, const SceneSpec& scene, const FrameRef& a,
                       const FrameRef& b) {
  std::vector<ContactGeom> geoms;
  pair_geoms(state, scene, a, b, geoms);
  if (geoms.empty()) {
    // Only robot-robot and robot-surface remain; both are sphere queries.
    if (a.kind == FrameRef::Kind::Robot && b.kind == FrameRef::Kind::Surface) {
      return sphere_halfspace(state.robot_pos(a.index),
                              scene.robots[static_cast<size_t>(a.index)].radius,
                              scene.surfaces[static_cast<size_t>(b.index)])
          .separation;
    }
    if (a.kind == FrameRef::Kind::Robot && b.kind == FrameRef::Kind::Robot) {
      return sphere_sphere(state.robot_pos(a.index),
                           scene.robots[static_cast<size_t>(a.index)].radius,
                           state.robot_pos(b.index),
                           scene.robots[static_cast<size_t>(b.index)].radius)
          .separation;
    }
    throw ValidationError("unsupported frame pair");
  }
  double m = geoms.front().separation;
  for (const auto& g : geoms) m = std::min(m, g.separation);
  return m;
}

double min_separation(const SystemState& state, const SceneSpec& scene) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& [a, b] : contact_pairs(scene)) m = std::min(m, pair_separation(state, scene, a, b));
  return m;
}

ContactReport contacts(const SystemState& state, const SceneSpec& scene) {
  ContactReport rep;
  std::vector<ContactGeom> geoms;
  for (const auto& [a, b] : contact_pairs(scene)) {
    pair_geoms(state, scene, a, b, geoms);
    for (const auto& g : geoms) {
      if (g.separation >= 0.0) continue;
      ContactPair cp;
      cp.body_a = a;
      cp.body_b = b;
      cp.point = g.point;
      cp.normal = g.normal;
      cp.penetration = -g.separation;
      cp.force = contact_force(state, scene, a, b, g, nullptr);
      rep.pairs.push_back(cp);
    }
  }
  return rep;
}

StepOutcome step(const SystemState& state, const ActionCommand& action, const SceneSpec& scene) {
  check_input(state, action, scene);
  const double dt = scene.dt;
  const long n_sub = std::max<long>(1, std::lround(action.duration / dt));
  const int no = static_cast<int>(scene.objects.size());
  const int nr = static_cast<int>(scene.robots.size());
  const auto pairs = contact_pairs(scene);

  StepOutcome out;
  out.state = state;
  SystemState& s = out.state;

  std::vector<Vec3> force(static_cast<size_t>(no)), torque(static_cast<size_t>(no));
  std::vector<Vec3> robot_next(static_cast<size_t>(nr));
  std::vector<ContactGeom> geoms;
  // slip memory per (pair, feature); a box-halfspace pair has 8 corner features
  std::vector<std::array<FrictionState, 8>> friction(pairs.size());

  for (long sub = 0; sub < n_sub; ++sub) {
    // Robots are kinematic: clamp command to the speed limit, advance inside
    // position bounds, and expose the effective velocity to the contacts.
    for (int r = 0; r < nr; ++r) {
      const RobotSpec& spec = scene.robots[static_cast<size_t>(r)];
      Vec3 v_cmd = clamp_norm(action.robot_target_vel[static_cast<size_t>(r)], spec.max_speed);
      Vec3 q_new =
          (s.robot_pos(r) + dt * v_cmd).cwiseMax(spec.pos_lo).cwiseMin(spec.pos_hi);
      s.set_robot_vel(r, (q_new - s.robot_pos(r)) / dt);
      robot_next[static_cast<size_t>(r)] = q_new;
    }

    for (int i = 0; i < no; ++i) {
      force[static_cast<size_t>(i)] = scene.objects[static_cast<size_t>(i)].mass * scene.gravity_vec();
      torque[static_cast<size_t>(i)].setZero();
    }
    for (size_t pi = 0; pi < pairs.size(); ++pi) {
      const auto& [a, b] = pairs[pi];
      pair_geoms(s, scene, a, b, geoms);
      for (size_t gi = 0; gi < geoms.size(); ++gi) {
        const ContactGeom& g = geoms[gi];
        if (g.separation >= 0.0) {
          friction[pi][gi] = FrictionState{};
          continue;
        }
        Vec3 f = contact_force(s, scene, a, b, g, &friction[pi][gi]);
        force[static_cast<size_t>(a.index)] += f;
        torque[static_cast<size_t>(a.index)] +=
            (g.point - s.object_poses[static_cast<size_t>(a.index)].pos).cross(f);
        if (b.kind == FrameRef::Kind::Object) {
          force[static_cast<size_t>(b.index)] -= f;
          torque[static_cast<size_t>(b.index)] -=
              (g.point - s.object_poses[static_cast<size_t>(b.index)].pos).cross(f);
        }
      }
    }

    for (int i = 0; i < no; ++i) {
      const ObjectSpec& o = scene.objects[static_cast<size_t>(i)];
      auto& pose = s.object_poses[static_cast<size_t>(i)];
      auto& vel = s.object_vels[static_cast<size_t>(i)];
      vel.lin += dt / o.mass * force[static_cast<size_t>(i)];
      Vec3 idiag = inertia_diag(o);
      Vec3 tau_local = quat_rotate_inv(pose.quat, torque[static_cast<size_t>(i)]);
      Vec3 domega_local(tau_local.x() / idiag.x(), tau_local.y() / idiag.y(),
                        tau_local.z() / idiag.z());
      vel.ang += dt * quat_rotate(pose.quat, domega_local);
      pose.pos += dt * vel.lin;
      // sphere orientation is unobservable and pinned to identity
      if (o.kind == ShapeKind::Box) pose.quat = quat_integrate(pose.quat, vel.ang, dt);
    }
    for (int r = 0; r < nr; ++r) s.set_robot_pos(r, robot_next[static_cast<size_t>(r)]);

    out.steps = sub + 1;
    if (!s.all_finite() || s.max_abs() > kDivergenceGuard) {
      out.diverged = true;
      return out;
    }
  }
  return out;
}

RolloutOutcome rollout(const SystemState& state, const std::vector<ActionCommand>& actions,
                       const SceneSpec& scene) {
  RolloutOutcome out;
  SystemState cur = state;
  for (size_t k = 0; k < actions.size(); ++k) {
    StepOutcome so = step(cur, actions[k], scene);
    out.steps += so.steps;
    if (so.diverged) {
      out.diverged = true;
      out.failed_action = static_cast<int>(k);
      return out;
    }
    cur = so.state;
    out.states.push_back(cur);
  }
  return out;
}

std::vector<StepOutcome> evaluate_actions_serial(const SystemState& state,
                                                 const std::vector<ActionCommand>& candidates,
                                                 const SceneSpec& scene) {
  std::vector<StepOutcome> out(candidates.size());
  for (size_t i = 0; i < candidates.size(); ++i) out[i] = step(state, candidates[i], scene);
  return out;
}

std::vector<StepOutcome> evaluate_actions_parallel(const SystemState& state,
                                                   const std::vector<ActionCommand>& candidates,
                                                   const SceneSpec& scene) {
  std::vector<StepOutcome> out(candidates.size());
  const long n = static_cast<long>(candidates.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (long i = 0; i < n; ++i)
    out[static_cast<size_t>(i)] = step(state, candidates[static_cast<size_t>(i)], scene);
  return out;
}

std::vector<StepOutcome> evaluate_actions(const SystemState& state,
                                          const std::vector<ActionCommand>& candidates,
                                          const SceneSpec& scene, ExecPolicy exec) {
  return exec.parallel ? evaluate_actions_parallel(state, candidates, scene)
                       : evaluate_actions_serial(state, candidates, scene);
}

std::vector<RolloutOutcome> evaluate_plans_serial(
    const SystemState& state, const std::vector<std::vector<ActionCommand>>& plans,
    const SceneSpec& scene) {
  std::vector<RolloutOutcome> out(plans.size());
  for (size_t i = 0; i < plans.size(); ++i) out[i] = rollout(state, plans[i], scene);
  return out;
}

std::vector<RolloutOutcome> evaluate_plans_parallel(
    const SystemState& state, const std::vector<std::vector<ActionCommand>>& plans,
    const SceneSpec& scene) {
  std::vector<RolloutOutcome> out(plans.size());
  const long n = static_cast<long>(plans.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (long i = 0; i < n; ++i)
    out[static_cast<size_t>(i)] = rollout(state, plans[static_cast<size_t>(i)], scene);
  return out;
}

std::vector<RolloutOutcome> evaluate_plans(const SystemState& state,
                                           const std::vector<std::vector<ActionCommand>>& plans,
                                           const SceneSpec& scene, ExecPolicy exec) {
  return exec.parallel ? evaluate_plans_parallel(state, plans, scene)
                       : evaluate_plans_serial(state, plans, scene);
}

}  // namespace stage
