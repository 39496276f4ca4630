#include "stage/stability.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>

#include "stage/errors.h"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stage {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kNormEps = 1e-9;  // smoothing inside vector norms

double smooth_norm(const Vec3& v) { return std::sqrt(v.squaredNorm() + kNormEps * kNormEps); }

std::vector<std::pair<FrameRef, FrameRef>> admissible_pairs(const SceneSpec& scene) {
  std::vector<std::pair<FrameRef, FrameRef>> out;
  const int no = static_cast<int>(scene.objects.size());
  for (int i = 0; i < no; ++i) {
    FrameRef obj{FrameRef::Object, i};
    for (int s = 0; s < static_cast<int>(scene.surfaces.size()); ++s)
      out.push_back({obj, FrameRef{FrameRef::Surface, s}});
    for (int r = 0; r < static_cast<int>(scene.robots.size()); ++r)
      out.push_back({obj, FrameRef{FrameRef::Robot, r}});
    for (int j = i + 1; j < no; ++j) out.push_back({obj, FrameRef{FrameRef::Object, j}});
  }
  return out;
}

// Incrementally assembled residual system; rows are appended with their
// analytic Jacobians so equality/inequality bookkeeping stays in one place.
struct RowSet {
  explicit RowSet(int dim) : dim(dim) {}
  int dim;
  std::vector<double> vals;
  std::vector<Eigen::RowVectorXd> jacs;

  Eigen::RowVectorXd zero() const { return Eigen::RowVectorXd::Zero(dim); }
  void add(double v, const Eigen::RowVectorXd& j) {
    vals.push_back(v);
    jacs.push_back(j);
  }
  VectorXd values() const {
    return Eigen::Map<const VectorXd>(vals.data(), static_cast<long>(vals.size()));
  }
  MatrixXd jacobian() const {
    MatrixXd J(vals.size(), dim);
    for (size_t r = 0; r < jacs.size(); ++r) J.row(static_cast<long>(r)) = jacs[r];
    return J;
  }
};

// Pulls the center of a frame out of the decision vector together with its
// column offset (-1 when the center is not a decision variable).
struct Center {
  Vec3 c;
  int idx = -1;
};

Center frame_center(const VectorXd& x, const detail::NlpLayout& L, const FrameRef& f) {
  if (f.kind == FrameRef::Robot) return {x.segment<3>(3 * f.index), 3 * f.index};
  if (f.kind == FrameRef::Object)
    return {x.segment<3>(L.pos_off[static_cast<size_t>(f.index)]),
            L.pos_off[static_cast<size_t>(f.index)]};
  return {Vec3::Zero(), -1};
}

double frame_radius(const SceneSpec& scene, const FrameRef& f) {
  if (f.kind == FrameRef::Robot) return scene.robots[static_cast<size_t>(f.index)].radius;
  return scene.objects[static_cast<size_t>(f.index)].radius;
}

bool is_box(const SceneSpec& scene, const FrameRef& f) {
  return f.kind == FrameRef::Object &&
         scene.objects[static_cast<size_t>(f.index)].kind == ShapeKind::Box;
}

Vec3 box_corner_local(const Vec3& he, int i) {
  return Vec3((i & 1) ? he.x() : -he.x(), (i & 2) ? he.y() : -he.y(), (i & 4) ? he.z() : -he.z());
}

// Unit-ish contact normal pushing the pair's first frame away from the
// second, with its Jacobian as a dense 3 x dim block. Depends only on the
// second frame's geometry and the contact point.
struct NormalEval {
  Vec3 n;
  MatrixXd jac;  // 3 x dim
};

NormalEval contact_normal(const VectorXd& x, const detail::NlpLayout& L, const SceneSpec& scene,
                          const FrameRef& b, int contact_k, const detail::NlpLayout::BoxFace& face_b) {
  NormalEval out;
  out.jac = MatrixXd::Zero(3, L.dim);
  if (b.kind == FrameRef::Surface) {
    out.n = scene.surfaces[static_cast<size_t>(b.index)].normal;
    return out;
  }
  if (is_box(scene, b)) {
    // outward normal of the frozen face
    const int qoff = L.quat_off[static_cast<size_t>(b.index)];
    Quat q(x[qoff], x[qoff + 1], x[qoff + 2], x[qoff + 3]);
    Vec3 axis = face_b.sign * Vec3::Unit(face_b.axis);
    out.n = quat_rotate(q, axis);
    out.jac.block<3, 4>(0, qoff) = quat_rotate_jac_q(q, axis);
    return out;
  }
  // sphere-like frame: from its center toward the contact point
  const int poff = L.point_off(contact_k);
  Center cb = frame_center(x, L, b);
  Vec3 d = x.segment<3>(poff) - cb.c;
  const double len = smooth_norm(d);
  out.n = d / len;
  Eigen::Matrix3d dn = Eigen::Matrix3d::Identity() / len - d * (d.transpose() / (len * len * len));
  out.jac.block<3, 3>(0, poff) = dn;
  out.jac.block<3, 3>(0, cb.idx) = -dn;
  return out;
}

// Appends the box-frame rows for a contact point: optionally the on-face
// equality for the frozen face, always the four in-face containment margins.
void add_box_face_rows(RowSet& eq, RowSet& ineq, const VectorXd& x, const detail::NlpLayout& L,
                       const SceneSpec& scene, const FrameRef& f, int poff,
                       const detail::NlpLayout::BoxFace& face, bool on_face_eq) {
  const Vec3 p = x.segment<3>(poff);
  const ObjectSpec& o = scene.objects[static_cast<size_t>(f.index)];
  Center c = frame_center(x, L, f);
  const int qoff = L.quat_off[static_cast<size_t>(f.index)];
  Quat q(x[qoff], x[qoff + 1], x[qoff + 2], x[qoff + 3]);
  Vec3 rel = p - c.c;
  Vec3 u = quat_rotate_inv(q, rel);
  Eigen::Matrix3d du_dp = quat_rotate_jac_v(q.conjugate());
  Eigen::Matrix<double, 3, 4> du_dq = quat_rotate_inv_jac_q(q, rel);
  auto axis_row = [&](int a, double scale) {
    Eigen::RowVectorXd j = eq.zero();
    j.segment<3>(poff) = scale * du_dp.row(a);
    j.segment<3>(c.idx) = -scale * du_dp.row(a);
    j.segment<4>(qoff) = scale * du_dq.row(a);
    return j;
  };
  if (on_face_eq)
    eq.add(face.sign * u[face.axis] - o.half_extents[face.axis], axis_row(face.axis, face.sign));
  for (int a = 0; a < 3; ++a) {
    if (a == face.axis) continue;
    ineq.add(u[a] - o.half_extents[a], axis_row(a, 1.0));
    ineq.add(-u[a] - o.half_extents[a], axis_row(a, -1.0));
  }
}

// Anchors contact k at exact tangency of its frame pair. Sphere-involved
// pairs pin the pair separation to zero and the contact point to the
// closed-form touch point, which keeps the anchor Jacobian full rank (the
// classic on-surface formulation degenerates at tangency, where both surface
// gradients are parallel). Box-surface contacts keep the on-face point with
// in-face freedom, since face/edge contact genuinely leaves the point
// underdetermined until moment balance picks it.
void add_contact_anchor(RowSet& eq, RowSet& ineq, const VectorXd& x,
                        const detail::NlpLayout& L, const SceneSpec& scene, const FrameRef& fa,
                        const FrameRef& fb, int k, const detail::NlpLayout::BoxFace& face_a,
                        const detail::NlpLayout::BoxFace& face_b) {
  const int poff = L.point_off(k);
  const Vec3 p = x.segment<3>(poff);
  const bool a_box = is_box(scene, fa);
  const bool b_box = is_box(scene, fb);
  if (a_box && b_box) throw ValidationError("box-box contacts are not supported");

  if (!a_box && fb.kind == FrameRef::Surface) {
    // sphere on a plane
    const HalfSpace& h = scene.surfaces[static_cast<size_t>(fb.index)];
    Center c = frame_center(x, L, fa);
    const double r = frame_radius(scene, fa);
    Eigen::RowVectorXd jt = eq.zero();
    jt.segment<3>(c.idx) = h.normal.transpose();
    eq.add(h.normal.dot(c.c) - r - h.offset, jt);
    for (int i = 0; i < 3; ++i) {
      Eigen::RowVectorXd j = eq.zero();
      j[poff + i] = 1.0;
      j[c.idx + i] = -1.0;
      eq.add(p[i] - c.c[i] + r * h.normal[i], j);
    }
    return;
  }

  if (!a_box && !b_box) {
    // two sphere-like frames
    Center c1 = frame_center(x, L, fa);
    Center c2 = frame_center(x, L, fb);
    const double r1 = frame_radius(scene, fa);
    const double r2 = frame_radius(scene, fb);
    Vec3 d = c1.c - c2.c;
    const double len = smooth_norm(d);
    Vec3 dn = d / len;
    Eigen::Matrix3d P =
        Eigen::Matrix3d::Identity() / len - d * (d.transpose() / (len * len * len));
    Eigen::RowVectorXd jt = eq.zero();
    jt.segment<3>(c1.idx) = dn.transpose();
    jt.segment<3>(c2.idx) = -dn.transpose();
    eq.add(len - r1 - r2, jt);
    Vec3 g = p - c1.c + r1 * dn;
    for (int i = 0; i < 3; ++i) {
      Eigen::RowVectorXd j = eq.zero();
      j[poff + i] = 1.0;
      j.segment<3>(c1.idx) = r1 * P.row(i);
      j[c1.idx + i] -= 1.0;
      j.segment<3>(c2.idx) = -r1 * P.row(i);
      eq.add(g[i], j);
    }
    return;
  }

  // one box, one sphere-like frame, on the box's frozen face
  const FrameRef& box = a_box ? fa : fb;
  const FrameRef& sph = a_box ? fb : fa;
  const detail::NlpLayout::BoxFace& face = a_box ? face_a : face_b;
  const ObjectSpec& o = scene.objects[static_cast<size_t>(box.index)];
  Center cb = frame_center(x, L, box);
  Center cs = frame_center(x, L, sph);
  const double rs = frame_radius(scene, sph);
  const int qoff = L.quat_off[static_cast<size_t>(box.index)];
  Quat q(x[qoff], x[qoff + 1], x[qoff + 2], x[qoff + 3]);
  Vec3 rel = cs.c - cb.c;
  Vec3 u = quat_rotate_inv(q, rel);
  Eigen::Matrix3d du_dp = quat_rotate_jac_v(q.conjugate());
  Eigen::Matrix<double, 3, 4> du_dq = quat_rotate_inv_jac_q(q, rel);
  Eigen::RowVectorXd jt = eq.zero();
  jt.segment<3>(cs.idx) = face.sign * du_dp.row(face.axis);
  jt.segment<3>(cb.idx) = -face.sign * du_dp.row(face.axis);
  jt.segment<4>(qoff) = face.sign * du_dq.row(face.axis);
  eq.add(face.sign * u[face.axis] - o.half_extents[face.axis] - rs, jt);
  Vec3 axis = face.sign * Vec3::Unit(face.axis);
  Vec3 n_out = quat_rotate(q, axis);
  Eigen::Matrix<double, 3, 4> dn_dq = quat_rotate_jac_q(q, axis);
  Vec3 g = p - cs.c + rs * n_out;
  for (int i = 0; i < 3; ++i) {
    Eigen::RowVectorXd j = eq.zero();
    j[poff + i] = 1.0;
    j[cs.idx + i] = -1.0;
    j.segment<4>(qoff) = rs * dn_dq.row(i);
    eq.add(g[i], j);
  }
  add_box_face_rows(eq, ineq, x, L, scene, box, poff, face, false);
}

// Appends non-penetration hinge margins (violation positive) for one scene
// pair; one row per contact feature, mirroring the simulator's geometry.
// `shift` relaxes the margin so rows for anchored pairs stay smoothly
// inactive at tangency while still blocking mirror-image placements.
void add_separation_rows(RowSet& ineq, const VectorXd& x, const detail::NlpLayout& L,
                         const SceneSpec& scene, const FrameRef& a, const FrameRef& b,
                         double shift = 0.0) {
  const bool a_box = is_box(scene, a);
  Center ca = frame_center(x, L, a);
  if (!a_box && b.kind == FrameRef::Surface) {
    const HalfSpace& h = scene.surfaces[static_cast<size_t>(b.index)];
    Eigen::RowVectorXd j = ineq.zero();
    j.segment<3>(ca.idx) = -h.normal.transpose();
    ineq.add(frame_radius(scene, a) + h.offset - h.normal.dot(ca.c) - shift, j);
    return;
  }
  if (!a_box && b.kind != FrameRef::Surface && !is_box(scene, b)) {
    Center cb = frame_center(x, L, b);
    Vec3 d = ca.c - cb.c;
    const double len = smooth_norm(d);
    Eigen::RowVectorXd j = ineq.zero();
    j.segment<3>(ca.idx) = -(d / len).transpose();
    j.segment<3>(cb.idx) = (d / len).transpose();
    ineq.add(frame_radius(scene, a) + frame_radius(scene, b) - len - shift, j);
    return;
  }
  // box against something
  const FrameRef& box = a_box ? a : b;
  const FrameRef& other = a_box ? b : a;
  const ObjectSpec& o = scene.objects[static_cast<size_t>(box.index)];
  Center cbox = frame_center(x, L, box);
  const int qoff = L.quat_off[static_cast<size_t>(box.index)];
  Quat q(x[qoff], x[qoff + 1], x[qoff + 2], x[qoff + 3]);
  if (other.kind == FrameRef::Surface) {
    const HalfSpace& h = scene.surfaces[static_cast<size_t>(other.index)];
    for (int i = 0; i < 8; ++i) {
      Vec3 corner = box_corner_local(o.half_extents, i);
      Eigen::RowVectorXd j = ineq.zero();
      j.segment<3>(cbox.idx) = -h.normal.transpose();
      j.segment<4>(qoff) = -h.normal.transpose() * quat_rotate_jac_q(q, corner);
      ineq.add(h.offset - h.normal.dot(cbox.c + quat_rotate(q, corner)) - shift, j);
    }
    return;
  }
  // box vs sphere-like frame: distance from the clamped closest point, with
  // the clamp pattern frozen at the current configuration
  Center cs = frame_center(x, L, other);
  const double rs = frame_radius(scene, other);
  Vec3 rel = cs.c - cbox.c;
  Vec3 u = quat_rotate_inv(q, rel);
  Eigen::Matrix3d du_dp = quat_rotate_jac_v(q.conjugate());  // d u / d rel
  Eigen::Matrix<double, 3, 4> du_dq = quat_rotate_inv_jac_q(q, rel);
  Vec3 ut = u.cwiseMax(-o.half_extents).cwiseMin(o.half_extents);
  bool inside = true;
  Eigen::Matrix3d D = Eigen::Matrix3d::Zero();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(u[k]) < o.half_extents[k]) {
      D(k, k) = 1.0;
    } else {
      inside = false;
    }
  }
  if (inside) {
    // center inside the box: depth through the nearest face
    int a_min = 0;
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
      double gap = o.half_extents[k] - std::abs(u[k]);
      if (gap < best) {
        best = gap;
        a_min = k;
      }
    }
    const double sgn = u[a_min] >= 0.0 ? 1.0 : -1.0;
    Eigen::RowVectorXd da = ineq.zero();
    da.segment<3>(cs.idx) = sgn * du_dp.row(a_min);
    da.segment<3>(cbox.idx) = -sgn * du_dp.row(a_min);
    da.segment<4>(qoff) = sgn * du_dq.row(a_min);
    // g = -sep = he - |u[a]| + rs
    ineq.add(o.half_extents[a_min] - sgn * u[a_min] + rs - shift, -da);
    return;
  }
  // world-space clamp point w = cbox + R ut; separation = |cs - w| - rs
  Vec3 w = cbox.c + quat_rotate(q, ut);
  Vec3 d = cs.c - w;
  const double len = smooth_norm(d);
  Vec3 dn = d / len;
  // d d = dcs - dcbox - d(R ut), with dut = D du
  MatrixXd dd = MatrixXd::Zero(3, L.dim);
  dd.block<3, 3>(0, cs.idx) += Eigen::Matrix3d::Identity();
  dd.block<3, 3>(0, cbox.idx) -= Eigen::Matrix3d::Identity();
  Eigen::Matrix3d R = quat_rotate_jac_v(q);
  Eigen::Matrix<double, 3, 4> dRut_q = quat_rotate_jac_q(q, ut);
  dd.block<3, 4>(0, qoff) -= dRut_q;
  // chain through ut
  MatrixXd du = MatrixXd::Zero(3, L.dim);
  du.block<3, 3>(0, cs.idx) += du_dp;
  du.block<3, 3>(0, cbox.idx) -= du_dp;
  du.block<3, 4>(0, qoff) += du_dq;
  dd -= R * (D * du);
  Eigen::RowVectorXd j = -(dn.transpose() * dd);
  ineq.add(rs - len - shift, j);
}

// Closest point on frame a's surface toward frame b, used to warm-start the
// contact points.
Vec3 init_contact_point(const SystemState& s, const SceneSpec& scene, const FrameRef& a,
                        const FrameRef& b) {
  auto center = [&](const FrameRef& f) {
    return f.kind == FrameRef::Robot ? s.robot_pos(f.index)
                                     : s.object_poses[static_cast<size_t>(f.index)].pos;
  };
  if (a.kind != FrameRef::Object) return 0.5 * (center(a) + center(b));
  const ObjectSpec& o = scene.objects[static_cast<size_t>(a.index)];
  const RigidPose& pose = s.object_poses[static_cast<size_t>(a.index)];
  if (b.kind == FrameRef::Surface) {
    const HalfSpace& h = scene.surfaces[static_cast<size_t>(b.index)];
    if (o.kind == ShapeKind::Sphere) return pose.pos - o.radius * h.normal;
    int best = 0;
    double lowest = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 8; ++i) {
      Vec3 wc = pose.pos + quat_rotate(pose.quat, box_corner_local(o.half_extents, i));
      if (h.normal.dot(wc) < lowest) {
        lowest = h.normal.dot(wc);
        best = i;
      }
    }
    return pose.pos + quat_rotate(pose.quat, box_corner_local(o.half_extents, best));
  }
  Vec3 cb = center(b);
  if (o.kind == ShapeKind::Sphere) {
    Vec3 d = cb - pose.pos;
    double len = std::max(d.norm(), 1e-12);
    return pose.pos + o.radius * d / len;
  }
  Vec3 u = quat_rotate_inv(pose.quat, cb - pose.pos);
  Vec3 ut = u.cwiseMax(-o.half_extents).cwiseMin(o.half_extents);
  return pose.pos + quat_rotate(pose.quat, ut);
}

void check_config_shape(const SystemState& config, const SceneSpec& scene) {
  if (config.robot_q.size() != scene.robot_dof() ||
      config.robot_v.size() != scene.robot_dof() ||
      config.object_poses.size() != scene.objects.size() ||
      config.object_vels.size() != scene.objects.size())
    throw DimensionMismatch("configuration does not match the scene");
  if (!config.all_finite()) throw ValidationError("configuration has non-finite entries");
}

}  // namespace

namespace detail {

NlpLayout make_layout(const ContactAssignment& assignment, const SceneSpec& scene,
                      const SystemState& config, const std::vector<ContactVariable>& vars) {
  NlpLayout L;
  L.nr = scene.robot_dof();
  int off = L.nr;
  for (const ObjectSpec& o : scene.objects) {
    L.pos_off.push_back(off);
    off += 3;
    if (o.kind == ShapeKind::Box) {
      L.quat_off.push_back(off);
      off += 4;
    } else {
      L.quat_off.push_back(-1);
    }
  }
  L.con_off = off;
  L.dim = off + 6 * assignment.count();
  (void)vars;

  auto pick_face = [&](const FrameRef& f, const FrameRef& other) {
    NlpLayout::BoxFace face;
    if (!is_box(scene, f)) return face;
    const RigidPose& pose = config.object_poses[static_cast<size_t>(f.index)];
    const ObjectSpec& o = scene.objects[static_cast<size_t>(f.index)];
    if (other.kind == FrameRef::Surface) {
      // the face whose outward normal is most anti-aligned with the plane's
      Vec3 m = quat_rotate_inv(pose.quat, scene.surfaces[static_cast<size_t>(other.index)].normal);
      int a = 0;
      m.cwiseAbs().maxCoeff(&a);
      face.axis = a;
      face.sign = m[a] > 0.0 ? -1.0 : 1.0;
      return face;
    }
    Vec3 oc = other.kind == FrameRef::Robot
                  ? config.robot_pos(other.index)
                  : config.object_poses[static_cast<size_t>(other.index)].pos;
    Vec3 v = quat_rotate_inv(pose.quat, oc - pose.pos);
    int a = 0;
    (v.cwiseAbs() - o.half_extents).maxCoeff(&a);
    face.axis = a;
    face.sign = v[a] >= 0.0 ? 1.0 : -1.0;
    return face;
  };
  for (const auto& [a, b] : assignment.contacts) {
    L.face_a.push_back(pick_face(a, b));
    L.face_b.push_back(pick_face(b, a));
  }
  return L;
}

Eigen::VectorXd pack(const SystemState& config, const std::vector<ContactVariable>& vars,
                     const NlpLayout& layout) {
  VectorXd x = VectorXd::Zero(layout.dim);
  x.head(layout.nr) = config.robot_q;
  for (size_t i = 0; i < layout.pos_off.size(); ++i) {
    x.segment<3>(layout.pos_off[i]) = config.object_poses[i].pos;
    if (layout.quat_off[i] >= 0) {
      const Quat& q = config.object_poses[i].quat;
      x[layout.quat_off[i]] = q.w();
      x[layout.quat_off[i] + 1] = q.x();
      x[layout.quat_off[i] + 2] = q.y();
      x[layout.quat_off[i] + 3] = q.z();
    }
  }
  for (size_t k = 0; k < vars.size(); ++k) {
    x.segment<3>(layout.point_off(static_cast<int>(k))) = vars[k].point;
    x.segment<3>(layout.force_off(static_cast<int>(k))) = vars[k].force;
  }
  return x;
}

void unpack(const Eigen::VectorXd& x, const NlpLayout& layout, const SceneSpec& scene,
            SystemState* config, std::vector<ContactVariable>* vars) {
  if (config) {
    config->robot_q = x.head(layout.nr);
    config->robot_v = VectorXd::Zero(layout.nr);
    config->object_poses.assign(scene.objects.size(), RigidPose{});
    config->object_vels.assign(scene.objects.size(), RigidVel{});
    for (size_t i = 0; i < layout.pos_off.size(); ++i) {
      config->object_poses[i].pos = x.segment<3>(layout.pos_off[i]);
      if (layout.quat_off[i] >= 0) {
        const int q = layout.quat_off[i];
        config->object_poses[i].quat = Quat(x[q], x[q + 1], x[q + 2], x[q + 3]);
      }
    }
  }
  if (vars) {
    const int n = (layout.dim - layout.con_off) / 6;
    vars->assign(static_cast<size_t>(n), ContactVariable{});
    for (int k = 0; k < n; ++k) {
      (*vars)[static_cast<size_t>(k)].point = x.segment<3>(layout.point_off(k));
      (*vars)[static_cast<size_t>(k)].force = x.segment<3>(layout.force_off(k));
    }
  }
}

ConstraintEval eval_constraints(const Eigen::VectorXd& x, const NlpLayout& L,
                                const ContactAssignment& A, const SceneSpec& scene,
                                bool include_aux) {
  RowSet eq(L.dim), ineq(L.dim);
  const Vec3 g_vec = scene.gravity_vec();

  // force and moment balance per free object
  for (int i = 0; i < static_cast<int>(scene.objects.size()); ++i) {
    Vec3 fsum = scene.objects[static_cast<size_t>(i)].mass * g_vec;
    Vec3 msum = Vec3::Zero();
    Center ci = frame_center(x, L, FrameRef{FrameRef::Object, i});
    std::vector<Eigen::RowVectorXd> frows(3, eq.zero()), mrows(3, eq.zero());
    for (int k = 0; k < A.count(); ++k) {
      const auto& [fa, fb] = A.contacts[static_cast<size_t>(k)];
      double sgn = 0.0;
      if (fa.kind == FrameRef::Object && fa.index == i) sgn = 1.0;
      if (fb.kind == FrameRef::Object && fb.index == i) sgn = -1.0;
      if (sgn == 0.0) continue;
      const Vec3 p = x.segment<3>(L.point_off(k));
      const Vec3 f = x.segment<3>(L.force_off(k));
      fsum += sgn * f;
      msum += sgn * (p - ci.c).cross(f);
      Eigen::Matrix3d jf_p = sgn * -skew(f);
      Eigen::Matrix3d jf_c = sgn * skew(f);
      Eigen::Matrix3d jf_f = sgn * skew(p - ci.c);
      for (int r = 0; r < 3; ++r) {
        frows[static_cast<size_t>(r)][L.force_off(k) + r] += sgn;
        mrows[static_cast<size_t>(r)].segment<3>(L.point_off(k)) += jf_p.row(r);
        mrows[static_cast<size_t>(r)].segment<3>(ci.idx) += jf_c.row(r);
        mrows[static_cast<size_t>(r)].segment<3>(L.force_off(k)) += jf_f.row(r);
      }
    }
    for (int r = 0; r < 3; ++r) eq.add(fsum[r], frows[static_cast<size_t>(r)]);
    for (int r = 0; r < 3; ++r) eq.add(msum[r], mrows[static_cast<size_t>(r)]);
  }

  // anchoring
  for (int k = 0; k < A.count(); ++k) {
    const auto& [fa, fb] = A.contacts[static_cast<size_t>(k)];
    if (is_box(scene, fa) && fb.kind == FrameRef::Surface) {
      // box face on a plane: the point stays on both the plane and the face
      const HalfSpace& h = scene.surfaces[static_cast<size_t>(fb.index)];
      Eigen::RowVectorXd j = eq.zero();
      j.segment<3>(L.point_off(k)) = h.normal.transpose();
      eq.add(h.normal.dot(x.segment<3>(L.point_off(k))) - h.offset, j);
      add_box_face_rows(eq, ineq, x, L, scene, fa, L.point_off(k),
                        L.face_a[static_cast<size_t>(k)], true);
    } else {
      add_contact_anchor(eq, ineq, x, L, scene, fa, fb, k, L.face_a[static_cast<size_t>(k)],
                         L.face_b[static_cast<size_t>(k)]);
    }
  }

  // friction cone: |f_t| <= mu f_n and f_n >= 0
  for (int k = 0; k < A.count(); ++k) {
    const auto& [fa, fb] = A.contacts[static_cast<size_t>(k)];
    NormalEval ne = contact_normal(x, L, scene, fb, k, L.face_b[static_cast<size_t>(k)]);
    const Vec3 f = x.segment<3>(L.force_off(k));
    const double fn = f.dot(ne.n);
    const Vec3 ft = f - fn * ne.n;
    const double tn = smooth_norm(ft);
    Eigen::RowVectorXd jcone = ineq.zero();
    jcone.segment<3>(L.force_off(k)) =
        (ft / tn).transpose() * (Eigen::Matrix3d::Identity() - ne.n * ne.n.transpose()) -
        scene.friction_mu * ne.n.transpose();
    Eigen::RowVectorXd dg_dn =
        (ft / tn).transpose() * (-ne.n * f.transpose() - fn * Eigen::Matrix3d::Identity()) -
        scene.friction_mu * f.transpose();
    jcone += dg_dn.head<3>() * ne.jac;
    ineq.add(tn - scene.friction_mu * fn, jcone);

    Eigen::RowVectorXd jfn = ineq.zero();
    jfn.segment<3>(L.force_off(k)) = -ne.n.transpose();
    jfn += (-f.transpose()) * ne.jac;
    ineq.add(-fn, jfn);
  }

  // non-penetration margins; the assigned pairs are anchored by equalities,
  // and inside the solver they get a slacked hinge that stays inactive at
  // tangency (no kink at the solution) yet blocks mirror-image placements
  for (const auto& [pa, pb] : contact_pairs(scene)) {
    const bool active =
        std::find(A.contacts.begin(), A.contacts.end(), std::make_pair(pa, pb)) !=
        A.contacts.end();
    if (active && !include_aux) continue;
    add_separation_rows(ineq, x, L, scene, pa, pb, active ? 1e-3 : 0.0);
  }

  if (include_aux) {
    // unit quaternions
    for (size_t i = 0; i < L.quat_off.size(); ++i) {
      if (L.quat_off[i] < 0) continue;
      Eigen::Vector4d q = x.segment<4>(L.quat_off[i]);
      Eigen::RowVectorXd j = eq.zero();
      j.segment<4>(L.quat_off[i]) = 2.0 * q.transpose();
      eq.add(q.squaredNorm() - 1.0, j);
    }
    // robot position limits
    for (int r = 0; r < static_cast<int>(scene.robots.size()); ++r) {
      const RobotSpec& spec = scene.robots[static_cast<size_t>(r)];
      for (int a = 0; a < 3; ++a) {
        const int idx = 3 * r + a;
        Eigen::RowVectorXd j = ineq.zero();
        j[idx] = 1.0;
        ineq.add(x[idx] - spec.pos_hi[a], j);
        j[idx] = -1.0;
        ineq.add(spec.pos_lo[a] - x[idx], j);
      }
    }
  }

  ConstraintEval out;
  out.eq = eq.values();
  out.jeq = eq.jacobian();
  out.ineq = ineq.values();
  out.jineq = ineq.jacobian();
  return out;
}

}  // namespace detail

void to_json(json& j, const ContactAssignment& a) { j = json{{"contacts", a.contacts}}; }

void from_json(const json& j, ContactAssignment& a) {
  a.contacts = j.at("contacts").get<std::vector<std::pair<FrameRef, FrameRef>>>();
}

void to_json(json& j, const ContactVariable& v) {
  j = json{{"point", vec_to_json(v.point)}, {"force", vec_to_json(v.force)}};
}

void from_json(const json& j, ContactVariable& v) {
  v.point = vec_from_json(j.at("point"));
  v.force = vec_from_json(j.at("force"));
}

void to_json(json& j, const StableState& s) {
  j = json{{"config", s.config},
           {"assignment", s.assignment},
           {"contact_vars", s.contact_vars},
           {"residual_norm", s.residual_norm},
           {"id", s.id}};
}

void from_json(const json& j, StableState& s) {
  s.config = j.at("config").get<SystemState>();
  s.assignment = j.at("assignment").get<ContactAssignment>();
  s.contact_vars = j.at("contact_vars").get<std::vector<ContactVariable>>();
  s.residual_norm = j.at("residual_norm").get<double>();
  s.id = j.at("id").get<int>();
}

ContactAssignment sample_contact_assignment(const SceneSpec& scene, Rng& rng) {
  auto pool = admissible_pairs(scene);
  if (pool.empty()) throw ValidationError("scene has no admissible contact pairs");
  const int max_count = std::min<int>(3, static_cast<int>(pool.size()));
  const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_count)));
  ContactAssignment a;
  for (int k = 0; k < count; ++k) {
    const size_t j = static_cast<size_t>(k) + rng.below(pool.size() - static_cast<size_t>(k));
    std::swap(pool[static_cast<size_t>(k)], pool[j]);
    a.contacts.push_back(pool[static_cast<size_t>(k)]);
  }
  return a;
}

NlpResiduals evaluate_residuals(const SystemState& config, const std::vector<ContactVariable>& vars,
                                const ContactAssignment& assignment, const SceneSpec& scene) {
  if (static_cast<int>(vars.size()) != assignment.count())
    throw DimensionMismatch("contact variables do not match the assignment");
  check_config_shape(config, scene);
  for (const ContactVariable& v : vars) {
    if (!v.point.allFinite() || !v.force.allFinite())
      throw ValidationError("contact variables have non-finite entries");
  }
  detail::NlpLayout L = detail::make_layout(assignment, scene, config, vars);
  VectorXd x = detail::pack(config, vars, L);
  detail::ConstraintEval ce = detail::eval_constraints(x, L, assignment, scene, false);
  return NlpResiduals{ce.eq, ce.ineq};
}

SystemState sample_x_bar(const SceneSpec& scene, Rng& rng) {
  SystemState s = default_state(scene);
  for (int r = 0; r < static_cast<int>(scene.robots.size()); ++r) {
    const RobotSpec& spec = scene.robots[static_cast<size_t>(r)];
    Vec3 q;
    for (int a = 0; a < 3; ++a) q[a] = rng.uniform(spec.pos_lo[a], spec.pos_hi[a]);
    s.set_robot_pos(r, q);
  }
  s.robot_v.setZero();
  const Vec3 mid = 0.5 * (scene.workspace_lo + scene.workspace_hi);
  const Vec3 half = 0.75 * (scene.workspace_hi - scene.workspace_lo);  // 1.5x extent
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = rng.uniform(mid[a] - half[a], mid[a] + half[a]);
    s.object_poses[i].pos = p;
    s.object_poses[i].quat =
        scene.objects[i].kind == ShapeKind::Box ? uniform_quat(rng) : Quat(1, 0, 0, 0);
    s.object_vels[i] = RigidVel{};
  }
  return s;
}

// Penalty ceiling: beyond this, double precision can no longer certify the
// descent needed to keep the damped Gauss-Newton inner solves honest.
constexpr double kRhoMax = 1e6;

ProjectionOutcome project_to_stable(const SystemState& x_bar, const ContactAssignment& assignment,
                                    const SceneSpec& scene, const SolverSettings& cfg) {
  check_config_shape(x_bar, scene);
  if (assignment.count() < 1) throw ValidationError("assignment has no contacts");

  // warm start: closest points, then the regularized least-squares force fit
  // to the balance rows at that geometry; for a feasible x_bar this recovers
  // the equilibrium forces, so the solve starts without a multiplier
  // transient that could drag the configuration to a neighboring optimum
  const int K = assignment.count();
  std::vector<ContactVariable> vars(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    const auto& [fa, fb] = assignment.contacts[static_cast<size_t>(k)];
    vars[static_cast<size_t>(k)].point = init_contact_point(x_bar, scene, fa, fb);
    vars[static_cast<size_t>(k)].force = Vec3::Zero();
  }
  {
    const int n_obj = static_cast<int>(scene.objects.size());
    MatrixXd A = MatrixXd::Zero(6 * n_obj, 3 * K);
    VectorXd b = VectorXd::Zero(6 * n_obj);
    for (int i = 0; i < n_obj; ++i) {
      b.segment<3>(6 * i) =
          -scene.objects[static_cast<size_t>(i)].mass * scene.gravity_vec();
      const Vec3 ci = x_bar.object_poses[static_cast<size_t>(i)].pos;
      for (int k = 0; k < K; ++k) {
        const auto& [fa, fb] = assignment.contacts[static_cast<size_t>(k)];
        double sgn = 0.0;
        if (fa.kind == FrameRef::Object && fa.index == i) sgn = 1.0;
        if (fb.kind == FrameRef::Object && fb.index == i) sgn = -1.0;
        if (sgn == 0.0) continue;
        A.block<3, 3>(6 * i, 3 * k) = sgn * Eigen::Matrix3d::Identity();
        A.block<3, 3>(6 * i + 3, 3 * k) =
            sgn * skew(vars[static_cast<size_t>(k)].point - ci);
      }
    }
    MatrixXd H = A.transpose() * A;
    H.diagonal().array() += std::max(cfg.force_reg, 1e-9);
    VectorXd F = H.ldlt().solve(A.transpose() * b);
    for (int k = 0; k < K; ++k) vars[static_cast<size_t>(k)].force = F.segment<3>(3 * k);
  }

  detail::NlpLayout L = detail::make_layout(assignment, scene, x_bar, vars);
  VectorXd x = detail::pack(x_bar, vars, L);
  const VectorXd x_ref = x;

  detail::ConstraintEval ce = detail::eval_constraints(x, L, assignment, scene, true);
  VectorXd lambda = VectorXd::Zero(ce.eq.size());
  VectorXd mu = VectorXd::Zero(ce.ineq.size());
  double rho = cfg.rho_init;
  const double sqrt_reg = std::sqrt(cfg.force_reg);

  // residual stack: config pull, force regularizer, AL equality and
  // squared-hinge inequality rows
  const int n_cfg = L.con_off;
  const int n_force = 3 * assignment.count();
  auto assemble = [&](const VectorXd& xv, const detail::ConstraintEval& c, VectorXd* phi,
                      MatrixXd* jac) {
    const long rows = n_cfg + n_force + c.eq.size() + c.ineq.size();
    phi->resize(rows);
    if (jac) jac->setZero(rows, L.dim);
    long r = 0;
    for (int i = 0; i < n_cfg; ++i, ++r) {
      (*phi)[r] = xv[i] - x_ref[i];
      if (jac) (*jac)(r, i) = 1.0;
    }
    for (int k = 0; k < assignment.count(); ++k) {
      // regularize toward the warm-start force fit, not zero: a pull toward
      // zero trades config distance for force magnitude along equilibrium
      // families and would break projection idempotence
      for (int a = 0; a < 3; ++a, ++r) {
        const int c = L.force_off(k) + a;
        (*phi)[r] = sqrt_reg * (xv[c] - x_ref[c]);
        if (jac) (*jac)(r, c) = sqrt_reg;
      }
    }
    const double w = std::sqrt(rho / 2.0);
    for (long i = 0; i < c.eq.size(); ++i, ++r) {
      (*phi)[r] = w * c.eq[i] + lambda[i] / (2.0 * w);
      if (jac) jac->row(r) = w * c.jeq.row(i);
    }
    for (long i = 0; i < c.ineq.size(); ++i, ++r) {
      const double h = c.ineq[i] + mu[i] / rho;
      if (h > 0.0) {
        (*phi)[r] = w * h;
        if (jac) jac->row(r) = w * c.jineq.row(i);
      } else {
        (*phi)[r] = 0.0;
      }
    }
  };

  ProjectionOutcome out;
  double grad_inf = std::numeric_limits<double>::infinity();
  double prev_viol = std::numeric_limits<double>::infinity();
  VectorXd x_best;
  double best_viol = std::numeric_limits<double>::infinity();
  int stall = 0;

  for (int outer = 0; outer < cfg.max_outer; ++outer) {
    out.outer_iterations = outer + 1;
    // Gauss-Newton with Levenberg damping on the AL least-squares system
    double nu = 1e-3;
    VectorXd phi;
    MatrixXd jac;
    assemble(x, ce, &phi, &jac);
    double cost = phi.squaredNorm();
    // keep the inner target below the outer stationarity test; much tighter
    // is not certifiable in double precision once rho is large
    const double inner_gtol = 0.1 * cfg.grad_tol;
    bool inner_ok = false;
    double grow = 2.0;
    for (int inner = 0; inner < cfg.max_inner; ++inner) {
      VectorXd g = jac.transpose() * phi;
      grad_inf = 2.0 * g.lpNorm<Eigen::Infinity>();
      if (grad_inf < inner_gtol) {
        inner_ok = true;
        break;
      }
      MatrixXd h = jac.transpose() * jac;
      // Marquardt scaling keeps damping meaningful across the mixed
      // position/quaternion/force column magnitudes
      const VectorXd diag = h.diagonal().cwiseMax(1e-12);
      h.diagonal() += nu * diag;
      VectorXd delta = h.ldlt().solve(-g);
      if (!delta.allFinite()) break;
      VectorXd x_try = x + delta;
      detail::ConstraintEval ce_try =
          detail::eval_constraints(x_try, L, assignment, scene, true);
      VectorXd phi_try;
      assemble(x_try, ce_try, &phi_try, nullptr);
      const double cost_try = phi_try.squaredNorm();
      const double pred = -delta.dot(g) + nu * delta.dot(diag.cwiseProduct(delta));
      const double gain = pred > 0.0 ? (cost - cost_try) / pred : -1.0;
      if (gain > 0.0 && cost_try < cost) {
        x = x_try;
        ce = ce_try;
        assemble(x, ce, &phi, &jac);
        cost = phi.squaredNorm();
        nu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * gain - 1.0, 3));
        nu = std::max(nu, 1e-12);
        grow = 2.0;
        if (delta.lpNorm<Eigen::Infinity>() < 1e-12) break;
      } else {
        nu *= grow;
        grow *= 2.0;
        if (nu > 1e14) break;
      }
    }

    const double eq_l2 = ce.eq.norm();
    const double ineq_max = ce.ineq.size() ? std::max(0.0, ce.ineq.maxCoeff()) : 0.0;
    out.final_residual = eq_l2;
    out.final_cone_violation = ineq_max;
    const double viol = std::max(ce.eq.lpNorm<Eigen::Infinity>(), ineq_max);
    if (eq_l2 <= cfg.eq_tol && ineq_max <= cfg.ineq_tol && grad_inf <= cfg.grad_tol) {
      // converged; keep polishing with further multiplier updates so the
      // result lands on the constraint manifold, not just inside tolerance
      out.converged = true;
      if (viol < best_viol) {
        best_viol = viol;
        x_best = x;
      }
      if (viol <= 1e-10) break;
      // only count outers where neither the multipliers nor the penalty
      // escalation are still making headway
      stall = (viol > 0.5 * prev_viol && rho >= kRhoMax) ? stall + 1 : 0;
      if (stall >= 2) break;
    }

    lambda += rho * ce.eq;
    mu = (mu + rho * ce.ineq).cwiseMax(0.0);
    // raising the penalty is only meaningful once the subproblem was solved
    if (inner_ok && viol > 0.5 * prev_viol) rho = std::min(rho * cfg.rho_scale, kRhoMax);
    prev_viol = viol;
  }

  if (!out.converged) return out;
  x = x_best;

  SystemState config;
  std::vector<ContactVariable> sol;
  detail::unpack(x, L, scene, &config, &sol);
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    if (scene.objects[i].kind == ShapeKind::Box)
      config.object_poses[i].quat.normalize();
    else
      config.object_poses[i].quat = Quat(1, 0, 0, 0);
  }
  for (int r = 0; r < static_cast<int>(scene.robots.size()); ++r) {
    const RobotSpec& spec = scene.robots[static_cast<size_t>(r)];
    config.set_robot_pos(r, config.robot_pos(r).cwiseMax(spec.pos_lo).cwiseMin(spec.pos_hi));
  }
  config.zero_velocities();

  NlpResiduals res = evaluate_residuals(config, sol, assignment, scene);
  out.state.config = config;
  out.state.assignment = assignment;
  out.state.contact_vars = sol;
  out.state.residual_norm = res.equality.norm();
  out.final_residual = out.state.residual_norm;
  out.final_cone_violation = res.inequality.size() ? std::max(0.0, res.inequality.maxCoeff()) : 0.0;
  out.converged = out.state.residual_norm <= cfg.eq_tol && out.final_cone_violation <= cfg.ineq_tol;
  return out;
}

bool validate_stability(const StableState& s, const SceneSpec& scene, double hold_time,
                        double tol) {
  check_config_shape(s.config, scene);
  StepOutcome out = step(s.config, zero_action(scene, hold_time), scene);
  if (out.diverged) return false;
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    const double drift = (out.state.object_poses[i].pos - s.config.object_poses[i].pos).norm();
    if (drift >= tol) return false;
    if (out.state.object_vels[i].lin.norm() >= 0.05) return false;
  }
  return true;
}

std::vector<StableState> sample_stable_states(int m, int max_attempts_per_state,
                                              const SceneSpec& scene, std::uint64_t seed,
                                              const SolverSettings& cfg, ExecPolicy exec) {
  if (m < 1) throw ValidationError("need m >= 1 stable states");
  if (max_attempts_per_state < 1) throw ValidationError("need at least one attempt per state");
  scene.validate();

  auto attempt = [&](int i, int j) -> std::optional<StableState> {
    try {
      Rng rng_a(derive_seed(seed, streams::kAssignment, static_cast<std::uint64_t>(i),
                            static_cast<std::uint64_t>(j)));
      ContactAssignment assignment = sample_contact_assignment(scene, rng_a);
      Rng rng_x(derive_seed(seed, streams::kXbar, static_cast<std::uint64_t>(i),
                            static_cast<std::uint64_t>(j)));
      SystemState x_bar = sample_x_bar(scene, rng_x);
      ProjectionOutcome po = project_to_stable(x_bar, assignment, scene, cfg);
      if (!po.converged) return std::nullopt;
      if (min_separation(po.state.config, scene) < -1e-3) return std::nullopt;
      if (!validate_stability(po.state, scene)) return std::nullopt;
      return po.state;
    } catch (const std::exception&) {
      return std::nullopt;
    }
  };

  std::vector<StableState> out;
  out.reserve(static_cast<size_t>(m));
  int workers = 1;
#ifdef _OPENMP
  if (exec.parallel) workers = std::max(1, omp_get_max_threads());
#else
  (void)exec;
#endif
  for (int i = 0; i < m; ++i) {
    std::optional<StableState> found;
    for (int base = 0; base < max_attempts_per_state && !found; base += workers) {
      const int hi = std::min(base + workers, max_attempts_per_state);
      std::vector<std::optional<StableState>> slots(static_cast<size_t>(hi - base));
      if (workers > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1)
#endif
        for (int j = base; j < hi; ++j) slots[static_cast<size_t>(j - base)] = attempt(i, j);
      } else {
        for (int j = base; j < hi && !slots[0]; ++j) slots[static_cast<size_t>(j - base)] = attempt(i, j);
      }
      for (auto& s : slots) {
        if (s) {
          found = std::move(s);
          break;
        }
      }
    }
    if (!found)
      throw ExhaustedError("stable state " + std::to_string(i) + " not found within " +
                           std::to_string(max_attempts_per_state) + " attempts");
    found->id = i;
    out.push_back(std::move(*found));
  }
  return out;
}

void write_stable_states_jsonl(const std::string& path, const std::vector<StableState>& states) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot open " + path + " for writing");
  for (const StableState& s : states) {
    json j = s;
    f << j.dump() << "\n";
  }
}

std::vector<StableState> read_stable_states_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open " + path);
  std::vector<StableState> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<StableState>());
    } catch (const json::exception& e) {
      throw ValidationError("malformed stable-state line: " + std::string(e.what()));
    }
  }
  return out;
}

}  // namespace stage
