#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "stage/rng.h"

namespace stage {

using Vec3 = Eigen::Vector3d;
using Quat = Eigen::Quaterniond;

inline Eigen::Matrix3d skew(const Vec3& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Rotation of v by q, expanded as the polynomial
//   v + 2w(u x v) + 2u(u.v) - 2(u.u)v,   u = (x,y,z).
// Smooth in all four components, also off the unit sphere; the NLP residuals
// differentiate exactly this map.
inline Vec3 quat_rotate(const Quat& q, const Vec3& v) {
  const Vec3 u(q.x(), q.y(), q.z());
  return v + 2.0 * q.w() * u.cross(v) + 2.0 * u * u.dot(v) - 2.0 * u.dot(u) * v;
}

inline Vec3 quat_rotate_inv(const Quat& q, const Vec3& v) {
  return quat_rotate(q.conjugate(), v);
}

// d(quat_rotate(q,v))/dq as a 3x4, columns ordered (w,x,y,z).
inline Eigen::Matrix<double, 3, 4> quat_rotate_jac_q(const Quat& q, const Vec3& v) {
  const Vec3 u(q.x(), q.y(), q.z());
  Eigen::Matrix<double, 3, 4> J;
  J.col(0) = 2.0 * u.cross(v);
  Eigen::Matrix3d Ju = -2.0 * q.w() * skew(v) +
                       2.0 * (u.dot(v) * Eigen::Matrix3d::Identity() + u * v.transpose()) -
                       4.0 * v * u.transpose();
  J.block<3, 3>(0, 1) = Ju;
  return J;
}

// Same for the inverse rotation (conjugated quaternion), chain through the
// sign flip of the vector part.
inline Eigen::Matrix<double, 3, 4> quat_rotate_inv_jac_q(const Quat& q, const Vec3& v) {
  Eigen::Matrix<double, 3, 4> J = quat_rotate_jac_q(q.conjugate(), v);
  J.col(1) = -J.col(1);
  J.col(2) = -J.col(2);
  J.col(3) = -J.col(3);
  return J;
}

// d(quat_rotate(q,v))/dv = R(q) for unit q; for general q the Jacobian of the
// polynomial map above.
inline Eigen::Matrix3d quat_rotate_jac_v(const Quat& q) {
  const Vec3 u(q.x(), q.y(), q.z());
  return Eigen::Matrix3d::Identity() + 2.0 * q.w() * skew(u) + 2.0 * u * u.transpose() -
         2.0 * u.dot(u) * Eigen::Matrix3d::Identity();
}

// Geodesic angle between two unit quaternions in radians, sign-invariant.
inline double quat_angle(const Quat& a, const Quat& b) {
  double d = std::abs(a.w() * b.w() + a.x() * b.x() + a.y() * b.y() + a.z() * b.z());
  return 2.0 * std::acos(std::min(1.0, d));
}

// exp map: rotation by omega*dt composed onto q, norm preserving.
inline Quat quat_integrate(const Quat& q, const Vec3& omega, double dt) {
  const Vec3 half = 0.5 * dt * omega;
  const double a = half.norm();
  Quat dq;
  if (a < 1e-12) {
    dq = Quat(1.0, half.x(), half.y(), half.z());
  } else {
    const double s = std::sin(a) / a;
    dq = Quat(std::cos(a), s * half.x(), s * half.y(), s * half.z());
  }
  Quat out = dq * q;
  out.normalize();
  return out;
}

// Shoemake subgroup method.
inline Quat uniform_quat(Rng& rng) {
  const double u1 = rng.uniform();
  const double u2 = rng.uniform();
  const double u3 = rng.uniform();
  const double two_pi = 6.283185307179586477;
  const double r1 = std::sqrt(1.0 - u1);
  const double r2 = std::sqrt(u1);
  return Quat(r2 * std::cos(two_pi * u3), r1 * std::sin(two_pi * u2),
              r1 * std::cos(two_pi * u2), r2 * std::sin(two_pi * u3));
}

inline Vec3 clamp_norm(const Vec3& v, double max_norm) {
  const double n = v.norm();
  if (n <= max_norm || n == 0.0) return v;
  return v * (max_norm / n);
}

}  // namespace stage
