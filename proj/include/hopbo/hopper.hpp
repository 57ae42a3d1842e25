#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace hopbo::hopper {

using Vec2 = Eigen::Vector2d;
using Vec4 = Eigen::Vector4d;
using Mat4 = Eigen::Matrix4d;
using Mat24 = Eigen::Matrix<double, 2, 4>;

/// Kinematic and dynamic parameters of the planar hopper: a non-rotating
/// base with an actuated hip and knee driving two rod links.
struct HopperParams {
  double base_mass = 5.0;    // kg
  double thigh_mass = 0.5;   // kg
  double shank_mass = 0.5;   // kg
  double thigh_length = 0.35;  // m
  double shank_length = 0.35;  // m
  double thigh_inertia = 0.5 * 0.35 * 0.35 / 12.0;  // kg m^2, rod about COM
  double shank_inertia = 0.5 * 0.35 * 0.35 / 12.0;
  double gravity = 9.81;     // m/s^2
  double torque_limit = 60.0;  // N m, per joint
  double hip_min = -2.5, hip_max = 2.5;   // rad, from base-vertical
  double knee_min = 0.2, knee_max = 2.8;  // rad, relative to thigh
  double friction_coeff = 0.8;

  double total_mass() const { return base_mass + thigh_mass + shank_mass; }

  void validate() const {
    if (!(base_mass > 0 && thigh_mass > 0 && shank_mass > 0))
      throw std::invalid_argument("hopper: masses must be positive");
    if (!(thigh_length > 0 && shank_length > 0))
      throw std::invalid_argument("hopper: link lengths must be positive");
    if (!(thigh_inertia > 0 && shank_inertia > 0))
      throw std::invalid_argument("hopper: link inertias must be positive");
    if (!(friction_coeff > 0))
      throw std::invalid_argument("hopper: friction coefficient must be positive");
    if (!(std::isfinite(torque_limit) && torque_limit > 0) || !std::isfinite(hip_min) ||
        !std::isfinite(hip_max) || !std::isfinite(knee_min) || !std::isfinite(knee_max))
      throw std::invalid_argument("hopper: limits must be finite");
  }
};

/// Generalized state q = [x_base, z_base, hip angle, knee angle], qd = rates.
///
/// Angle convention: the hip angle is measured from the downward base
/// vertical, the knee angle is relative to the thigh. Link direction for
/// absolute angle a is (sin a, -cos a), so zero angles point the leg
/// straight down.
struct GenState {
  Vec4 q = Vec4::Zero();
  Vec4 qd = Vec4::Zero();
};

namespace detail {
inline Vec2 link_dir(double a) { return {std::sin(a), -std::cos(a)}; }
inline Vec2 link_tangent(double a) { return {std::cos(a), std::sin(a)}; }  // d(dir)/da
}  // namespace detail

inline Vec2 foot_position(const HopperParams& p, const Vec4& q) {
  const double a_h = q[2], a_k = q[2] + q[3];
  return Vec2(q[0], q[1]) + p.thigh_length * detail::link_dir(a_h) +
         p.shank_length * detail::link_dir(a_k);
}

inline Mat24 contact_jacobian(const HopperParams& p, const Vec4& q) {
  const double a_h = q[2], a_k = q[2] + q[3];
  const Vec2 th = p.thigh_length * detail::link_tangent(a_h);
  const Vec2 sh = p.shank_length * detail::link_tangent(a_k);
  Mat24 jac;
  jac << 1, 0, th[0] + sh[0], sh[0],
         0, 1, th[1] + sh[1], sh[1];
  return jac;
}

/// Velocity-product term of the foot acceleration, d(J_c)/dt * qd.
inline Vec2 contact_jacobian_dot_qd(const HopperParams& p, const Vec4& q, const Vec4& qd) {
  const double a_h = q[2], a_k = q[2] + q[3];
  const double w_h = qd[2], w_k = qd[2] + qd[3];
  // d/dt of the tangent is -dir * rate
  return -p.thigh_length * detail::link_dir(a_h) * w_h * w_h -
         p.shank_length * detail::link_dir(a_k) * w_k * w_k;
}

namespace detail {

// COM translation Jacobians of the three bodies (base, thigh, shank).
struct ComJacobians {
  Mat24 base, thigh, shank;
};

inline ComJacobians com_jacobians(const HopperParams& p, const Vec4& q) {
  const double a_h = q[2], a_k = q[2] + q[3];
  const Vec2 e_h = link_tangent(a_h);
  const Vec2 e_k = link_tangent(a_k);
  ComJacobians jac;
  jac.base << 1, 0, 0, 0,
              0, 1, 0, 0;
  const Vec2 t_col = 0.5 * p.thigh_length * e_h;
  jac.thigh << 1, 0, t_col[0], 0,
               0, 1, t_col[1], 0;
  const Vec2 s_col3 = p.thigh_length * e_h + 0.5 * p.shank_length * e_k;
  const Vec2 s_col4 = 0.5 * p.shank_length * e_k;
  jac.shank << 1, 0, s_col3[0], s_col4[0],
               0, 1, s_col3[1], s_col4[1];
  return jac;
}

}  // namespace detail

inline Mat4 mass_matrix(const HopperParams& p, const Vec4& q) {
  const auto jac = detail::com_jacobians(p, q);
  Mat4 m = p.base_mass * jac.base.transpose() * jac.base +
           p.thigh_mass * jac.thigh.transpose() * jac.thigh +
           p.shank_mass * jac.shank.transpose() * jac.shank;
  // angular terms: thigh spins with the hip rate, shank with hip + knee
  m(2, 2) += p.thigh_inertia + p.shank_inertia;
  m(2, 3) += p.shank_inertia;
  m(3, 2) += p.shank_inertia;
  m(3, 3) += p.shank_inertia;
  return m;
}

/// Coriolis/centrifugal generalized forces; zero at zero velocity.
inline Vec4 bias_forces(const HopperParams& p, const Vec4& q, const Vec4& qd) {
  const double a_h = q[2], a_k = q[2] + q[3];
  const double w_h = qd[2], w_k = qd[2] + qd[3];
  // centripetal COM accelerations (the J-dot qd terms); angular rows are
  // velocity-independent so they contribute nothing
  const Vec2 acc_thigh = -0.5 * p.thigh_length * detail::link_dir(a_h) * w_h * w_h;
  const Vec2 acc_shank = -p.thigh_length * detail::link_dir(a_h) * w_h * w_h -
                         0.5 * p.shank_length * detail::link_dir(a_k) * w_k * w_k;
  const auto jac = detail::com_jacobians(p, q);
  return p.thigh_mass * jac.thigh.transpose() * acc_thigh +
         p.shank_mass * jac.shank.transpose() * acc_shank;
}

inline Vec4 gravity_forces(const HopperParams& p, const Vec4& q) {
  const auto jac = detail::com_jacobians(p, q);
  const Vec2 weight(0.0, p.gravity);
  return p.base_mass * jac.base.transpose() * weight +
         p.thigh_mass * jac.thigh.transpose() * weight +
         p.shank_mass * jac.shank.transpose() * weight;
}

inline Vec2 com_position(const HopperParams& p, const Vec4& q) {
  const Vec2 base(q[0], q[1]);
  const Vec2 thigh = base + 0.5 * p.thigh_length * detail::link_dir(q[2]);
  const Vec2 shank = base + p.thigh_length * detail::link_dir(q[2]) +
                     0.5 * p.shank_length * detail::link_dir(q[2] + q[3]);
  return (p.base_mass * base + p.thigh_mass * thigh + p.shank_mass * shank) / p.total_mass();
}

inline Mat24 com_jacobian(const HopperParams& p, const Vec4& q) {
  const auto jac = detail::com_jacobians(p, q);
  return (p.base_mass * jac.base + p.thigh_mass * jac.thigh + p.shank_mass * jac.shank) /
         p.total_mass();
}

/// Maps joint torques u = [u_hip, u_knee] into generalized forces.
inline Vec4 apply_selection(const Vec2& u) { return Vec4(0.0, 0.0, u[0], u[1]); }

/// Unconstrained (ballistic) generalized accelerations.
inline Vec4 flight_dynamics(const HopperParams& p, const GenState& s, const Vec2& u) {
  const Mat4 m = mass_matrix(p, s.q);
  const Vec4 rhs = apply_selection(u) - bias_forces(p, s.q, s.qd) - gravity_forces(p, s.q);
  Eigen::LDLT<Mat4> ldlt(m);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("hopper: singular mass matrix");
  return ldlt.solve(rhs);
}

struct StanceResult {
  Vec4 qddot;
  Vec2 contact_force;
};

/// Accelerations and ground reaction force with the point foot pinned:
/// solves the contact KKT system so the foot acceleration vanishes.
inline StanceResult stance_dynamics(const HopperParams& p, const GenState& s, const Vec2& u) {
  const Mat4 m = mass_matrix(p, s.q);
  const Mat24 jac = contact_jacobian(p, s.q);
  Eigen::Matrix<double, 6, 6> kkt = Eigen::Matrix<double, 6, 6>::Zero();
  kkt.topLeftCorner<4, 4>() = m;
  kkt.topRightCorner<4, 2>() = -jac.transpose();
  kkt.bottomLeftCorner<2, 4>() = -jac;
  Eigen::Matrix<double, 6, 1> rhs;
  rhs.head<4>() = apply_selection(u) - bias_forces(p, s.q, s.qd) - gravity_forces(p, s.q);
  rhs.tail<2>() = contact_jacobian_dot_qd(p, s.q, s.qd);
  Eigen::FullPivLU<Eigen::Matrix<double, 6, 6>> lu(kkt);
  if (!lu.isInvertible())
    throw std::runtime_error("hopper: singular stance system (kinematic singularity)");
  const Eigen::Matrix<double, 6, 1> sol = lu.solve(rhs);
  return {sol.head<4>(), sol.tail<2>()};
}

inline double kinetic_energy(const HopperParams& p, const GenState& s) {
  return 0.5 * s.qd.dot(mass_matrix(p, s.q) * s.qd);
}

inline double potential_energy(const HopperParams& p, const Vec4& q) {
  const Vec2 base(q[0], q[1]);
  const double z_thigh = q[1] - 0.5 * p.thigh_length * std::cos(q[2]);
  const double z_shank = q[1] - p.thigh_length * std::cos(q[2]) -
                         0.5 * p.shank_length * std::cos(q[2] + q[3]);
  return p.gravity * (p.base_mass * q[1] + p.thigh_mass * z_thigh + p.shank_mass * z_shank);
}

struct IkResult {
  double hip = 0.0;
  double knee = 0.0;
  bool reachable = false;
};

/// Leg inverse kinematics for a foot target relative to the base,
/// positive-knee branch. Unreachable targets leave reachable == false.
inline IkResult leg_inverse_kinematics(const HopperParams& p, const Vec2& rel_foot) {
  const double l1 = p.thigh_length, l2 = p.shank_length;
  const double d2 = rel_foot.squaredNorm();
  const double c = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
  IkResult out;
  if (c < -1.0 || c > 1.0) return out;
  out.knee = std::acos(c);
  const double leg_angle = std::atan2(rel_foot[0], -rel_foot[1]);
  out.hip = leg_angle - std::atan2(l2 * std::sin(out.knee), l1 + l2 * std::cos(out.knee));
  if (out.hip > M_PI) out.hip -= 2.0 * M_PI;
  if (out.hip <= -M_PI) out.hip += 2.0 * M_PI;
  out.reachable = true;
  return out;
}

/// Rest posture with the foot directly below the base: knee bent to the
/// nominal angle, base height set by the resulting leg extension.
struct NominalStance {
  double knee_angle = 0.8;
  double hip_angle = 0.0;
  double base_height = 0.0;  // above the foot
};

inline NominalStance nominal_stance(const HopperParams& p, double knee_angle = 0.8) {
  NominalStance ns;
  ns.knee_angle = knee_angle;
  const double l1 = p.thigh_length, l2 = p.shank_length;
  ns.base_height =
      std::sqrt(l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * std::cos(knee_angle));
  ns.hip_angle = -std::atan2(l2 * std::sin(knee_angle), l1 + l2 * std::cos(knee_angle));
  return ns;
}

}  // namespace hopbo::hopper
