#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hopbo/action.hpp"
#include "hopbo/hopper.hpp"
#include "hopbo/terrain.hpp"

namespace hopbo::collocation {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using hopper::Mat24;
using hopper::Mat4;
using hopper::Vec2;
using hopper::Vec4;

enum class Phase { Stance, Flight };

struct PhaseSegment {
  Phase phase;
  int nodes;
};

inline std::vector<PhaseSegment> schedule_from_action(const Action& action) {
  std::vector<PhaseSegment> segments;
  for (int i = 0; i < 5 && action.nodes[i] != 0; ++i)
    segments.push_back({i % 2 == 0 ? Phase::Stance : Phase::Flight, action.nodes[i]});
  return segments;
}

/// Merit weighting of trajectory cost against squared constraint violation.
/// Non-finite solves are scored at the cap, which tanh squashes to ~1.
struct MeritWeights {
  double sigma1 = 1.0;
  double sigma2 = 10.0;
  double sigma3 = 10.0;
  double cap = 10.0;

  void validate() const {
    if (!(sigma1 > 0 && sigma2 > 0 && sigma3 > 0))
      throw std::invalid_argument("merit weights must be positive");
  }
};

struct SolverConfig {
  double dt = 0.05;        // node duration (s)
  double feas_tol = 1e-6;  // feasibility tolerance on every constraint
  int max_inner = 300;     // Gauss-Newton iterations per outer round
  int max_outer = 10;      // multiplier / penalty updates
  double penalty_init = 100.0;
  double penalty_scale = 10.0;
  double penalty_max = 1e8;
  double grad_tol = 1e-8;
  double step_tol = 1e-11;
  double guess_apex = 0.1;  // base lift of the seed trajectory during flight (m)
  // Solver-internal force shaping, excluded from the reported objective and
  // the merit. The trapezoidal defects average adjacent accelerations, so a
  // checkerboard oscillation of the per-node contact forces is defect-neutral;
  // penalizing force differences within a stance phase resolves that null
  // space, and a much weaker absolute pull keeps lone forces determined.
  double force_smooth_reg = 1e-2;
  double force_reg = 1e-5;
  bool verbose = false;
};

struct ConstraintInfo {
  enum Kind { Equality, Inequality } kind;
  std::string label;
  int node;  // -1 for interval/boundary constraints that span nodes
};

/// Direct-collocation transcription of the hopping task for one fixed
/// contact schedule: trapezoidal dynamics defects over phase-tagged nodes,
/// ground contact and friction-cone constraints at stance nodes, clearance
/// at flight nodes, joint and torque bounds, and rest-to-rest boundary
/// conditions from the start posture to the goal distance.
///
/// Decision layout: per node [q(4), qd(4), u(2)], then one ground reaction
/// force pair per stance node appended after all node blocks.
class NlpProblem {
public:
  NlpProblem(const Context& context, std::vector<PhaseSegment> segments,
             const hopper::HopperParams& params, terrain::TerrainModel terrain,
             const SolverConfig& cfg)
      : params_(params), terrain_(std::move(terrain)), dt_(cfg.dt),
        goal_(context.goal_distance) {
    params_.validate();
    if (segments.empty() || segments.front().phase != Phase::Stance)
      throw std::invalid_argument("nlp: schedule must start with a stance phase");
    if (goal_ < 0.0 || goal_ > 1.0)
      throw std::invalid_argument("nlp: goal distance outside [0, 1]");
    if (goal_ < terrain_.x_min() || goal_ > terrain_.x_max())
      throw std::invalid_argument("nlp: goal outside terrain range");
    if (terrain_.x_min() > 0.0)
      throw std::invalid_argument("nlp: terrain must cover the start position");

    for (const auto& seg : segments) {
      if (seg.nodes <= 0) throw std::invalid_argument("nlp: phase node counts must be > 0");
      for (int k = 0; k < seg.nodes; ++k) phase_.push_back(seg.phase);
    }
    if (num_nodes() < 2) throw std::invalid_argument("nlp: need at least 2 nodes");
    segments_ = std::move(segments);

    stance_ordinal_.assign(phase_.size(), -1);
    for (size_t i = 0; i < phase_.size(); ++i)
      if (phase_[i] == Phase::Stance) stance_ordinal_[i] = num_stance_++;

    const auto ns = hopper::nominal_stance(params_);
    q_nominal_ = Vec4(0.0, terrain_.height_at(0.0) + ns.base_height, ns.hip_angle,
                      ns.knee_angle);

    build_registry();
  }

  int num_nodes() const { return static_cast<int>(phase_.size()); }
  int num_stance_nodes() const { return num_stance_; }
  int num_vars() const { return 10 * num_nodes() + 2 * num_stance_; }
  double dt() const { return dt_; }
  double goal() const { return goal_; }
  Phase node_phase(int i) const { return phase_[i]; }
  const std::vector<PhaseSegment>& segments() const { return segments_; }
  const Vec4& nominal_configuration() const { return q_nominal_; }
  const hopper::HopperParams& params() const { return params_; }
  const terrain::TerrainModel& terrain() const { return terrain_; }

  int q_offset(int i) const { return 10 * i; }
  int qd_offset(int i) const { return 10 * i + 4; }
  int u_offset(int i) const { return 10 * i + 8; }
  bool has_force(int i) const { return stance_ordinal_[i] >= 0; }
  int force_offset(int i) const { return 10 * num_nodes() + 2 * stance_ordinal_[i]; }

  const std::vector<ConstraintInfo>& equality_registry() const { return eq_info_; }
  const std::vector<ConstraintInfo>& inequality_registry() const { return ineq_info_; }
  int num_equalities() const { return static_cast<int>(eq_info_.size()); }
  int num_inequalities() const { return static_cast<int>(ineq_info_.size()); }

  /// Effort objective: dt * sum over nodes of |u|^2 / torque_limit^2.
  double objective(const VectorXd& y) const {
    double s = 0.0;
    for (int i = 0; i < num_nodes(); ++i)
      s += y.segment<2>(u_offset(i)).squaredNorm();
    return s * dt_ / (params_.torque_limit * params_.torque_limit);
  }

  struct Eval {
    VectorXd g;  // equality residuals, registry order
    VectorXd h;  // inequality values (feasible when <= 0), registry order
    double f_obj = 0.0;
  };

  struct EvalJac : Eval {
    std::vector<Eigen::Triplet<double>> jac_g;
    std::vector<Eigen::Triplet<double>> jac_h;
  };

  Eval evaluate(const VectorXd& y) const {
    Eval out;
    walk(y, out, nullptr);
    return out;
  }

  EvalJac evaluate_with_jacobian(const VectorXd& y) const {
    EvalJac out;
    walk(y, out, &out);
    return out;
  }

private:
  // Per-node acceleration and its derivatives. Input/force blocks come from
  // the factored mass matrix; configuration/velocity blocks use central
  // differences of the closed-form dynamics.
  struct NodeDyn {
    Vec4 a;
    Mat4 da_dq, da_dqd;
    Eigen::Matrix<double, 4, 2> da_du, da_dl;
  };

  Vec4 acceleration(const Vec4& q, const Vec4& qd, const Vec2& u, const Vec2& lam,
                    bool stance) const {
    const Mat4 m = hopper::mass_matrix(params_, q);
    Vec4 rhs = hopper::apply_selection(u) - hopper::bias_forces(params_, q, qd) -
               hopper::gravity_forces(params_, q);
    if (stance) rhs += hopper::contact_jacobian(params_, q).transpose() * lam;
    return m.ldlt().solve(rhs);
  }

  NodeDyn node_dynamics(const Vec4& q, const Vec4& qd, const Vec2& u, const Vec2& lam,
                        bool stance) const {
    NodeDyn nd;
    const Mat4 m = hopper::mass_matrix(params_, q);
    const Eigen::LDLT<Mat4> ldlt(m);
    const Mat24 jc = hopper::contact_jacobian(params_, q);
    Vec4 rhs = hopper::apply_selection(u) - hopper::bias_forces(params_, q, qd) -
               hopper::gravity_forces(params_, q);
    if (stance) rhs += jc.transpose() * lam;
    nd.a = ldlt.solve(rhs);

    Eigen::Matrix<double, 4, 2> sel = Eigen::Matrix<double, 4, 2>::Zero();
    sel(2, 0) = 1.0;
    sel(3, 1) = 1.0;
    nd.da_du = ldlt.solve(sel);
    if (stance)
      nd.da_dl = ldlt.solve(Eigen::Matrix<double, 4, 2>(jc.transpose()));
    else
      nd.da_dl.setZero();

    for (int j = 0; j < 4; ++j) {
      const double h = 1e-6 * (1.0 + std::abs(q[j]));
      Vec4 qp = q, qm = q;
      qp[j] += h;
      qm[j] -= h;
      nd.da_dq.col(j) =
          (acceleration(qp, qd, u, lam, stance) - acceleration(qm, qd, u, lam, stance)) /
          (2.0 * h);
    }
    for (int j = 0; j < 4; ++j) {
      const double h = 1e-6 * (1.0 + std::abs(qd[j]));
      Vec4 vp = qd, vm = qd;
      vp[j] += h;
      vm[j] -= h;
      // mass matrix unchanged: reuse the factorization on the velocity terms
      const Vec4 bp = hopper::bias_forces(params_, q, vp);
      const Vec4 bm = hopper::bias_forces(params_, q, vm);
      nd.da_dqd.col(j) = ldlt.solve(Vec4(bm - bp)) / (2.0 * h);
    }
    return nd;
  }

  // Terrain sample at a foot query, clamped to the sampled range with a
  // linear extension so solver iterates outside the map keep a gradient.
  struct TerrainSample {
    double h, s, curv;
  };
  TerrainSample sample_terrain(double x) const {
    const double xc = std::clamp(x, terrain_.x_min(), terrain_.x_max());
    TerrainSample ts{terrain_.height_at(xc), terrain_.slope_at(xc),
                     terrain_.curvature_at(xc)};
    if (x != xc) {
      ts.h += ts.s * (x - xc);
      ts.curv = 0.0;
    }
    return ts;
  }

  void build_registry() {
    const int n = num_nodes();
    auto eq = [&](const std::string& label, int node, int rows) {
      for (int r = 0; r < rows; ++r) eq_info_.push_back({ConstraintInfo::Equality, label, node});
    };
    auto ineq = [&](const std::string& label, int node, int rows) {
      for (int r = 0; r < rows; ++r)
        ineq_info_.push_back({ConstraintInfo::Inequality, label, node});
    };
    eq("init_q", 0, 4);
    eq("init_qd", 0, 4);
    for (int i = 0; i + 1 < n; ++i) {
      eq("defect_q", i, 4);
      eq("defect_qd", i, 4);
    }
    for (int i = 0; i < n; ++i) {
      if (phase_[i] != Phase::Stance) continue;
      eq("contact_height", i, 1);
      const bool touchdown = i > 0 && phase_[i - 1] == Phase::Flight;
      eq(touchdown ? "touchdown_velocity" : "contact_velocity", i, 2);
    }
    eq("final_qd", n - 1, 4);
    eq("final_base_x", n - 1, 1);

    for (int i = 0; i < n; ++i) {
      if (phase_[i] != Phase::Stance) continue;
      ineq("normal_force", i, 1);
      ineq("friction_cone", i, 2);
    }
    for (int i = 0; i < n; ++i)
      if (phase_[i] == Phase::Flight) ineq("flight_clearance", i, 1);
    for (int i = 0; i < n; ++i) ineq("joint_limits", i, 4);
    for (int i = 0; i < n; ++i) ineq("torque_limits", i, 4);
  }

  // Single evaluation pass; fills residuals in registry order and, when jac
  // is non-null, the matching Jacobian triplets.
  void walk(const VectorXd& y, Eval& out, EvalJac* jac) const {
    if (y.size() != num_vars()) throw std::invalid_argument("nlp: decision vector size");
    const int n = num_nodes();
    out.g.resize(num_equalities());
    out.h.resize(num_inequalities());
    out.f_obj = objective(y);

    std::vector<NodeDyn> dyn;
    std::vector<Vec4> accel(n);
    if (jac) dyn.resize(n);
    for (int i = 0; i < n; ++i) {
      const Vec4 q = y.segment<4>(q_offset(i));
      const Vec4 qd = y.segment<4>(qd_offset(i));
      const Vec2 u = y.segment<2>(u_offset(i));
      const Vec2 lam = has_force(i) ? Vec2(y.segment<2>(force_offset(i))) : Vec2::Zero();
      if (jac) {
        dyn[i] = node_dynamics(q, qd, u, lam, has_force(i));
        accel[i] = dyn[i].a;
      } else {
        accel[i] = acceleration(q, qd, u, lam, has_force(i));
      }
    }

    int ge = 0;  // running equality row
    auto add_g = [&](double value) { out.g[ge++] = value; };
    auto gj = [&](int row, int col, double value) {
      if (jac && value != 0.0) jac->jac_g.emplace_back(row, col, value);
    };

    // initial configuration and rest
    for (int j = 0; j < 4; ++j) {
      gj(ge, q_offset(0) + j, 1.0);
      add_g(y[q_offset(0) + j] - q_nominal_[j]);
    }
    for (int j = 0; j < 4; ++j) {
      gj(ge, qd_offset(0) + j, 1.0);
      add_g(y[qd_offset(0) + j]);
    }

    // trapezoidal defects
    const double half_dt = 0.5 * dt_;
    for (int i = 0; i + 1 < n; ++i) {
      for (int j = 0; j < 4; ++j) {
        gj(ge, q_offset(i + 1) + j, 1.0);
        gj(ge, q_offset(i) + j, -1.0);
        gj(ge, qd_offset(i) + j, -half_dt);
        gj(ge, qd_offset(i + 1) + j, -half_dt);
        add_g(y[q_offset(i + 1) + j] - y[q_offset(i) + j] -
              half_dt * (y[qd_offset(i) + j] + y[qd_offset(i + 1) + j]));
      }
      for (int j = 0; j < 4; ++j) {
        const int row = ge;
        gj(row, qd_offset(i + 1) + j, 1.0);
        gj(row, qd_offset(i) + j, -1.0);
        if (jac) {
          for (int node : {i, i + 1}) {
            const NodeDyn& nd = dyn[node];
            for (int c = 0; c < 4; ++c) {
              gj(row, q_offset(node) + c, -half_dt * nd.da_dq(j, c));
              gj(row, qd_offset(node) + c, -half_dt * nd.da_dqd(j, c));
            }
            for (int c = 0; c < 2; ++c) {
              gj(row, u_offset(node) + c, -half_dt * nd.da_du(j, c));
              if (has_force(node)) gj(row, force_offset(node) + c, -half_dt * nd.da_dl(j, c));
            }
          }
        }
        add_g(y[qd_offset(i + 1) + j] - y[qd_offset(i) + j] -
              half_dt * (accel[i][j] + accel[i + 1][j]));
      }
    }

    // stance contact: foot on the surface and stationary
    for (int i = 0; i < n; ++i) {
      if (phase_[i] != Phase::Stance) continue;
      const Vec4 q = y.segment<4>(q_offset(i));
      const Vec4 qd = y.segment<4>(qd_offset(i));
      const Vec2 foot = hopper::foot_position(params_, q);
      const Mat24 jc = hopper::contact_jacobian(params_, q);
      const TerrainSample ts = sample_terrain(foot[0]);
      for (int c = 0; c < 4; ++c) gj(ge, q_offset(i) + c, jc(1, c) - ts.s * jc(0, c));
      add_g(foot[1] - ts.h);

      const Vec2 v = jc * qd;
      const double a_h = q[2], a_k = q[2] + q[3];
      const double w_h = qd[2], w_k = qd[2] + qd[3];
      const double l1 = params_.thigh_length, l2 = params_.shank_length;
      // d(J qd)/d(hip), d(J qd)/d(knee)
      const Vec2 dv_dhip(-l1 * std::sin(a_h) * w_h - l2 * std::sin(a_k) * w_k,
                         l1 * std::cos(a_h) * w_h + l2 * std::cos(a_k) * w_k);
      const Vec2 dv_dknee(-l2 * std::sin(a_k) * w_k, l2 * std::cos(a_k) * w_k);
      for (int r = 0; r < 2; ++r) {
        gj(ge, q_offset(i) + 2, r == 0 ? dv_dhip[0] : dv_dhip[1]);
        gj(ge, q_offset(i) + 3, r == 0 ? dv_dknee[0] : dv_dknee[1]);
        for (int c = 0; c < 4; ++c) gj(ge, qd_offset(i) + c, jc(r, c));
        add_g(v[r]);
      }
    }

    // terminal rest at the goal
    for (int j = 0; j < 4; ++j) {
      gj(ge, qd_offset(n - 1) + j, 1.0);
      add_g(y[qd_offset(n - 1) + j]);
    }
    gj(ge, q_offset(n - 1) + 0, 1.0);
    add_g(y[q_offset(n - 1) + 0] - goal_);

    if (ge != num_equalities()) throw std::logic_error("nlp: equality registry mismatch");

    int hi = 0;  // running inequality row
    auto add_h = [&](double value) { out.h[hi++] = value; };
    auto hj = [&](int row, int col, double value) {
      if (jac && value != 0.0) jac->jac_h.emplace_back(row, col, value);
    };

    // friction cone against the unnormalized surface normal (-s, 1); the
    // feasible set is the exact planar cone
    const double mu_f = params_.friction_coeff;
    for (int i = 0; i < n; ++i) {
      if (phase_[i] != Phase::Stance) continue;
      const Vec4 q = y.segment<4>(q_offset(i));
      const Vec2 lam = y.segment<2>(force_offset(i));
      const Vec2 foot = hopper::foot_position(params_, q);
      const Mat24 jc = hopper::contact_jacobian(params_, q);
      const TerrainSample ts = sample_terrain(foot[0]);
      const double normal = -ts.s * lam[0] + lam[1];
      const double tangent = lam[0] + ts.s * lam[1];
      // d(slope)/dq through the foot x coordinate
      Vec4 ds_dq;
      for (int c = 0; c < 4; ++c) ds_dq[c] = ts.curv * jc(0, c);

      hj(hi, force_offset(i) + 0, ts.s);
      hj(hi, force_offset(i) + 1, -1.0);
      for (int c = 0; c < 4; ++c) hj(hi, q_offset(i) + c, lam[0] * ds_dq[c]);
      add_h(-normal);

      hj(hi, force_offset(i) + 0, 1.0 + mu_f * ts.s);
      hj(hi, force_offset(i) + 1, ts.s - mu_f);
      for (int c = 0; c < 4; ++c)
        hj(hi, q_offset(i) + c, (lam[1] + mu_f * lam[0]) * ds_dq[c]);
      add_h(tangent - mu_f * normal);

      hj(hi, force_offset(i) + 0, -1.0 + mu_f * ts.s);
      hj(hi, force_offset(i) + 1, -ts.s - mu_f);
      for (int c = 0; c < 4; ++c)
        hj(hi, q_offset(i) + c, (-lam[1] + mu_f * lam[0]) * ds_dq[c]);
      add_h(-tangent - mu_f * normal);
    }

    for (int i = 0; i < n; ++i) {
      if (phase_[i] != Phase::Flight) continue;
      const Vec4 q = y.segment<4>(q_offset(i));
      const Vec2 foot = hopper::foot_position(params_, q);
      const Mat24 jc = hopper::contact_jacobian(params_, q);
      const TerrainSample ts = sample_terrain(foot[0]);
      for (int c = 0; c < 4; ++c) hj(hi, q_offset(i) + c, ts.s * jc(0, c) - jc(1, c));
      add_h(ts.h - foot[1]);
    }

    for (int i = 0; i < n; ++i) {
      const double hip = y[q_offset(i) + 2], knee = y[q_offset(i) + 3];
      hj(hi, q_offset(i) + 2, 1.0);
      add_h(hip - params_.hip_max);
      hj(hi, q_offset(i) + 2, -1.0);
      add_h(params_.hip_min - hip);
      hj(hi, q_offset(i) + 3, 1.0);
      add_h(knee - params_.knee_max);
      hj(hi, q_offset(i) + 3, -1.0);
      add_h(params_.knee_min - knee);
    }
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < 2; ++j) {
        const double u = y[u_offset(i) + j];
        hj(hi, u_offset(i) + j, 1.0);
        add_h(u - params_.torque_limit);
        hj(hi, u_offset(i) + j, -1.0);
        add_h(-u - params_.torque_limit);
      }
    }

    if (hi != num_inequalities()) throw std::logic_error("nlp: inequality registry mismatch");
  }

  hopper::HopperParams params_;
  terrain::TerrainModel terrain_;
  double dt_;
  double goal_;
  std::vector<Phase> phase_;
  std::vector<PhaseSegment> segments_;
  std::vector<int> stance_ordinal_;
  int num_stance_ = 0;
  Vec4 q_nominal_;
  std::vector<ConstraintInfo> eq_info_, ineq_info_;
};

inline NlpProblem build_nlp(const Context& context, const Action& action,
                            const hopper::HopperParams& params,
                            const terrain::TerrainModel& terrain, const SolverConfig& cfg) {
  const Action canonical = canonicalize(action.nodes);  // rejects non-canonical input
  return NlpProblem(context, schedule_from_action(canonical), params, terrain, cfg);
}

/// Deterministic seed trajectory: base translates linearly to the goal and
/// lifts by a fixed apex during flight, footholds anchor under the stance
/// phases, joints follow from leg inverse kinematics, torques start at zero.
inline VectorXd initial_guess(const NlpProblem& problem, const SolverConfig& cfg) {
  const int n = problem.num_nodes();
  const auto& params = problem.params();
  const auto& terr = problem.terrain();
  const Vec4 q_nom = problem.nominal_configuration();
  const double goal = problem.goal();

  // per-node foot target
  std::vector<double> fx(n), fz(n);
  {
    struct Seg {
      Phase phase;
      int begin, end;  // [begin, end)
    };
    std::vector<Seg> segs;
    int at = 0;
    for (const auto& s : problem.segments()) {
      segs.push_back({s.phase, at, at + s.nodes});
      at += s.nodes;
    }
    const int last_stance = static_cast<int>(segs.size()) - 1;
    std::vector<double> anchor(segs.size(), 0.0);
    for (size_t s = 0; s < segs.size(); ++s) {
      if (segs[s].phase != Phase::Stance) continue;
      if (s == 0)
        anchor[s] = 0.0;
      else if (static_cast<int>(s) == last_stance)
        anchor[s] = goal;
      else
        anchor[s] = goal * (0.5 * (segs[s].begin + segs[s].end - 1)) / (n - 1);
      anchor[s] = std::clamp(anchor[s], terr.x_min(), terr.x_max());
      for (int i = segs[s].begin; i < segs[s].end; ++i) {
        fx[i] = anchor[s];
        fz[i] = terr.height_at(anchor[s]);
      }
    }
    for (size_t s = 0; s < segs.size(); ++s) {
      if (segs[s].phase != Phase::Flight) continue;
      const double xa = anchor[s - 1], xb = anchor[s + 1];
      const double za = terr.height_at(xa), zb = terr.height_at(xb);
      const int span = segs[s].end - segs[s].begin + 1;
      for (int i = segs[s].begin; i < segs[s].end; ++i) {
        const double tau = static_cast<double>(i - segs[s].begin + 1) / span;
        fx[i] = xa + tau * (xb - xa);
        fz[i] = za + tau * (zb - za) + 0.5 * cfg.guess_apex * std::sin(M_PI * tau);
      }
    }
  }

  VectorXd y = VectorXd::Zero(problem.num_vars());
  const double z_nom = q_nom[1] - terr.height_at(0.0);
  for (int i = 0; i < n; ++i) {
    const double tau = n > 1 ? static_cast<double>(i) / (n - 1) : 0.0;
    const double xb = goal * tau;
    const double ground = terr.height_at(std::clamp(fx[i], terr.x_min(), terr.x_max()));
    double zb = ground + z_nom;
    if (problem.node_phase(i) == Phase::Flight) zb += cfg.guess_apex;
    y[problem.q_offset(i) + 0] = xb;
    y[problem.q_offset(i) + 1] = zb;
    const auto ik =
        hopper::leg_inverse_kinematics(params, Vec2(fx[i] - xb, fz[i] - zb));
    y[problem.q_offset(i) + 2] = ik.reachable ? ik.hip : q_nom[2];
    y[problem.q_offset(i) + 3]
        = ik.reachable ? std::clamp(ik.knee, params.knee_min, params.knee_max) : q_nom[3];
    if (problem.has_force(i))
      y[problem.force_offset(i) + 1] = params.total_mass() * params.gravity;
  }
  // velocities from differenced positions; the boundary nodes rest
  for (int i = 1; i + 1 < n; ++i)
    for (int j = 0; j < 4; ++j)
      y[problem.qd_offset(i) + j] =
          (y[problem.q_offset(i + 1) + j] - y[problem.q_offset(i - 1) + j]) /
          (2.0 * problem.dt());
  return y;
}

struct NlpSolution {
  VectorXd y;
  double objective = std::numeric_limits<double>::quiet_NaN();
  VectorXd equality_residuals;
  VectorXd inequality_values;
  bool converged = false;
  int iterations = 0;        // total inner iterations
  int outer_iterations = 0;
  double max_equality_violation = std::numeric_limits<double>::infinity();
  double max_inequality_violation = std::numeric_limits<double>::infinity();
  std::string diagnostics;
};

namespace detail {

// One augmented-Lagrangian subproblem, minimized by damped Gauss-Newton on
// the residual stack [objective rows; sqrt(mu)(g + lamE/2mu); sqrt(mu) max(0, h + lamI/2mu)].
struct InnerResult {
  int iterations = 0;
  bool stationary = false;
  bool finite = true;
};

class AugLagSolver {
public:
  AugLagSolver(const NlpProblem& problem, const SolverConfig& cfg)
      : problem_(problem), cfg_(cfg), n_(problem.num_vars()),
        obj_weight_(std::sqrt(cfg.dt) / problem.params().torque_limit) {}

  NlpSolution solve(const VectorXd& y0) {
    NlpSolution sol;
    VectorXd y = y0;
    if (y.size() != n_ || !y.allFinite()) {
      sol.y = VectorXd::Zero(n_);
      sol.diagnostics = "bad initial point";
      finalize(sol.y, sol);
      return sol;
    }

    VectorXd lam_e = VectorXd::Zero(problem_.num_equalities());
    VectorXd lam_i = VectorXd::Zero(problem_.num_inequalities());
    double mu = cfg_.penalty_init;
    double prev_viol = std::numeric_limits<double>::infinity();
    int total_inner = 0;
    int stalled = 0;
    bool converged = false;
    int outer = 0;

    for (; outer < cfg_.max_outer; ++outer) {
      const InnerResult inner = minimize(y, lam_e, lam_i, mu);
      total_inner += inner.iterations;
      if (!inner.finite || !y.allFinite()) {
        sol.diagnostics = "non-finite iterate";
        break;
      }
      const auto ev = problem_.evaluate(y);
      const double viol =
          std::max(ev.g.size() ? ev.g.cwiseAbs().maxCoeff() : 0.0,
                   ev.h.size() ? std::max(0.0, ev.h.maxCoeff()) : 0.0);
      if (cfg_.verbose)
        std::fprintf(stderr,
                     "  outer %d: mu=%.1e viol=%.3e f=%.5f inner=%d stationary=%d\n",
                     outer, mu, viol, ev.f_obj, inner.iterations, inner.stationary);
      if (viol <= cfg_.feas_tol && inner.stationary) {
        converged = true;
        ++outer;
        break;
      }
      if (viol <= std::max(cfg_.feas_tol, 0.25 * prev_viol)) {
        // good progress: first-order multiplier update at the current penalty
        lam_e += 2.0 * mu * ev.g;
        lam_i = (lam_i + 2.0 * mu * ev.h).cwiseMax(0.0);
        prev_viol = viol;
        stalled = 0;
      } else if (viol < prev_viol) {
        // slow progress: update multipliers and tighten the penalty
        lam_e += 2.0 * mu * ev.g;
        lam_i = (lam_i + 2.0 * mu * ev.h).cwiseMax(0.0);
        mu = std::min(mu * cfg_.penalty_scale, cfg_.penalty_max);
        prev_viol = viol;
        stalled = 0;
      } else if (mu < cfg_.penalty_max) {
        mu = std::min(mu * cfg_.penalty_scale, cfg_.penalty_max);
      } else if (++stalled >= 2) {
        sol.diagnostics = "feasibility stalled";
        ++outer;
        break;  // locally infeasible
      }
    }
    sol.converged = converged;
    sol.iterations = total_inner;
    sol.outer_iterations = outer;
    finalize(y, sol);
    return sol;
  }

private:
  void finalize(const VectorXd& y, NlpSolution& sol) const {
    sol.y = y;
    const auto ev = problem_.evaluate(y);
    sol.objective = ev.f_obj;
    sol.equality_residuals = ev.g;
    sol.inequality_values = ev.h;
    sol.max_equality_violation = ev.g.size() ? ev.g.cwiseAbs().maxCoeff() : 0.0;
    sol.max_inequality_violation = ev.h.size() ? std::max(0.0, ev.h.maxCoeff()) : 0.0;
  }

  double force_reg_weight() const {
    return std::sqrt(cfg_.force_reg) /
           (problem_.params().total_mass() * problem_.params().gravity);
  }
  double force_smooth_weight() const {
    return std::sqrt(cfg_.force_smooth_reg) /
           (problem_.params().total_mass() * problem_.params().gravity);
  }
  std::vector<int> stance_pairs() const {  // first node of each in-phase pair
    std::vector<int> pairs;
    for (int i = 0; i + 1 < problem_.num_nodes(); ++i)
      if (problem_.has_force(i) && problem_.has_force(i + 1)) pairs.push_back(i);
    return pairs;
  }

  double al_value(const VectorXd& point, const NlpProblem::Eval& ev, const VectorXd& lam_e,
                  const VectorXd& lam_i, double mu) const {
    double phi = ev.f_obj;
    const double wf = force_reg_weight();
    const double ws = force_smooth_weight();
    for (int i = 0; i < problem_.num_nodes(); ++i) {
      if (!problem_.has_force(i)) continue;
      phi += wf * wf * point.segment<2>(problem_.force_offset(i)).squaredNorm();
      if (i + 1 < problem_.num_nodes() && problem_.has_force(i + 1))
        phi += ws * ws * (point.segment<2>(problem_.force_offset(i + 1)) -
                          point.segment<2>(problem_.force_offset(i)))
                            .squaredNorm();
    }
    for (Eigen::Index i = 0; i < ev.g.size(); ++i) {
      const double t = ev.g[i] + lam_e[i] / (2.0 * mu);
      phi += mu * t * t;
    }
    for (Eigen::Index i = 0; i < ev.h.size(); ++i) {
      const double t = std::max(0.0, ev.h[i] + lam_i[i] / (2.0 * mu));
      phi += mu * t * t;
    }
    return phi;
  }

  InnerResult minimize(VectorXd& y, const VectorXd& lam_e, const VectorXd& lam_i,
                       double mu) const {
    InnerResult res;
    const double sqrt_mu = std::sqrt(mu);
    const int n_nodes = problem_.num_nodes();
    const double wf = force_reg_weight();
    const double ws = force_smooth_weight();
    const std::vector<int> pairs = stance_pairs();
    const int rows_obj =
        2 * n_nodes + 2 * problem_.num_stance_nodes() + 2 * static_cast<int>(pairs.size());
    const int rows = rows_obj + problem_.num_equalities() + problem_.num_inequalities();

    VectorXd r(rows);
    Eigen::SparseMatrix<double> jac(rows, n_);
    double phi = 0.0;

    // full assembly (residual stack + Jacobian) at an accepted point
    auto assemble = [&](const VectorXd& point) -> bool {
      const auto ev = problem_.evaluate_with_jacobian(point);
      if (!ev.g.allFinite() || !ev.h.allFinite() || !std::isfinite(ev.f_obj)) return false;
      std::vector<Eigen::Triplet<double>> trip;
      trip.reserve(2 * n_nodes + ev.jac_g.size() + ev.jac_h.size());
      for (int i = 0; i < n_nodes; ++i)
        for (int j = 0; j < 2; ++j) {
          const int row = 2 * i + j;
          r[row] = obj_weight_ * point[problem_.u_offset(i) + j];
          trip.emplace_back(row, problem_.u_offset(i) + j, obj_weight_);
        }
      {
        int row = 2 * n_nodes;
        for (int i = 0; i < n_nodes; ++i) {
          if (!problem_.has_force(i)) continue;
          for (int j = 0; j < 2; ++j, ++row) {
            r[row] = wf * point[problem_.force_offset(i) + j];
            trip.emplace_back(row, problem_.force_offset(i) + j, wf);
          }
        }
        for (int i : pairs)
          for (int j = 0; j < 2; ++j, ++row) {
            r[row] = ws * (point[problem_.force_offset(i + 1) + j] -
                           point[problem_.force_offset(i) + j]);
            trip.emplace_back(row, problem_.force_offset(i + 1) + j, ws);
            trip.emplace_back(row, problem_.force_offset(i) + j, -ws);
          }
      }
      for (Eigen::Index i = 0; i < ev.g.size(); ++i)
        r[rows_obj + i] = sqrt_mu * (ev.g[i] + lam_e[i] / (2.0 * mu));
      for (const auto& t : ev.jac_g)
        trip.emplace_back(rows_obj + t.row(), t.col(), sqrt_mu * t.value());
      const int row0 = rows_obj + static_cast<int>(ev.g.size());
      std::vector<bool> active(ev.h.size());
      for (Eigen::Index i = 0; i < ev.h.size(); ++i) {
        const double t = ev.h[i] + lam_i[i] / (2.0 * mu);
        active[i] = t > 0.0;
        r[row0 + i] = active[i] ? sqrt_mu * t : 0.0;
      }
      for (const auto& t : ev.jac_h)
        if (active[t.row()]) trip.emplace_back(row0 + t.row(), t.col(), sqrt_mu * t.value());
      jac.setFromTriplets(trip.begin(), trip.end());
      phi = r.squaredNorm();
      return true;
    };

    // value-only merit of a trial point
    auto trial_value = [&](const VectorXd& point) -> double {
      const auto ev = problem_.evaluate(point);
      if (!ev.g.allFinite() || !ev.h.allFinite() || !std::isfinite(ev.f_obj))
        return std::numeric_limits<double>::infinity();
      return al_value(point, ev, lam_e, lam_i, mu);
    };

    if (!assemble(y)) {
      res.finite = false;
      return res;
    }

    double nu = 1e-4;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
    for (res.iterations = 0; res.iterations < cfg_.max_inner; ++res.iterations) {
      const VectorXd grad = jac.transpose() * r;
      if (cfg_.verbose && res.iterations % 25 == 0) {
        int gi;
        grad.cwiseAbs().maxCoeff(&gi);
        std::fprintf(stderr, "    it %d phi=%.8e grad=%.3e@%d nu=%.1e\n", res.iterations,
                     phi, grad.cwiseAbs().maxCoeff(), gi, nu);
      }
      if (grad.cwiseAbs().maxCoeff() <= cfg_.grad_tol * std::max(1.0, phi)) {
        res.stationary = true;
        return res;
      }
      Eigen::SparseMatrix<double> hess = (jac.transpose() * jac).pruned();
      VectorXd diag(n_);
      for (int i = 0; i < n_; ++i) diag[i] = std::max(hess.coeff(i, i), 1e-8);

      bool accepted = false;
      while (nu < 1e14) {
        Eigen::SparseMatrix<double> damped = hess;
        for (int i = 0; i < n_; ++i) damped.coeffRef(i, i) += nu * diag[i];
        ldlt.compute(damped);
        if (ldlt.info() == Eigen::Success) {
          const VectorXd step = ldlt.solve(-grad);
          // backtrack along the step before inflating the damping; fractional
          // steps settle cleanly against one-sided (active-set) kinks
          double alpha = 1.0;
          VectorXd y_acc;
          for (int bt = 0; bt < 4; ++bt, alpha *= 0.25) {
            const VectorXd y_try = y + alpha * step;
            if (y_try.allFinite() && trial_value(y_try) < phi) {
              y_acc = y_try;
              break;
            }
          }
          if (y_acc.size()) {
            y = y_acc;
            if (!assemble(y)) {
              res.finite = false;
              return res;
            }
            nu = alpha == 1.0 ? std::max(nu / 3.0, 1e-10) : nu * 2.0;
            accepted = true;
            if (alpha * step.cwiseAbs().maxCoeff() <=
                cfg_.step_tol * (1.0 + y.cwiseAbs().maxCoeff())) {
              res.stationary = true;
              ++res.iterations;
              return res;
            }
            break;
          }
        }
        nu *= 4.0;
      }
      if (!accepted) return res;  // damping exhausted; treat as stalled
    }
    return res;
  }

  const NlpProblem& problem_;
  SolverConfig cfg_;
  int n_;
  double obj_weight_;
};

}  // namespace detail

/// Iterates from the guess toward a feasible local optimum. Always returns a
/// solution record with residuals evaluated at the final iterate; failures
/// come back as converged == false, never as exceptions.
inline NlpSolution solve_nlp(const NlpProblem& problem, const VectorXd& y0,
                             const SolverConfig& cfg) {
  try {
    detail::AugLagSolver solver(problem, cfg);
    return solver.solve(y0);
  } catch (const std::exception& e) {
    NlpSolution sol;
    sol.y = VectorXd::Zero(problem.num_vars());
    sol.diagnostics = std::string("solver error: ") + e.what();
    const auto ev = problem.evaluate(sol.y);
    sol.objective = ev.f_obj;
    sol.equality_residuals = ev.g;
    sol.inequality_values = ev.h;
    return sol;
  }
}

/// Raw merit: weighted trajectory cost plus squared constraint violations.
inline double merit(const NlpSolution& sol, const MeritWeights& w) {
  double penalty = 0.0;
  for (Eigen::Index i = 0; i < sol.equality_residuals.size(); ++i)
    penalty += w.sigma2 * sol.equality_residuals[i] * sol.equality_residuals[i];
  for (Eigen::Index i = 0; i < sol.inequality_values.size(); ++i) {
    const double v = std::max(0.0, sol.inequality_values[i]);
    penalty += w.sigma3 * v * v;
  }
  const double m = w.sigma1 * sol.objective + penalty;
  return std::isfinite(m) ? m : w.cap;
}

/// Soft range limiter mapping raw merit into (-1, 1), order preserving.
inline double refine_merit(double m) { return std::tanh(m); }

/// Maximum single-step gap between the collocation states and an RK4
/// re-simulation of the node-to-node phase dynamics (intervals whose
/// endpoints share a phase). Shrinks with the node duration for consistent
/// transcriptions.
inline double resimulation_gap(const NlpProblem& problem, const NlpSolution& sol,
                               int substeps = 16) {
  const auto& params = problem.params();
  double worst = 0.0;
  for (int i = 0; i + 1 < problem.num_nodes(); ++i) {
    if (problem.node_phase(i) != problem.node_phase(i + 1)) continue;
    const bool stance = problem.node_phase(i) == Phase::Stance;
    const Vec2 u0 = sol.y.segment<2>(problem.u_offset(i));
    const Vec2 u1 = sol.y.segment<2>(problem.u_offset(i + 1));
    hopper::GenState s{sol.y.segment<4>(problem.q_offset(i)),
                       sol.y.segment<4>(problem.qd_offset(i))};
    const double h = problem.dt() / substeps;
    auto deriv = [&](const hopper::GenState& state, double tau) {
      const Vec2 u = u0 + tau * (u1 - u0);
      Eigen::Matrix<double, 8, 1> d;
      d.head<4>() = state.qd;
      d.tail<4>() = stance ? hopper::stance_dynamics(params, state, u).qddot
                           : hopper::flight_dynamics(params, state, u);
      return d;
    };
    for (int k = 0; k < substeps; ++k) {
      const double tau = static_cast<double>(k) / substeps;
      const double dtau = 1.0 / substeps;
      const auto k1 = deriv(s, tau);
      auto advance = [&](const Eigen::Matrix<double, 8, 1>& d, double frac) {
        hopper::GenState out;
        out.q = s.q + frac * h * d.head<4>();
        out.qd = s.qd + frac * h * d.tail<4>();
        return out;
      };
      const auto k2 = deriv(advance(k1, 0.5), tau + 0.5 * dtau);
      const auto k3 = deriv(advance(k2, 0.5), tau + 0.5 * dtau);
      const auto k4 = deriv(advance(k3, 1.0), tau + dtau);
      const Eigen::Matrix<double, 8, 1> d = (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
      s.q += h * d.head<4>();
      s.qd += h * d.tail<4>();
    }
    const double gap =
        std::max((s.q - Vec4(sol.y.segment<4>(problem.q_offset(i + 1)))).cwiseAbs().maxCoeff(),
                 (s.qd - Vec4(sol.y.segment<4>(problem.qd_offset(i + 1)))).cwiseAbs().maxCoeff());
    worst = std::max(worst, gap);
  }
  return worst;
}

/// Per-node trajectory export (time, state, input, reaction force, phase).
inline void write_trajectory_csv(std::ostream& os, const NlpProblem& problem,
                                 const NlpSolution& sol) {
  os << "t,x_base,z_base,hip,knee,xd_base,zd_base,hipd,kneed,u_hip,u_knee,"
        "lambda_x,lambda_z,phase\n";
  os.precision(17);
  for (int i = 0; i < problem.num_nodes(); ++i) {
    os << i * problem.dt();
    for (int j = 0; j < 4; ++j) os << "," << sol.y[problem.q_offset(i) + j];
    for (int j = 0; j < 4; ++j) os << "," << sol.y[problem.qd_offset(i) + j];
    for (int j = 0; j < 2; ++j) os << "," << sol.y[problem.u_offset(i) + j];
    if (problem.has_force(i))
      os << "," << sol.y[problem.force_offset(i)] << ","
         << sol.y[problem.force_offset(i) + 1];
    else
      os << ",0,0";
    os << "," << (problem.node_phase(i) == Phase::Stance ? "stance" : "flight") << "\n";
  }
}

}  // namespace hopbo::collocation
