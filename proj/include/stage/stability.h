#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stage/json.h"
#include "stage/rng.h"
#include "stage/scene.h"
#include "stage/sim.h"
#include "stage/state.h"

namespace stage {

// Which frame pairs carry a contact in the equilibrium NLP. Every pair
// involves at least one free object (always the first frame of the pair).
struct ContactAssignment {
  std::vector<std::pair<FrameRef, FrameRef>> contacts;

  int count() const { return static_cast<int>(contacts.size()); }
  friend bool operator==(const ContactAssignment& a, const ContactAssignment& b) {
    return a.contacts == b.contacts;
  }
};

void to_json(json& j, const ContactAssignment& a);
void from_json(const json& j, ContactAssignment& a);

// One contact's unknowns: a point of attack and the force it transmits onto
// the pair's first frame (the second frame sees the reaction).
struct ContactVariable {
  Vec3 point{0, 0, 0};
  Vec3 force{0, 0, 0};
};

void to_json(json& j, const ContactVariable& v);
void from_json(const json& j, ContactVariable& v);

struct StableState {
  SystemState config;  // zero velocities
  ContactAssignment assignment;
  std::vector<ContactVariable> contact_vars;
  double residual_norm = 0.0;  // L2 norm of the equality residuals
  int id = -1;
};

void to_json(json& j, const StableState& s);
void from_json(const json& j, StableState& s);

// Stacked constraint values at a configuration. Equality rows: per-object
// force and moment balance, then per-contact surface anchoring. Inequality
// rows: per-contact friction-cone margins, then non-penetration margins of
// the pairs not in the assignment (positive entries are violations).
struct NlpResiduals {
  Eigen::VectorXd equality;
  Eigen::VectorXd inequality;
};

struct SolverSettings {
  double eq_tol = 1e-4;
  double ineq_tol = 1e-4;
  double grad_tol = 1e-3;
  double rho_init = 10.0;
  double rho_scale = 10.0;  // applied when the violation fails to halve
  int max_outer = 20;
  int max_inner = 200;
  // tie-break on contact forces; kept tiny so it cannot trade noticeable
  // configuration distance for force magnitude along equilibrium families
  double force_reg = 1e-9;
};

struct ProjectionOutcome {
  bool converged = false;
  StableState state;  // meaningful only when converged
  double final_residual = 0.0;        // equality L2 norm at exit
  double final_cone_violation = 0.0;  // max inequality violation at exit
  int outer_iterations = 0;
};

// Draws 1-3 distinct admissible pairs (free object x {surface, robot, other
// free object}), uniformly: first the count, then the pairs without
// replacement.
ContactAssignment sample_contact_assignment(const SceneSpec& scene, Rng& rng);

// Equilibrium, anchoring, cone, and non-penetration residuals at the given
// configuration and contact variables. Throws DimensionMismatch if vars and
// assignment disagree or the config does not fit the scene.
NlpResiduals evaluate_residuals(const SystemState& config, const std::vector<ContactVariable>& vars,
                                const ContactAssignment& assignment, const SceneSpec& scene);

// Projects x_bar onto the stability manifold induced by the assignment with
// an augmented-Lagrangian Gauss-Newton solver; minimizes |config - x_bar|^2.
ProjectionOutcome project_to_stable(const SystemState& x_bar, const ContactAssignment& assignment,
                                    const SceneSpec& scene, const SolverSettings& cfg = {});

// Uniform seed configuration: robots inside their limits, object positions in
// a box 1.5x the workspace extent, uniform random orientations for boxes.
SystemState sample_x_bar(const SceneSpec& scene, Rng& rng);

// Zero-command hold for `hold_time` seconds; true iff no object drifts more
// than `tol` meters and every final speed is below 0.05 m/s.
bool validate_stability(const StableState& s, const SceneSpec& scene, double hold_time = 1.0,
                        double tol = 0.02);

// Samples C_s: exactly m states, each projected from a fresh (x_bar,
// assignment) draw and re-validated in simulation; up to
// max_attempts_per_state tries per state. Attempts are pure in (seed, state
// index, attempt index) and merged in attempt order, so results do not depend
// on the worker count. Throws ExhaustedError when a state runs out of budget.
std::vector<StableState> sample_stable_states(int m, int max_attempts_per_state,
                                              const SceneSpec& scene, std::uint64_t seed,
                                              const SolverSettings& cfg = {}, ExecPolicy exec = {});

// JSONL persistence of C_s, one StableState per line.
void write_stable_states_jsonl(const std::string& path, const std::vector<StableState>& states);
std::vector<StableState> read_stable_states_jsonl(const std::string& path);

namespace detail {

// Decision vector layout: [robot_q | per object: pos (, quat if box) |
// per contact: point, force]. Box-face anchors are frozen at layout creation
// so the residuals stay smooth during one solve.
struct NlpLayout {
  int nr = 0;
  std::vector<int> pos_off;
  std::vector<int> quat_off;  // -1 for spheres
  int con_off = 0;
  int dim = 0;

  struct BoxFace {
    int axis = 2;
    double sign = 1.0;
  };
  // per contact, per side; only meaningful when that side is a box object
  std::vector<BoxFace> face_a;
  std::vector<BoxFace> face_b;

  int point_off(int k) const { return con_off + 6 * k; }
  int force_off(int k) const { return con_off + 6 * k + 3; }
};

NlpLayout make_layout(const ContactAssignment& assignment, const SceneSpec& scene,
                      const SystemState& config, const std::vector<ContactVariable>& vars);
Eigen::VectorXd pack(const SystemState& config, const std::vector<ContactVariable>& vars,
                     const NlpLayout& layout);
void unpack(const Eigen::VectorXd& x, const NlpLayout& layout, const SceneSpec& scene,
            SystemState* config, std::vector<ContactVariable>* vars);

// Constraint values and analytic Jacobians. With include_aux, appends the
// solver-internal rows: quaternion unit-norm equalities, robot limit
// inequalities, and non-penetration hinges on the assigned pairs themselves.
struct ConstraintEval {
  Eigen::VectorXd eq;
  Eigen::MatrixXd jeq;
  Eigen::VectorXd ineq;
  Eigen::MatrixXd jineq;
};

ConstraintEval eval_constraints(const Eigen::VectorXd& x, const NlpLayout& layout,
                                const ContactAssignment& assignment, const SceneSpec& scene,
                                bool include_aux);

}  // namespace detail

}  // namespace stage
