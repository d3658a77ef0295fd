#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "skyline/horizon.hpp"
#include "skyline/solver.hpp"
#include "skyline/transcription.hpp"
#include "skyline/urdf.hpp"

namespace skyline::motion {

class MotionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Slice map for the robot state x = [q; v] and input u = [a; f_c...].
// Floating base: q = [p(3), rho(4, quaternion x y z w), theta],
// v = [pdot(3, world), omega(3, base-local), thetadot].
struct StateInputLayout {
  int nq = 0;
  int nv = 0;
  int n_joints = 0;
  bool floating = false;
  std::vector<std::string> contact_frames;
  std::vector<int> contact_frame_ids;

  int n_contacts() const { return static_cast<int>(contact_frames.size()); }
  int nx() const { return nq + nv; }
  int nu() const { return nv + 3 * n_contacts(); }

  // Offsets inside x.
  int p_offset() const { return 0; }
  int rho_offset() const { return 3; }
  int theta_offset() const { return floating ? 7 : 0; }
  int v_offset() const { return nq; }
  int pdot_offset() const { return nq; }
  int omega_offset() const { return nq + 3; }
  int thetadot_offset() const { return nq + (floating ? 6 : 0); }
  // Offsets inside u.
  int a_offset() const { return 0; }
  int force_offset(int contact) const { return nv + 3 * contact; }
};

enum class PhaseKind { stance, swing };

struct Phase {
  PhaseKind kind = PhaseKind::stance;
  int first = 0;
  int last = 0;                   // inclusive input-node range
  std::vector<double> clearance;  // swing only: foot height per node, may be empty
};

// Per-contact phase sequences. Phases tile the input nodes [0, n_nodes-1]:
// stance pins the foot velocity and admits forces, swing zeroes the forces.
struct ContactSchedule {
  int n_nodes = 0;
  std::vector<std::string> frames;
  std::vector<std::vector<Phase>> phases;  // per frame, in node order
};

void validate_schedule(const ContactSchedule& schedule);
bool in_stance(const ContactSchedule& schedule, int contact, int node);
// Swing clearance height at a node; 0 on stance nodes and profile-less swings.
double clearance_at(const ContactSchedule& schedule, int contact, int node);
// Cyclic advance: node k of the result carries what node (k+shift) mod N held.
ContactSchedule rotate_schedule(const ContactSchedule& schedule, int shift);
// Symmetric triangular profile over `length` nodes: 0 at both ends, rising to
// `apex` at the midpoint.
std::vector<double> triangular_clearance(int length, double apex);

// Scenario knobs. The quadruped builders read the four contact frames in the
// order (left-front, right-front, left-hind, right-hind).
struct ScenarioConfig {
  std::vector<std::string> contact_frames;
  int n_nodes = 0;   // 0 picks the scenario default
  double dt = 0.0;   // 0 picks the scenario default
  Eigen::VectorXd q0_joints;  // actuated joints, model coordinate order

  std::string solver = "gnsqp";  // gnsqp | ilqr
  solver::SolverOptions solver_options;
  transcription::IntegratorKind integrator = transcription::IntegratorKind::rk4;

  double w_min_f = 1e-3;
  double w_min_v = 1e-1;
  double w_v_ref = 10.0;
  double w_postural = 1.0;

  std::string friction = "pyramid";  // none | pyramid
  double mu = 0.8;
  bool torque_limits = false;
  double clearance_apex = 0.08;

  Eigen::Vector3d p_des_offset{0.0, 0.0, 0.0};  // leap: base displacement
  double turn_angle = 1.5707963267948966;       // turn: final yaw, radians
  Eigen::Vector3d v_ref{0.2, 0.0, 0.0};         // walk: base velocity target
  int n_mpc_iterations = 100;                   // walk
};

// Initial configuration [p0, identity quaternion, q0_joints] with the base
// lifted so the lowest contact frame sits at z = 0.
Eigen::VectorXd initial_configuration(const urdf::KinematicModel& model,
                                      const ScenarioConfig& config);

// Declares q/v/a/f_<frame> variables, installs the kinematic state derivative
// (quaternion rate for the orientation block), pins node 0 to q = q0, v = 0,
// and adds the 'min_f' / 'min_v' regularization costs.
StateInputLayout build_common(horizon::HorizonProblem& prb,
                              const urdf::KinematicModel& model,
                              const ScenarioConfig& config);

// Equality 'feas' per input node: the six floating-base rows of the
// inverse-dynamics residual vanish (nothing actuates the base). With
// config.torque_limits the actuated rows are box-bounded by the URDF effort
// limits as constraint 'tau'.
void add_underactuation(horizon::HorizonProblem& prb,
                        const urdf::KinematicModel& model,
                        const StateInputLayout& layout,
                        const ScenarioConfig& config);

// Stance nodes: zero foot velocity ('v_c_<frame>'), normal force >= 0 and an
// optional linearized friction pyramid ('fric_<frame>'). Swing nodes: zero
// force bounds and, when the phase has a clearance profile, the foot height
// pinned to it ('clear_<frame>'). With parametric = true the stance/swing
// switching lives in per-node parameters (sigma_<frame>, z_<frame>) so a
// rotated schedule only needs new parameter values and force bounds.
void apply_contact_schedule(horizon::HorizonProblem& prb,
                            const urdf::KinematicModel& model,
                            const StateInputLayout& layout,
                            const ContactSchedule& schedule,
                            const ScenarioConfig& config,
                            bool parametric = false);

// Refresh sigma_<frame>/z_<frame> values and the per-node force bounds from a
// (typically rotated) schedule. Only valid for parametric problems.
void set_schedule_parameters(horizon::HorizonProblem& prb,
                             const StateInputLayout& layout,
                             const ContactSchedule& schedule);

struct Scenario {
  horizon::HorizonProblem problem;
  StateInputLayout layout;
  ContactSchedule schedule;
  Eigen::VectorXd q0;
};

// Quadruped leap: front feet swing over [0.3N, 0.6N], hind feet over
// [0.44N, 0.74N] (ballistic where they overlap), terminal velocity zero and
// base displaced by p_des_offset with orientation and posture restored.
Scenario build_leap(const urdf::KinematicModel& model,
                    const ScenarioConfig& config);

// Crawl turn: 8 single-foot steps (LH LF RH RF, two cycles) with triangular
// swing clearance; terminal base position and posture restored, base yaw
// rotated by config.turn_angle.
Scenario build_turn(const urdf::KinematicModel& model,
                    const ScenarioConfig& config);

// One-cycle crawl template for receding-horizon walking (25% duty, swing
// order LH LF RH RF), base-velocity reference and postural costs, no terminal
// constraint. Built in parametric schedule mode.
Scenario build_walk(const urdf::KinematicModel& model,
                    const ScenarioConfig& config);

// max_k |x_{k+1} - Phi(x_k, u_k)|_inf over the solved trajectory.
double max_defect(const horizon::HorizonProblem& prb,
                  const solver::SolveResult& result,
                  transcription::IntegratorKind kind);

struct MpcStep {
  solver::SolveStatus status = solver::SolveStatus::diverged;
  int iterations = 0;
  double objective = 0.0;
  double max_defect = 0.0;
  Eigen::VectorXd x0, u0;  // state the solve started from and the applied input
};

struct MpcLog {
  std::vector<MpcStep> steps;
  int cold_iterations = 0;  // iterations of the first (cold) solve
  bool aborted = false;
};

// Receding-horizon loop: solve with ILQR, record the node-0 state and input,
// integrate one step, rotate the schedule, shift guesses and multipliers,
// re-pin node 0 and repeat. A diverged solve aborts with a partial log.
MpcLog run_receding_horizon(Scenario& scenario, const ScenarioConfig& config);

}  // namespace skyline::motion
