#include "skyline/motion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>

#include "skyline/autodiff.hpp"
#include "skyline/kindyn.hpp"

namespace skyline::motion {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using Blocks = std::vector<std::vector<ad::Value>>;

std::string force_var(const std::string& frame) { return "f_" + frame; }

// xdot = [pdot; quaternion rate; thetadot; nudot], the kinematic map plus the
// acceleration passthrough from u.
ad::DiffFunction trace_state_derivative(const urdf::KinematicModel& model,
                                        const StateInputLayout& L) {
  return ad::trace(
      "xdot", {L.nx(), L.nu()}, [&](const Blocks& in) {
        const std::vector<ad::Value>& x = in[0];
        const std::vector<ad::Value>& u = in[1];
        std::vector<ad::Value> out;
        out.reserve(L.nx());
        if (L.floating) {
          for (int i = 0; i < 3; ++i) out.push_back(x[L.pdot_offset() + i]);
          const std::array<ad::Value, 4> rho{x[3], x[4], x[5], x[6]};
          const km::Vec3<ad::Value> omega{x[L.omega_offset()],
                                          x[L.omega_offset() + 1],
                                          x[L.omega_offset() + 2]};
          const std::array<ad::Value, 4> rdot =
              kindyn::quaternion_rate(rho, omega);
          out.insert(out.end(), rdot.begin(), rdot.end());
          for (int i = 0; i < L.n_joints; ++i)
            out.push_back(x[L.thetadot_offset() + i]);
        } else {
          for (int i = 0; i < L.nv; ++i) out.push_back(x[L.nq + i]);
        }
        for (int i = 0; i < L.nv; ++i) out.push_back(u[i]);
        return out;
      });
}

// Rows [row_begin, row_end) of the inverse-dynamics residual with the contact
// forces applied at the layout's frames. Blocks: q, v, a, then one force per
// contact.
ad::DiffFunction trace_dynamics_rows(const urdf::KinematicModel& model,
                                     const StateInputLayout& L, int row_begin,
                                     int row_end, const std::string& name) {
  std::vector<int> dims{L.nq, L.nv, L.nv};
  for (int c = 0; c < L.n_contacts(); ++c) dims.push_back(3);
  return ad::trace(name, dims, [&](const Blocks& in) {
    std::vector<std::pair<int, km::Vec3<ad::Value>>> forces;
    forces.reserve(L.n_contacts());
    for (int c = 0; c < L.n_contacts(); ++c)
      forces.push_back({L.contact_frame_ids[c],
                        km::Vec3<ad::Value>{in[3 + c][0], in[3 + c][1],
                                            in[3 + c][2]}});
    const std::vector<ad::Value> tau = kindyn::rnea(
        model, in[0].data(), in[1].data(), in[2].data(), forces, model.gravity);
    return std::vector<ad::Value>(tau.begin() + row_begin,
                                  tau.begin() + row_end);
  });
}

// World linear velocity of a contact frame; gated rows are sigma * v so a
// zero parameter turns the constraint off.
ad::DiffFunction trace_contact_velocity(const urdf::KinematicModel& model,
                                        int frame_id, const StateInputLayout& L,
                                        bool gated, const std::string& name) {
  std::vector<int> dims{L.nq, L.nv};
  if (gated) dims.push_back(1);
  return ad::trace(name, dims, [&](const Blocks& in) {
    const auto X = kindyn::link_poses(model, in[0].data());
    const auto K = kindyn::link_motions(
        model, X, in[1].data(), static_cast<const ad::Value*>(nullptr));
    const urdf::Frame& fr = model.frames[frame_id];
    const km::Vec3<ad::Value> r =
        X[fr.link_index].R * kindyn::detail::lift<ad::Value>(fr.local.p);
    km::Vec3<ad::Value> v = K[fr.link_index].v + km::cross(K[fr.link_index].w, r);
    if (gated) {
      const ad::Value& s = in[2][0];
      v = {v.x * s, v.y * s, v.z * s};
    }
    return std::vector<ad::Value>{v.x, v.y, v.z};
  });
}

// Foot height minus the profile parameter; gated rows multiply by
// (1 - sigma) so the pin only acts on swing nodes.
ad::DiffFunction trace_clearance(const urdf::KinematicModel& model,
                                 int frame_id, const StateInputLayout& L,
                                 bool gated, const std::string& name) {
  std::vector<int> dims{L.nq, 1};
  if (gated) dims.push_back(1);
  return ad::trace(name, dims, [&](const Blocks& in) {
    const auto X = kindyn::link_poses(model, in[0].data());
    const urdf::Frame& fr = model.frames[frame_id];
    const km::Vec3<ad::Value> p =
        X[fr.link_index].p +
        X[fr.link_index].R * kindyn::detail::lift<ad::Value>(fr.local.p);
    ad::Value row = p.z - in[1][0];
    if (gated) row = (ad::Value(1.0) - in[2][0]) * row;
    return std::vector<ad::Value>{row};
  });
}

// mu*fz +- fx >= 0, mu*fz +- fy >= 0. Zero force satisfies every row, so the
// pyramid can stay active through swing phases.
ad::DiffFunction trace_pyramid(double mu, const std::string& name) {
  return ad::trace(name, {3}, [&](const Blocks& in) {
    const ad::Value& fx = in[0][0];
    const ad::Value& fy = in[0][1];
    const ad::Value cap = ad::Value(mu) * in[0][2];
    return std::vector<ad::Value>{cap - fx, cap + fx, cap - fy, cap + fy};
  });
}

// Rows x[begin + i] - offset[i] over one variable block.
ad::DiffFunction trace_slice(int dim, int begin, const Eigen::VectorXd& offset,
                             const std::string& name) {
  return ad::trace(name, {dim}, [&](const Blocks& in) {
    std::vector<ad::Value> out;
    out.reserve(offset.size());
    for (int i = 0; i < offset.size(); ++i)
      out.push_back(in[0][begin + i] - ad::Value(offset[i]));
    return out;
  });
}

// Identity over the concatenated contact forces.
ad::DiffFunction trace_force_identity(int n_contacts) {
  std::vector<int> dims(n_contacts, 3);
  return ad::trace("min_f", dims, [&](const Blocks& in) {
    std::vector<ad::Value> out;
    out.reserve(3 * n_contacts);
    for (const auto& block : in)
      out.insert(out.end(), block.begin(), block.end());
    return out;
  });
}

const Phase& phase_at(const ContactSchedule& s, int contact, int node) {
  if (contact < 0 || contact >= static_cast<int>(s.phases.size()))
    throw MotionError("contact index " + std::to_string(contact) +
                      " out of range");
  if (node < 0 || node >= s.n_nodes)
    throw MotionError("node " + std::to_string(node) + " outside [0, " +
                      std::to_string(s.n_nodes - 1) + "]");
  for (const Phase& ph : s.phases[contact])
    if (node >= ph.first && node <= ph.last) return ph;
  throw MotionError("node " + std::to_string(node) + " not covered");
}

double total_mass(const urdf::KinematicModel& model) {
  double m = 0.0;
  for (const urdf::LinkSpec& l : model.links) m += l.mass;
  return m;
}

// Even split of the robot weight across the feet in stance at each node.
void guess_static_forces(horizon::HorizonProblem& prb,
                         const StateInputLayout& layout,
                         const ContactSchedule& schedule,
                         const urdf::KinematicModel& model) {
  const double weight = total_mass(model) * -model.gravity.z();
  for (int k = 0; k < schedule.n_nodes; ++k) {
    int active = 0;
    for (int c = 0; c < layout.n_contacts(); ++c)
      if (in_stance(schedule, c, k)) ++active;
    for (int c = 0; c < layout.n_contacts(); ++c) {
      Eigen::VectorXd f = Eigen::VectorXd::Zero(3);
      if (active > 0 && in_stance(schedule, c, k)) f[2] = weight / active;
      horizon::set_guess(prb, force_var(layout.contact_frames[c]), f,
                         horizon::NodeSet::single(k));
    }
  }
}

void add_terminal_posture(horizon::HorizonProblem& prb,
                          const StateInputLayout& L, const Eigen::Vector3d& p_des,
                          const Eigen::Vector4d& rho_des,
                          const Eigen::VectorXd& theta_des) {
  horizon::create_constraint(prb, "p_final",
                             trace_slice(L.nq, 0, p_des, "p_final"),
                             {{"q", 0}}, horizon::NodeSet::final());
  horizon::create_constraint(prb, "rho_final",
                             trace_slice(L.nq, 3, rho_des, "rho_final"),
                             {{"q", 0}}, horizon::NodeSet::final());
  horizon::create_constraint(
      prb, "theta_final", trace_slice(L.nq, 7, theta_des, "theta_final"),
      {{"q", 0}}, horizon::NodeSet::final());
}

std::vector<horizon::Binding> dynamics_bindings(const StateInputLayout& L) {
  std::vector<horizon::Binding> b{{"q", 0}, {"v", 0}, {"a", 0}};
  for (const std::string& f : L.contact_frames) b.push_back({force_var(f), 0});
  return b;
}

// Swing order LH, LF, RH, RF in the (LF, RF, LH, RH) frame convention.
constexpr int kCrawlOrder[4] = {2, 0, 3, 1};

void require_quadruped(const ScenarioConfig& config, const char* scenario) {
  if (config.contact_frames.size() != 4)
    throw MotionError(std::string(scenario) + " needs 4 contact frames");
}

ScenarioConfig with_defaults(const ScenarioConfig& config, int n_nodes,
                             double dt) {
  ScenarioConfig c = config;
  if (c.n_nodes == 0) c.n_nodes = n_nodes;
  if (c.dt == 0.0) c.dt = dt;
  return c;
}

Scenario start_scenario(const urdf::KinematicModel& model,
                        const ScenarioConfig& config) {
  Scenario sc;
  sc.problem = horizon::create_problem(config.n_nodes);
  sc.layout = build_common(sc.problem, model, config);
  sc.q0 = initial_configuration(model, config);
  add_underactuation(sc.problem, model, sc.layout, config);
  return sc;
}

}  // namespace

void validate_schedule(const ContactSchedule& s) {
  if (s.n_nodes <= 0) throw MotionError("schedule has no nodes");
  if (s.frames.size() != s.phases.size())
    throw MotionError("schedule has " + std::to_string(s.frames.size()) +
                      " frames but " + std::to_string(s.phases.size()) +
                      " phase lists");
  for (std::size_t c = 0; c < s.phases.size(); ++c) {
    int expect = 0;
    for (const Phase& ph : s.phases[c]) {
      if (ph.first != expect)
        throw MotionError("frame '" + s.frames[c] + "': phase starts at node " +
                          std::to_string(ph.first) + ", expected " +
                          std::to_string(expect));
      if (ph.last < ph.first)
        throw MotionError("frame '" + s.frames[c] + "': empty phase at node " +
                          std::to_string(ph.first));
      if (ph.kind == PhaseKind::stance && !ph.clearance.empty())
        throw MotionError("frame '" + s.frames[c] +
                          "': stance phase carries a clearance profile");
      if (!ph.clearance.empty() &&
          static_cast<int>(ph.clearance.size()) != ph.last - ph.first + 1)
        throw MotionError("frame '" + s.frames[c] + "': clearance profile has " +
                          std::to_string(ph.clearance.size()) + " values for " +
                          std::to_string(ph.last - ph.first + 1) + " nodes");
      expect = ph.last + 1;
    }
    if (expect != s.n_nodes)
      throw MotionError("frame '" + s.frames[c] + "': phases cover [0, " +
                        std::to_string(expect - 1) + "], horizon needs [0, " +
                        std::to_string(s.n_nodes - 1) + "]");
  }
}

bool in_stance(const ContactSchedule& s, int contact, int node) {
  return phase_at(s, contact, node).kind == PhaseKind::stance;
}

double clearance_at(const ContactSchedule& s, int contact, int node) {
  const Phase& ph = phase_at(s, contact, node);
  if (ph.kind != PhaseKind::swing || ph.clearance.empty()) return 0.0;
  return ph.clearance[node - ph.first];
}

ContactSchedule rotate_schedule(const ContactSchedule& s, int shift) {
  validate_schedule(s);
  const int n = s.n_nodes;
  const int sh = ((shift % n) + n) % n;
  ContactSchedule out;
  out.n_nodes = n;
  out.frames = s.frames;
  out.phases.resize(s.phases.size());
  for (std::size_t c = 0; c < s.phases.size(); ++c) {
    std::vector<PhaseKind> kind(n);
    std::vector<double> clr(n);
    std::vector<bool> has_clr(n);
    for (int k = 0; k < n; ++k) {
      const Phase& ph = phase_at(s, static_cast<int>(c), (k + sh) % n);
      kind[k] = ph.kind;
      has_clr[k] = ph.kind == PhaseKind::swing && !ph.clearance.empty();
      clr[k] = has_clr[k] ? ph.clearance[(k + sh) % n - ph.first] : 0.0;
    }
    for (int k = 0; k < n;) {
      int end = k;
      while (end + 1 < n && kind[end + 1] == kind[k]) ++end;
      Phase ph;
      ph.kind = kind[k];
      ph.first = k;
      ph.last = end;
      if (ph.kind == PhaseKind::swing &&
          std::any_of(has_clr.begin() + k, has_clr.begin() + end + 1,
                      [](bool b) { return b; }))
        ph.clearance.assign(clr.begin() + k, clr.begin() + end + 1);
      out.phases[c].push_back(std::move(ph));
      k = end + 1;
    }
  }
  return out;
}

std::vector<double> triangular_clearance(int length, double apex) {
  if (length <= 0) return {};
  if (length == 1) return {apex};
  std::vector<double> z(length);
  for (int k = 0; k < length; ++k) {
    const double t = static_cast<double>(k) / (length - 1);
    z[k] = apex * (1.0 - std::abs(2.0 * t - 1.0));
  }
  return z;
}

Eigen::VectorXd initial_configuration(const urdf::KinematicModel& model,
                                      const ScenarioConfig& config) {
  if (config.q0_joints.size() != model.n_movable)
    throw MotionError("q0_joints has " +
                      std::to_string(config.q0_joints.size()) + " entries, model has " +
                      std::to_string(model.n_movable) + " joints");
  if (!model.floating_base) return config.q0_joints;
  Eigen::VectorXd q(model.nq());
  q.head(3).setZero();
  q.segment<4>(3) << 0.0, 0.0, 0.0, 1.0;
  q.tail(model.n_movable) = config.q0_joints;
  double z_min = 0.0;
  for (const std::string& f : config.contact_frames)
    z_min = std::min(z_min,
                     kindyn::forward_kinematics(model, q, f).position.z());
  q[2] = -z_min;
  return q;
}

StateInputLayout build_common(horizon::HorizonProblem& prb,
                              const urdf::KinematicModel& model,
                              const ScenarioConfig& config) {
  if (!prb.variables.empty())
    throw MotionError("build_common needs a fresh problem");
  if (config.dt <= 0.0) throw MotionError("dt must be positive");
  for (double w : {config.w_min_f, config.w_min_v, config.w_v_ref,
                   config.w_postural})
    if (w < 0.0) throw MotionError("cost weights must be nonnegative");

  StateInputLayout L;
  L.nq = model.nq();
  L.nv = model.nv();
  L.n_joints = model.n_movable;
  L.floating = model.floating_base;
  L.contact_frames = config.contact_frames;
  for (const std::string& f : config.contact_frames) {
    const int id = model.frame_index(f);
    if (id < 0) throw MotionError("unknown contact frame '" + f + "'");
    L.contact_frame_ids.push_back(id);
  }

  horizon::create_variable(prb, "q", horizon::VariableKind::state, L.nq);
  horizon::create_variable(prb, "v", horizon::VariableKind::state, L.nv);
  horizon::create_variable(prb, "a", horizon::VariableKind::input, L.nv);
  for (const std::string& f : L.contact_frames)
    horizon::create_variable(prb, force_var(f), horizon::VariableKind::input, 3);
  prb.quaternion_offset = L.floating ? 3 : -1;
  prb.velocity_offset = L.nq;

  horizon::set_dynamics(prb, trace_state_derivative(model, L), config.dt);

  const Eigen::VectorXd q0 = initial_configuration(model, config);
  const Eigen::VectorXd v0 = Eigen::VectorXd::Zero(L.nv);
  horizon::set_bounds(prb, "q", q0, q0, horizon::NodeSet::single(0));
  horizon::set_bounds(prb, "v", v0, v0, horizon::NodeSet::single(0));
  horizon::set_guess(prb, "q", q0, horizon::NodeSet::all());
  horizon::set_guess(prb, "v", v0, horizon::NodeSet::all());
  horizon::set_guess(prb, "a", Eigen::VectorXd::Zero(L.nv),
                     horizon::NodeSet::all());

  if (L.n_contacts() > 0) {
    std::vector<horizon::Binding> fb;
    for (const std::string& f : L.contact_frames) fb.push_back({force_var(f), 0});
    horizon::create_cost(prb, "min_f", trace_force_identity(L.n_contacts()),
                         std::move(fb), horizon::NodeSet::all(), config.w_min_f);
  }
  horizon::create_cost(prb, "min_v",
                       trace_slice(L.nv, 0, Eigen::VectorXd::Zero(L.nv), "min_v"),
                       {{"v", 0}}, horizon::NodeSet::all(), config.w_min_v);
  return L;
}

void add_underactuation(horizon::HorizonProblem& prb,
                        const urdf::KinematicModel& model,
                        const StateInputLayout& layout,
                        const ScenarioConfig& config) {
  if (!model.floating_base)
    throw MotionError("underactuation constraint needs a floating base");
  horizon::create_constraint(
      prb, "feas", trace_dynamics_rows(model, layout, 0, 6, "feas"),
      dynamics_bindings(layout), horizon::NodeSet::all());
  if (config.torque_limits) {
    Eigen::VectorXd lim = Eigen::VectorXd::Constant(layout.n_joints, kInf);
    for (const urdf::JointSpec& j : model.joints)
      if (j.movable() && j.effort_limit) lim[j.coord_index] = *j.effort_limit;
    horizon::create_constraint(
        prb, "tau", trace_dynamics_rows(model, layout, 6, layout.nv, "tau"),
        dynamics_bindings(layout), horizon::NodeSet::all(), -lim, lim);
  }
}

void apply_contact_schedule(horizon::HorizonProblem& prb,
                            const urdf::KinematicModel& model,
                            const StateInputLayout& layout,
                            const ContactSchedule& schedule,
                            const ScenarioConfig& config, bool parametric) {
  validate_schedule(schedule);
  if (schedule.n_nodes != prb.n_nodes)
    throw MotionError("schedule covers " + std::to_string(schedule.n_nodes) +
                      " nodes, problem has " + std::to_string(prb.n_nodes));
  if (schedule.frames != layout.contact_frames)
    throw MotionError("schedule frames differ from the layout");
  if (config.friction != "pyramid" && config.friction != "none")
    throw MotionError("unknown friction model '" + config.friction + "'");
  const bool pyramid = config.friction == "pyramid";
  if (pyramid && !(config.mu > 0.0))
    throw MotionError("friction coefficient must be positive");

  const Eigen::VectorXd zero3 = Eigen::VectorXd::Zero(3);
  const Eigen::VectorXd zero4 = Eigen::VectorXd::Zero(4);
  const Eigen::VectorXd inf4 = Eigen::VectorXd::Constant(4, kInf);
  const Eigen::VectorXd stance_lo =
      (Eigen::VectorXd(3) << -kInf, -kInf, 0.0).finished();
  const Eigen::VectorXd stance_hi = Eigen::VectorXd::Constant(3, kInf);
  const int n = prb.n_nodes;

  for (int c = 0; c < layout.n_contacts(); ++c) {
    const std::string& frame = layout.contact_frames[c];
    const int fid = layout.contact_frame_ids[c];
    const std::string fvar = force_var(frame);

    if (parametric) {
      horizon::create_variable(prb, "sigma_" + frame,
                               horizon::VariableKind::parameter, 1);
      horizon::create_variable(prb, "z_" + frame,
                               horizon::VariableKind::parameter, 1);
      horizon::create_constraint(
          prb, "v_c_" + frame,
          trace_contact_velocity(model, fid, layout, true, "v_c_" + frame),
          {{"q", 0}, {"v", 0}, {"sigma_" + frame, 0}},
          horizon::NodeSet::range(0, n - 1));
      horizon::create_constraint(
          prb, "clear_" + frame,
          trace_clearance(model, fid, layout, true, "clear_" + frame),
          {{"q", 0}, {"z_" + frame, 0}, {"sigma_" + frame, 0}},
          horizon::NodeSet::range(0, n - 1));
      if (pyramid)
        horizon::create_constraint(
            prb, "fric_" + frame, trace_pyramid(config.mu, "fric_" + frame),
            {{fvar, 0}}, horizon::NodeSet::range(0, n - 1), zero4, inf4);
      continue;
    }

    std::vector<int> stance_nodes;
    std::vector<int> clear_nodes;
    std::vector<double> clear_values;
    for (const Phase& ph : schedule.phases[c]) {
      const auto range = horizon::NodeSet::range(ph.first, ph.last);
      if (ph.kind == PhaseKind::stance) {
        for (int k = ph.first; k <= ph.last; ++k) stance_nodes.push_back(k);
        horizon::set_bounds(prb, fvar, stance_lo, stance_hi, range);
      } else {
        horizon::set_bounds(prb, fvar, zero3, zero3, range);
        for (int k = ph.first; k <= ph.last && !ph.clearance.empty(); ++k) {
          clear_nodes.push_back(k);
          clear_values.push_back(ph.clearance[k - ph.first]);
        }
      }
    }
    if (!stance_nodes.empty()) {
      horizon::create_constraint(
          prb, "v_c_" + frame,
          trace_contact_velocity(model, fid, layout, false, "v_c_" + frame),
          {{"q", 0}, {"v", 0}}, horizon::NodeSet::list(stance_nodes));
      if (pyramid)
        horizon::create_constraint(prb, "fric_" + frame,
                                   trace_pyramid(config.mu, "fric_" + frame),
                                   {{fvar, 0}},
                                   horizon::NodeSet::list(stance_nodes), zero4,
                                   inf4);
    }
    if (!clear_nodes.empty()) {
      horizon::create_variable(prb, "z_" + frame,
                               horizon::VariableKind::parameter, 1);
      for (std::size_t i = 0; i < clear_nodes.size(); ++i)
        horizon::set_parameter_values(
            prb, "z_" + frame, clear_nodes[i],
            Eigen::VectorXd::Constant(1, clear_values[i]));
      horizon::create_constraint(
          prb, "clear_" + frame,
          trace_clearance(model, fid, layout, false, "clear_" + frame),
          {{"q", 0}, {"z_" + frame, 0}}, horizon::NodeSet::list(clear_nodes));
    }
  }
  if (parametric) set_schedule_parameters(prb, layout, schedule);
}

void set_schedule_parameters(horizon::HorizonProblem& prb,
                             const StateInputLayout& layout,
                             const ContactSchedule& schedule) {
  validate_schedule(schedule);
  if (schedule.n_nodes != prb.n_nodes)
    throw MotionError("schedule covers " + std::to_string(schedule.n_nodes) +
                      " nodes, problem has " + std::to_string(prb.n_nodes));
  const Eigen::VectorXd zero3 = Eigen::VectorXd::Zero(3);
  const Eigen::VectorXd stance_lo =
      (Eigen::VectorXd(3) << -kInf, -kInf, 0.0).finished();
  const Eigen::VectorXd stance_hi = Eigen::VectorXd::Constant(3, kInf);
  const int n = prb.n_nodes;
  for (int c = 0; c < layout.n_contacts(); ++c) {
    const std::string& frame = layout.contact_frames[c];
    if (!prb.has_variable("sigma_" + frame))
      throw MotionError("problem was not built with a parametric schedule");
    Eigen::MatrixXd sigma(1, n + 1), z(1, n + 1);
    for (int k = 0; k < n; ++k) {
      const bool stance = in_stance(schedule, c, k);
      sigma(0, k) = stance ? 1.0 : 0.0;
      z(0, k) = clearance_at(schedule, c, k);
      horizon::set_bounds(prb, force_var(frame), stance ? stance_lo : zero3,
                          stance ? stance_hi : zero3,
                          horizon::NodeSet::single(k));
    }
    sigma(0, n) = 1.0;
    z(0, n) = 0.0;
    horizon::set_parameter_values(prb, "sigma_" + frame, sigma);
    horizon::set_parameter_values(prb, "z_" + frame, z);
  }
}

Scenario build_leap(const urdf::KinematicModel& model,
                    const ScenarioConfig& config0) {
  const ScenarioConfig config = with_defaults(config0, 50, 0.02);
  require_quadruped(config, "leap");
  const int n = config.n_nodes;
  if (n < 10) throw MotionError("leap horizon too short");

  Scenario sc = start_scenario(model, config);

  const int fs = 3 * n / 10, fe = 6 * n / 10;
  const int hs = 44 * n / 100, he = 74 * n / 100;
  sc.schedule.n_nodes = n;
  sc.schedule.frames = config.contact_frames;
  sc.schedule.phases.resize(4);
  for (int c = 0; c < 4; ++c) {
    const bool front = c < 2;
    const int a = front ? fs : hs, b = front ? fe : he;
    sc.schedule.phases[c] = {{PhaseKind::stance, 0, a - 1, {}},
                             {PhaseKind::swing, a, b, {}},
                             {PhaseKind::stance, b + 1, n - 1, {}}};
  }
  apply_contact_schedule(sc.problem, model, sc.layout, sc.schedule, config);
  guess_static_forces(sc.problem, sc.layout, sc.schedule, model);

  const Eigen::Vector3d p_des =
      Eigen::Vector3d(sc.q0.head<3>()) + config.p_des_offset;
  add_terminal_posture(sc.problem, sc.layout, p_des,
                       Eigen::Vector4d(sc.q0.segment<4>(3)),
                       sc.q0.tail(sc.layout.n_joints));
  horizon::create_constraint(
      sc.problem, "v_final",
      trace_slice(sc.layout.nv, 0, Eigen::VectorXd::Zero(sc.layout.nv),
                  "v_final"),
      {{"v", 0}}, horizon::NodeSet::final());

  transcription::apply_multiple_shooting(sc.problem, config.integrator);
  return sc;
}

Scenario build_turn(const urdf::KinematicModel& model,
                    const ScenarioConfig& config0) {
  const ScenarioConfig config = with_defaults(config0, 80, 0.025);
  require_quadruped(config, "turn");
  if (!std::isfinite(config.turn_angle))
    throw MotionError("turn angle must be finite");
  const int n = config.n_nodes;
  const int swing = std::max(2, 6 * n / 80);
  const int gap = std::max(1, 3 * n / 80);
  const int buffer = n - 8 * (swing + gap);
  if (buffer < 1) throw MotionError("turn horizon too short for 8 steps");

  Scenario sc = start_scenario(model, config);

  sc.schedule.n_nodes = n;
  sc.schedule.frames = config.contact_frames;
  sc.schedule.phases.resize(4);
  std::vector<std::vector<std::pair<int, int>>> swings(4);
  for (int g = 0; g < 8; ++g) {
    const int start = buffer + g * (swing + gap);
    swings[kCrawlOrder[g % 4]].push_back({start, start + swing - 1});
  }
  for (int c = 0; c < 4; ++c) {
    int cursor = 0;
    for (const auto& [a, b] : swings[c]) {
      if (a > cursor)
        sc.schedule.phases[c].push_back({PhaseKind::stance, cursor, a - 1, {}});
      sc.schedule.phases[c].push_back(
          {PhaseKind::swing, a, b,
           triangular_clearance(b - a + 1, config.clearance_apex)});
      cursor = b + 1;
    }
    if (cursor < n)
      sc.schedule.phases[c].push_back({PhaseKind::stance, cursor, n - 1, {}});
  }
  apply_contact_schedule(sc.problem, model, sc.layout, sc.schedule, config);
  guess_static_forces(sc.problem, sc.layout, sc.schedule, model);

  const double half = 0.5 * config.turn_angle;
  const Eigen::Vector4d rho_des(0.0, 0.0, std::sin(half), std::cos(half));
  add_terminal_posture(sc.problem, sc.layout, Eigen::Vector3d(sc.q0.head<3>()),
                       rho_des, sc.q0.tail(sc.layout.n_joints));

  transcription::apply_multiple_shooting(sc.problem, config.integrator);
  return sc;
}

Scenario build_walk(const urdf::KinematicModel& model,
                    const ScenarioConfig& config0) {
  const ScenarioConfig config = with_defaults(config0, 40, 0.025);
  require_quadruped(config, "walk");
  const int n = config.n_nodes;
  if (n < 8 || n % 4 != 0)
    throw MotionError("walk cycle needs a node count divisible by 4");
  const int step = n / 4;

  Scenario sc = start_scenario(model, config);

  sc.schedule.n_nodes = n;
  sc.schedule.frames = config.contact_frames;
  sc.schedule.phases.resize(4);
  for (int i = 0; i < 4; ++i) {
    const int c = kCrawlOrder[i];
    const int a = i * step, b = (i + 1) * step - 1;
    auto& ph = sc.schedule.phases[c];
    if (a > 0) ph.push_back({PhaseKind::stance, 0, a - 1, {}});
    ph.push_back({PhaseKind::swing, a, b,
                  triangular_clearance(step, config.clearance_apex)});
    if (b < n - 1) ph.push_back({PhaseKind::stance, b + 1, n - 1, {}});
  }
  apply_contact_schedule(sc.problem, model, sc.layout, sc.schedule, config,
                         true);
  guess_static_forces(sc.problem, sc.layout, sc.schedule, model);

  horizon::create_cost(sc.problem, "v_ref",
                       trace_slice(sc.layout.nv, 0, config.v_ref, "v_ref"),
                       {{"v", 0}}, horizon::NodeSet::all(), config.w_v_ref);
  horizon::create_cost(
      sc.problem, "postural",
      trace_slice(sc.layout.nq, 7, sc.q0.tail(sc.layout.n_joints), "postural"),
      {{"q", 0}}, horizon::NodeSet::all(), config.w_postural);

  transcription::apply_multiple_shooting(sc.problem, config.integrator);
  return sc;
}

double max_defect(const horizon::HorizonProblem& prb,
                  const solver::SolveResult& result,
                  transcription::IntegratorKind kind) {
  std::vector<const horizon::VariableDecl*> states, inputs;
  for (const auto& v : prb.variables) {
    if (v.kind == horizon::VariableKind::state) states.push_back(&v);
    if (v.kind == horizon::VariableKind::input) inputs.push_back(&v);
  }
  auto pack = [&](const std::vector<const horizon::VariableDecl*>& vars,
                  int node) {
    int dim = 0;
    for (const auto* v : vars) dim += v->dim;
    Eigen::VectorXd out(dim);
    int at = 0;
    for (const auto* v : vars) {
      out.segment(at, v->dim) = result.trajectories.at(v->name).col(node);
      at += v->dim;
    }
    return out;
  };
  double defect = 0.0;
  for (int k = 0; k < prb.n_nodes; ++k) {
    const Eigen::VectorXd pred = transcription::integrate(
        prb.dynamics, pack(states, k), pack(inputs, k), prb.dt, kind,
        prb.velocity_offset, prb.quaternion_offset);
    defect = std::max(
        defect, (pred - pack(states, k + 1)).lpNorm<Eigen::Infinity>());
  }
  return defect;
}

MpcLog run_receding_horizon(Scenario& sc, const ScenarioConfig& config) {
  MpcLog log;
  if (config.n_mpc_iterations <= 0) return log;
  horizon::HorizonProblem& prb = sc.problem;
  if (!prb.transcribed)
    throw MotionError("receding horizon needs a transcribed problem");

  const horizon::Nlp structure = horizon::assemble_nlp(prb);
  ContactSchedule sched = sc.schedule;
  solver::SolveResult prev;
  bool have_prev = false;

  for (int it = 0; it < config.n_mpc_iterations; ++it) {
    solver::SolveResult res =
        solver::solve_ilqr(prb, config.solver_options, have_prev ? &prev : nullptr);
    MpcStep step;
    step.status = res.status;
    step.iterations = res.iterations;
    step.objective = res.objective;
    if (res.status == solver::SolveStatus::diverged ||
        res.status == solver::SolveStatus::line_search_failure) {
      log.steps.push_back(std::move(step));
      log.aborted = true;
      break;
    }
    step.max_defect = max_defect(prb, res, config.integrator);
    step.x0 = Eigen::VectorXd(sc.layout.nx());
    step.x0.head(sc.layout.nq) = res.trajectories.at("q").col(0);
    step.x0.tail(sc.layout.nv) = res.trajectories.at("v").col(0);
    step.u0 = Eigen::VectorXd(sc.layout.nu());
    step.u0.head(sc.layout.nv) = res.trajectories.at("a").col(0);
    for (int c = 0; c < sc.layout.n_contacts(); ++c)
      step.u0.segment(sc.layout.force_offset(c), 3) =
          res.trajectories.at(force_var(sc.layout.contact_frames[c])).col(0);
    if (it == 0) log.cold_iterations = res.iterations;

    const Eigen::VectorXd x1 = transcription::integrate(
        prb.dynamics, step.x0, step.u0, prb.dt, config.integrator,
        prb.velocity_offset, prb.quaternion_offset);
    log.steps.push_back(std::move(step));

    sched = rotate_schedule(sched, 1);
    set_schedule_parameters(prb, sc.layout, sched);
    solver::warm_start(prb, res, 1);
    solver::shift_multipliers(structure, res, 1);
    const Eigen::VectorXd q1 = x1.head(sc.layout.nq);
    const Eigen::VectorXd v1 = x1.tail(sc.layout.nv);
    horizon::set_bounds(prb, "q", q1, q1, horizon::NodeSet::single(0));
    horizon::set_bounds(prb, "v", v1, v1, horizon::NodeSet::single(0));
    horizon::set_guess(prb, "q", q1, horizon::NodeSet::single(0));
    horizon::set_guess(prb, "v", v1, horizon::NodeSet::single(0));
    prev = std::move(res);
    have_prev = true;
  }
  return log;
}

}  // namespace skyline::motion
