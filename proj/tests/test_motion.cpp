#include "skyline/motion.hpp"

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "doctest.h"
#include "skyline/horizon.hpp"
#include "skyline/kindyn.hpp"
#include "skyline/solver.hpp"
#include "skyline/transcription.hpp"
#include "skyline/urdf.hpp"
#include "testutil.hpp"

namespace mo = skyline::motion;
namespace hz = skyline::horizon;
namespace kd = skyline::kindyn;
namespace tc = skyline::transcription;
namespace urdf = skyline::urdf;

using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string asset(const std::string& name) {
  return std::string(SKYLINE_ASSET_DIR) + "/" + name;
}

urdf::KinematicModel quad_floating() {
  return urdf::attach_floating_base(urdf::parse_urdf_file(asset("quad.urdf")));
}

mo::ScenarioConfig quad_config() {
  mo::ScenarioConfig c;
  c.contact_frames = {"lf_foot", "rf_foot", "lh_foot", "rh_foot"};
  // Coordinate order walks the tree level by level: rolls, pitches, knees.
  c.q0_joints.resize(12);
  c.q0_joints << 0, 0, 0, 0, 0.7, 0.7, 0.7, 0.7, -1.4, -1.4, -1.4, -1.4;
  return c;
}

const hz::TermDecl* find_term(const hz::HorizonProblem& prb,
                              const std::string& name) {
  for (const auto& t : prb.terms)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<int> constraint_nodes(const hz::Nlp& nlp, const std::string& term) {
  std::vector<int> nodes;
  for (const auto& b : nlp.constraints)
    if (b.term == term) nodes.push_back(b.node);
  return nodes;
}

// Same stance/swing split on every foot; all stance when last_stance = n - 1.
mo::ContactSchedule uniform_schedule(int n, const std::vector<std::string>& frames,
                                     int last_stance) {
  mo::ContactSchedule s;
  s.n_nodes = n;
  s.frames = frames;
  for (std::size_t c = 0; c < frames.size(); ++c) {
    std::vector<mo::Phase> ph{{mo::PhaseKind::stance, 0, last_stance, {}}};
    if (last_stance < n - 1)
      ph.push_back({mo::PhaseKind::swing, last_stance + 1, n - 1, {}});
    s.phases.push_back(std::move(ph));
  }
  return s;
}

std::pair<mo::PhaseKind, double> node_state(const mo::ContactSchedule& s, int c,
                                            int k) {
  return {mo::in_stance(s, c, k) ? mo::PhaseKind::stance : mo::PhaseKind::swing,
          mo::clearance_at(s, c, k)};
}

}  // namespace

TEST_CASE("quad layout counts states, inputs and offsets") {
  const auto model = quad_floating();
  auto prb = hz::create_problem(10);
  const auto cfg = [&] {
    auto c = quad_config();
    c.dt = 0.02;
    return c;
  }();
  const mo::StateInputLayout L = mo::build_common(prb, model, cfg);

  CHECK(L.nq == 19);
  CHECK(L.nv == 18);
  CHECK(L.n_joints == 12);
  CHECK(L.nx() == 37);
  CHECK(L.nu() == 30);
  CHECK(L.floating);
  CHECK(L.v_offset() == 19);
  CHECK(L.omega_offset() == 22);
  CHECK(L.thetadot_offset() == 25);
  CHECK(L.force_offset(3) == 27);
  CHECK(prb.nx() == 37);
  CHECK(prb.nu() == 30);
  CHECK(prb.quaternion_offset == 3);
  CHECK(prb.velocity_offset == 19);
  CHECK(prb.has_variable("f_lh_foot"));

  const VectorXd q0 = mo::initial_configuration(model, cfg);
  const hz::Nlp nlp = hz::assemble_nlp(prb);
  const int qo = nlp.offset("q", 0);
  CHECK(nlp.lower.segment(qo, 19).isApprox(q0));
  CHECK(nlp.upper.segment(qo, 19).isApprox(q0));
  const int vo = nlp.offset("v", 0);
  CHECK(nlp.lower.segment(vo, 18).isZero());
  CHECK(nlp.upper.segment(vo, 18).isZero());
  CHECK(nlp.lower[nlp.offset("q", 5)] == -kInf);
}

TEST_CASE("initial configuration rests the feet on the floor") {
  const auto model = quad_floating();
  const auto cfg = quad_config();
  const VectorXd q0 = mo::initial_configuration(model, cfg);
  CHECK(q0.size() == 19);
  CHECK(q0[2] > 0.3);
  CHECK(q0.segment<4>(3).isApprox(Eigen::Vector4d(0, 0, 0, 1)));
  for (const auto& f : cfg.contact_frames) {
    const auto fk = kd::forward_kinematics(model, q0, f);
    CHECK(std::abs(fk.position.z()) < 1e-12);
  }

  auto bad = cfg;
  bad.q0_joints = VectorXd::Zero(5);
  CHECK_THROWS_AS(mo::initial_configuration(model, bad), mo::MotionError);
}

TEST_CASE("schedule validation rejects gaps, overlaps and bad profiles") {
  const std::vector<std::string> frames{"a"};
  mo::ContactSchedule s;
  s.n_nodes = 10;
  s.frames = frames;

  s.phases = {{{mo::PhaseKind::stance, 0, 4, {}}, {mo::PhaseKind::swing, 6, 9, {}}}};
  CHECK_THROWS_WITH_AS(mo::validate_schedule(s),
                       doctest::Contains("starts at node 6"), mo::MotionError);

  s.phases = {{{mo::PhaseKind::stance, 0, 4, {}}, {mo::PhaseKind::swing, 3, 9, {}}}};
  CHECK_THROWS_AS(mo::validate_schedule(s), mo::MotionError);

  s.phases = {{{mo::PhaseKind::stance, 0, 9, {1.0}}}};
  CHECK_THROWS_WITH_AS(mo::validate_schedule(s),
                       doctest::Contains("stance phase carries"),
                       mo::MotionError);

  s.phases = {{{mo::PhaseKind::stance, 0, 4, {}},
               {mo::PhaseKind::swing, 5, 9, {0.1, 0.2}}}};
  CHECK_THROWS_WITH_AS(mo::validate_schedule(s), doctest::Contains("2 values"),
                       mo::MotionError);

  s.phases = {{{mo::PhaseKind::stance, 0, 7, {}}}};
  CHECK_THROWS_WITH_AS(mo::validate_schedule(s),
                       doctest::Contains("horizon needs"), mo::MotionError);

  s.phases = {{{mo::PhaseKind::stance, 0, 4, {}},
               {mo::PhaseKind::swing, 5, 9, {0.1, 0.2, 0.3, 0.2, 0.1}}}};
  CHECK_NOTHROW(mo::validate_schedule(s));
  CHECK(mo::in_stance(s, 0, 4));
  CHECK_FALSE(mo::in_stance(s, 0, 5));
  CHECK(mo::clearance_at(s, 0, 7) == 0.3);
  CHECK(mo::clearance_at(s, 0, 2) == 0.0);
  CHECK_THROWS_AS(mo::in_stance(s, 0, 10), mo::MotionError);
  CHECK_THROWS_AS(mo::in_stance(s, 1, 0), mo::MotionError);
}

TEST_CASE("stance nodes carry velocity rows, swing nodes zero the force") {
  // Stance on [0, 10] and swing on [11, 20] over a 21-interval horizon gives
  // 11 velocity-pin nodes and 10 zero-force nodes per foot.
  const auto model = quad_floating();
  auto cfg = quad_config();
  cfg.dt = 0.02;
  cfg.friction = "none";
  auto prb = hz::create_problem(21);
  const auto L = mo::build_common(prb, model, cfg);
  const auto s = uniform_schedule(21, cfg.contact_frames, 10);
  mo::apply_contact_schedule(prb, model, L, s, cfg);

  const hz::Nlp nlp = hz::assemble_nlp(prb);
  for (const auto& f : cfg.contact_frames) {
    const auto nodes = constraint_nodes(nlp, "v_c_" + f);
    REQUIRE(nodes.size() == 11);
    CHECK(nodes.front() == 0);
    CHECK(nodes.back() == 10);
    CHECK(constraint_nodes(nlp, "fric_" + f).empty());
    for (int k = 0; k < 21; ++k) {
      const int at = nlp.offset("f_" + f, k);
      if (k <= 10) {
        CHECK(nlp.lower.segment(at, 3) == Vector3d(-kInf, -kInf, 0.0));
        CHECK(nlp.upper.segment(at, 3) == Vector3d(kInf, kInf, kInf));
      } else {
        CHECK(nlp.lower.segment(at, 3).isZero());
        CHECK(nlp.upper.segment(at, 3).isZero());
      }
    }
  }

  auto wrong = s;
  wrong.n_nodes = 20;
  wrong.phases[0].back().last = 19;
  CHECK_THROWS_AS(mo::apply_contact_schedule(prb, model, L, wrong, cfg),
                  mo::MotionError);
}

TEST_CASE("friction pyramid admits the cone interior and rejects slip") {
  const auto model = quad_floating();
  auto cfg = quad_config();
  cfg.dt = 0.02;
  cfg.mu = 0.5;
  auto prb = hz::create_problem(4);
  const auto L = mo::build_common(prb, model, cfg);
  const auto s = uniform_schedule(4, cfg.contact_frames, 3);
  mo::apply_contact_schedule(prb, model, L, s, cfg);

  const auto* t = find_term(prb, "fric_lf_foot");
  REQUIRE(t != nullptr);
  CHECK(t->lower == VectorXd::Zero(4));
  CHECK(t->upper == VectorXd::Constant(4, kInf));

  const VectorXd inside = t->fn({Vector3d(0.2, -0.3, 1.0)});
  CHECK(inside.minCoeff() >= 0.0);
  const VectorXd slip = t->fn({Vector3d(0.8, 0.0, 1.0)});
  CHECK(slip.minCoeff() < 0.0);
  const VectorXd rest = t->fn({Vector3d::Zero()});
  CHECK(rest.isZero());
}

TEST_CASE("schedule rotation is cyclic and keeps clearance values") {
  auto cfg = quad_config();
  cfg.clearance_apex = 0.05;
  const auto model = quad_floating();
  const auto sc = mo::build_walk(model, cfg);
  const auto& s = sc.schedule;
  const int n = s.n_nodes;

  const auto r1 = mo::rotate_schedule(s, 1);
  for (int c = 0; c < 4; ++c)
    for (int k = 0; k < n; ++k)
      CHECK(node_state(r1, c, k) == node_state(s, c, (k + 1) % n));

  auto acc = s;
  for (int i = 0; i < n; ++i) acc = mo::rotate_schedule(acc, 1);
  for (int c = 0; c < 4; ++c)
    for (int k = 0; k < n; ++k) CHECK(node_state(acc, c, k) == node_state(s, c, k));

  const auto back = mo::rotate_schedule(s, -3);
  for (int c = 0; c < 4; ++c)
    for (int k = 0; k < n; ++k)
      CHECK(node_state(back, c, k) == node_state(s, c, (k - 3 + n) % n));
}

TEST_CASE("triangular clearance rises to the apex and returns to zero") {
  const auto z = mo::triangular_clearance(11, 0.08);
  REQUIRE(z.size() == 11);
  CHECK(z.front() == 0.0);
  CHECK(z.back() == 0.0);
  CHECK(z[5] == doctest::Approx(0.08));
  for (int k = 0; k < 11; ++k) CHECK(z[k] == doctest::Approx(z[10 - k]));
  for (int k = 1; k <= 5; ++k) CHECK(z[k] > z[k - 1]);
  CHECK(mo::triangular_clearance(1, 0.08) == std::vector<double>{0.08});
  CHECK(mo::triangular_clearance(0, 0.08).empty());
}

TEST_CASE("standing forces satisfy the floating-base dynamics rows") {
  // The residual is affine in the contact forces and the foot placement has
  // full row rank, so the minimum-norm solve of the 6 base rows for the 12
  // force components must zero the residual exactly.
  const auto model = quad_floating();
  auto cfg = quad_config();
  cfg.dt = 0.02;
  auto prb = hz::create_problem(5);
  const auto L = mo::build_common(prb, model, cfg);
  mo::add_underactuation(prb, model, L, cfg);

  const auto* feas = find_term(prb, "feas");
  REQUIRE(feas != nullptr);
  CHECK(feas->fn.n_residuals() == 6);

  double mass = 0.0;
  for (const auto& l : model.links) mass += l.mass;
  const double weight = mass * 9.81;
  const VectorXd q0 = mo::initial_configuration(model, cfg);
  const VectorXd zero_v = VectorXd::Zero(18);
  auto eval = [&](const std::array<Vector3d, 4>& f) {
    return feas->fn({q0, zero_v, zero_v, f[0], f[1], f[2], f[3]});
  };
  const std::array<Vector3d, 4> none{Vector3d::Zero(), Vector3d::Zero(),
                                     Vector3d::Zero(), Vector3d::Zero()};

  // Without forces the residual is the unsupported weight along z.
  const VectorXd r0 = eval(none);
  CHECK(std::abs(r0[0]) < 1e-9);
  CHECK(std::abs(r0[1]) < 1e-9);
  CHECK(std::abs(std::abs(r0[2]) - weight) < 1e-9);

  MatrixXd A(6, 12);
  for (int j = 0; j < 12; ++j) {
    auto f = none;
    f[j / 3][j % 3] = 1.0;
    A.col(j) = r0 - eval(f);
  }
  const VectorXd fstar = A.completeOrthogonalDecomposition().solve(r0);
  std::array<Vector3d, 4> fs;
  for (int c = 0; c < 4; ++c) fs[c] = fstar.segment<3>(3 * c);
  const VectorXd r = eval(fs);
  CHECK(r.lpNorm<Eigen::Infinity>() < 1e-8);
  CHECK(fstar[2] + fstar[5] + fstar[8] + fstar[11] ==
        doctest::Approx(weight).epsilon(1e-9));

  // The cross-check through the plain inverse-dynamics wrapper.
  kd::ContactForceSet cfs;
  for (int c = 0; c < 4; ++c) cfs.forces.push_back({cfg.contact_frames[c], fs[c]});
  const VectorXd tau = kd::inverse_dynamics(model, q0, zero_v, zero_v, cfs);
  CHECK((r - tau.head(6)).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("torque limit rows use the urdf effort bounds") {
  const auto model = quad_floating();
  auto cfg = quad_config();
  cfg.dt = 0.02;
  cfg.torque_limits = true;
  auto prb = hz::create_problem(3);
  const auto L = mo::build_common(prb, model, cfg);
  mo::add_underactuation(prb, model, L, cfg);

  const auto* tau = find_term(prb, "tau");
  REQUIRE(tau != nullptr);
  CHECK(tau->fn.n_residuals() == 12);
  CHECK(tau->lower == VectorXd::Constant(12, -80.0));
  CHECK(tau->upper == VectorXd::Constant(12, 80.0));
}

TEST_CASE("underactuation needs a floating base") {
  const auto pend = urdf::parse_urdf_file(asset("pendulum.urdf"));
  mo::ScenarioConfig cfg;
  cfg.dt = 0.05;
  cfg.q0_joints = VectorXd::Zero(1);
  auto prb = hz::create_problem(4);
  const auto L = mo::build_common(prb, pend, cfg);
  CHECK(L.nx() == 2);
  CHECK(L.nu() == 1);
  CHECK(prb.quaternion_offset == -1);
  CHECK_THROWS_AS(mo::add_underactuation(prb, pend, L, cfg), mo::MotionError);
}

TEST_CASE("gated contact rows match the plain kinematics when active") {
  const auto model = quad_floating();
  auto cfg = quad_config();
  cfg.n_nodes = 8;
  cfg.dt = 0.05;
  const auto sc = mo::build_walk(model, cfg);

  std::mt19937 rng(7);
  VectorXd q = sc.q0;
  VectorXd v(18);
  for (int i = 0; i < 18; ++i) v[i] = testutil::uniform(rng, -0.5, 0.5);
  for (int i = 7; i < 19; ++i) q[i] += testutil::uniform(rng, -0.2, 0.2);

  for (const auto& f : cfg.contact_frames) {
    const auto* vc = find_term(sc.problem, "v_c_" + f);
    const auto* clear = find_term(sc.problem, "clear_" + f);
    REQUIRE(vc != nullptr);
    REQUIRE(clear != nullptr);

    const VectorXd one = VectorXd::Ones(1);
    const VectorXd zero = VectorXd::Zero(1);
    const VectorXd active = vc->fn({q, v, one});
    const VectorXd ref = kd::frame_velocity(model, q, v, f).linear;
    CHECK((active - ref).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK(vc->fn({q, v, zero}).isZero());

    const VectorXd z = VectorXd::Constant(1, 0.03);
    const double height = kd::forward_kinematics(model, q, f).position.z();
    const VectorXd pinned = clear->fn({q, z, zero});
    CHECK(pinned[0] == doctest::Approx(height - 0.03).epsilon(1e-12));
    CHECK(clear->fn({q, z, one}).isZero());
  }
}

TEST_CASE("parametric bounds and sigma values follow the schedule") {
  const auto model = quad_floating();
  auto cfg = quad_config();
  cfg.n_nodes = 8;
  cfg.dt = 0.05;
  auto sc = mo::build_walk(model, cfg);
  const int n = 8;

  const hz::Nlp before = hz::assemble_nlp(sc.problem);
  const auto rotated = mo::rotate_schedule(sc.schedule, 1);
  mo::set_schedule_parameters(sc.problem, sc.layout, rotated);
  const hz::Nlp after = hz::assemble_nlp(sc.problem);

  CHECK(before.n_constraint_rows == after.n_constraint_rows);
  CHECK(before.n_decision == after.n_decision);
  CHECK(before.constraints.size() == after.constraints.size());

  for (int c = 0; c < 4; ++c) {
    const std::string f = cfg.contact_frames[c];
    for (int k = 0; k < n; ++k) {
      const int at = after.offset("f_" + f, k);
      if (mo::in_stance(rotated, c, k)) {
        CHECK(after.lower[at + 2] == 0.0);
        CHECK(after.upper[at + 2] == kInf);
      } else {
        CHECK(after.lower.segment(at, 3).isZero());
        CHECK(after.upper.segment(at, 3).isZero());
      }
    }
  }

  auto fixed_prb = hz::create_problem(n);
  auto cfg2 = cfg;
  const auto L2 = mo::build_common(fixed_prb, model, cfg2);
  mo::apply_contact_schedule(fixed_prb, model, L2, sc.schedule, cfg2, false);
  CHECK_THROWS_WITH_AS(
      mo::set_schedule_parameters(fixed_prb, L2, sc.schedule),
      doctest::Contains("parametric"), mo::MotionError);
}

TEST_CASE("leap schedule lifts the front feet first and lands them first") {
  const auto model = quad_floating();
  const auto sc = mo::build_leap(model, quad_config());
  const auto& s = sc.schedule;
  CHECK(s.n_nodes == 50);

  // Front feet swing over [15, 30], hind feet over [22, 37].
  for (int c : {0, 1}) {
    CHECK(mo::in_stance(s, c, 14));
    CHECK_FALSE(mo::in_stance(s, c, 15));
    CHECK_FALSE(mo::in_stance(s, c, 30));
    CHECK(mo::in_stance(s, c, 31));
  }
  for (int c : {2, 3}) {
    CHECK(mo::in_stance(s, c, 21));
    CHECK_FALSE(mo::in_stance(s, c, 22));
    CHECK_FALSE(mo::in_stance(s, c, 37));
    CHECK(mo::in_stance(s, c, 38));
  }
  // Hind feet alone push before flight; front feet alone catch the landing.
  for (int k = 15; k <= 21; ++k) {
    CHECK(mo::in_stance(s, 2, k));
    CHECK_FALSE(mo::in_stance(s, 0, k));
  }
  for (int k = 22; k <= 30; ++k)
    for (int c = 0; c < 4; ++c) CHECK_FALSE(mo::in_stance(s, c, k));
  for (int k = 31; k <= 37; ++k) {
    CHECK(mo::in_stance(s, 0, k));
    CHECK_FALSE(mo::in_stance(s, 2, k));
  }

  for (const char* t : {"p_final", "rho_final", "theta_final", "v_final"})
    CHECK(find_term(sc.problem, t) != nullptr);
  CHECK(sc.problem.transcribed);
  CHECK(find_term(sc.problem, "feas") != nullptr);
}

TEST_CASE("turn schedule steps one foot at a time, twice around") {
  const auto model = quad_floating();
  auto cfg = quad_config();
  const auto sc = mo::build_turn(model, cfg);
  const auto& s = sc.schedule;
  CHECK(s.n_nodes == 80);

  int n_swings = 0;
  for (int c = 0; c < 4; ++c) {
    int per_foot = 0;
    for (const auto& ph : s.phases[c])
      if (ph.kind == mo::PhaseKind::swing) {
        ++per_foot;
        CHECK(ph.last - ph.first + 1 == 6);
        REQUIRE(ph.clearance.size() == 6);
        CHECK(ph.clearance.front() == 0.0);
        CHECK(ph.clearance.back() == 0.0);
        // A 6-node triangle peaks one node off center at apex * 4/5.
        CHECK(*std::max_element(ph.clearance.begin(), ph.clearance.end()) ==
              doctest::Approx(0.8 * cfg.clearance_apex));
      }
    CHECK(per_foot == 2);
    n_swings += per_foot;
  }
  CHECK(n_swings == 8);

  for (int k = 0; k < 80; ++k) {
    int airborne = 0;
    for (int c = 0; c < 4; ++c)
      if (!mo::in_stance(s, c, k)) ++airborne;
    CHECK(airborne <= 1);
  }
  for (int k = 0; k < 8; ++k)
    for (int c = 0; c < 4; ++c) CHECK(mo::in_stance(s, c, k));

  // LH steps first.
  CHECK_FALSE(mo::in_stance(s, 2, 8));
  for (int c : {0, 1, 3}) CHECK(mo::in_stance(s, c, 8));

  CHECK(find_term(sc.problem, "rho_final") != nullptr);
  CHECK(find_term(sc.problem, "v_final") == nullptr);

  auto short_cfg = cfg;
  short_cfg.n_nodes = 16;
  CHECK_THROWS_AS(mo::build_turn(model, short_cfg), mo::MotionError);
  auto nan_cfg = cfg;
  nan_cfg.turn_angle = std::nan("");
  CHECK_THROWS_AS(mo::build_turn(model, nan_cfg), mo::MotionError);
}

TEST_CASE("walk template covers one crawl cycle at quarter duty") {
  const auto model = quad_floating();
  const auto sc = mo::build_walk(model, quad_config());
  const auto& s = sc.schedule;
  CHECK(s.n_nodes == 40);

  // Swing order LH, LF, RH, RF in consecutive 10-node windows.
  const int order[4] = {2, 0, 3, 1};
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 40; ++k)
      CHECK(mo::in_stance(s, order[i], k) == (k < 10 * i || k >= 10 * (i + 1)));

  CHECK(find_term(sc.problem, "v_ref") != nullptr);
  CHECK(find_term(sc.problem, "postural") != nullptr);
  CHECK(find_term(sc.problem, "p_final") == nullptr);
  CHECK(sc.problem.has_variable("sigma_lf_foot"));
  CHECK(sc.problem.has_variable("z_rh_foot"));

  auto bad = quad_config();
  bad.n_nodes = 10;
  CHECK_THROWS_AS(mo::build_walk(model, bad), mo::MotionError);
  auto few = quad_config();
  few.contact_frames.pop_back();
  CHECK_THROWS_AS(mo::build_walk(model, few), mo::MotionError);
}

TEST_CASE("defect measure vanishes on an exact rollout") {
  const auto model = quad_floating();
  auto cfg = quad_config();
  cfg.n_nodes = 8;
  cfg.dt = 0.05;
  const auto sc = mo::build_walk(model, cfg);
  const auto& L = sc.layout;

  skyline::solver::SolveResult res;
  MatrixXd q(19, 9), v(18, 9), a(18, 8);
  std::vector<MatrixXd> f(4, MatrixXd::Zero(3, 8));
  std::mt19937 rng(3);
  VectorXd x(37);
  x << sc.q0, VectorXd::Zero(18);
  for (int k = 0; k < 8; ++k) {
    q.col(k) = x.head(19);
    v.col(k) = x.tail(18);
    VectorXd u = VectorXd::Zero(30);
    for (int i = 0; i < 30; ++i) u[i] = testutil::uniform(rng, -0.1, 0.1);
    a.col(k) = u.head(18);
    for (int c = 0; c < 4; ++c) f[c].col(k) = u.segment(L.force_offset(c), 3);
    x = tc::integrate(sc.problem.dynamics, x, u, cfg.dt, cfg.integrator,
                      sc.problem.velocity_offset, sc.problem.quaternion_offset);
  }
  q.col(8) = x.head(19);
  v.col(8) = x.tail(18);
  res.trajectories["q"] = q;
  res.trajectories["v"] = v;
  res.trajectories["a"] = a;
  for (int c = 0; c < 4; ++c)
    res.trajectories["f_" + cfg.contact_frames[c]] = f[c];

  CHECK(mo::max_defect(sc.problem, res, cfg.integrator) == 0.0);

  res.trajectories["q"](2, 4) += 1e-3;
  const double d = mo::max_defect(sc.problem, res, cfg.integrator);
  CHECK(d >= 0.5e-3);
  CHECK(d < 5e-3);
}

TEST_CASE("receding horizon records steps and survives rotation") {
  const auto model = quad_floating();
  auto cfg = quad_config();
  cfg.n_nodes = 8;
  cfg.dt = 0.05;
  cfg.v_ref = Vector3d(0.1, 0.0, 0.0);
  cfg.solver_options.max_iterations = 60;
  cfg.solver_options.tolerance = 1e-3;
  cfg.solver_options.verbosity = 0;

  auto sc = mo::build_walk(model, cfg);
  auto none = cfg;
  none.n_mpc_iterations = 0;
  CHECK(mo::run_receding_horizon(sc, none).steps.empty());

  cfg.n_mpc_iterations = 2;
  const auto log = mo::run_receding_horizon(sc, cfg);
  REQUIRE(log.steps.size() <= 2);
  REQUIRE(!log.steps.empty());
  CHECK(log.cold_iterations == log.steps[0].iterations);
  for (const auto& st : log.steps) {
    if (st.status == skyline::solver::SolveStatus::diverged ||
        st.status == skyline::solver::SolveStatus::line_search_failure)
      continue;
    CHECK(st.x0.size() == 37);
    CHECK(st.u0.size() == 30);
    CHECK(std::isfinite(st.objective));
    CHECK(std::isfinite(st.max_defect));
  }
}

TEST_CASE("build configuration errors are reported") {
  const auto model = quad_floating();
  auto cfg = quad_config();

  auto prb = hz::create_problem(4);
  auto zero_dt = cfg;
  CHECK_THROWS_WITH_AS(mo::build_common(prb, model, zero_dt),
                       doctest::Contains("dt"), mo::MotionError);

  auto neg = cfg;
  neg.dt = 0.02;
  neg.w_min_v = -1.0;
  CHECK_THROWS_AS(mo::build_common(prb, model, neg), mo::MotionError);

  auto ghost = cfg;
  ghost.dt = 0.02;
  ghost.contact_frames[1] = "no_such_frame";
  CHECK_THROWS_WITH_AS(mo::build_common(prb, model, ghost),
                       doctest::Contains("no_such_frame"), mo::MotionError);

  auto bad_friction = cfg;
  bad_friction.dt = 0.02;
  bad_friction.friction = "cone";
  auto prb2 = hz::create_problem(4);
  const auto L = mo::build_common(prb2, model, [&] {
    auto c = cfg;
    c.dt = 0.02;
    return c;
  }());
  const auto s = uniform_schedule(4, cfg.contact_frames, 3);
  CHECK_THROWS_WITH_AS(
      mo::apply_contact_schedule(prb2, model, L, s, bad_friction),
      doctest::Contains("cone"), mo::MotionError);

  auto three = cfg;
  three.contact_frames.resize(3);
  CHECK_THROWS_AS(mo::build_leap(model, three), mo::MotionError);
}
