#include "skyline/transcription.hpp"

#include <cmath>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "doctest.h"
#include "skyline/autodiff.hpp"
#include "skyline/horizon.hpp"
#include "skyline/kindyn.hpp"
#include "testutil.hpp"

namespace hz = skyline::horizon;
namespace tr = skyline::transcription;
namespace ad = skyline::ad;
namespace km = skyline::km;

using ad::Value;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using hz::NodeSet;
using hz::VariableKind;
using tr::IntegratorKind;

namespace {

ad::DiffFunction exponential_dynamics() {
  // xdot = x, scalar, input unused.
  return ad::trace("xdot_x", {1, 1},
                   [](const auto& in) { return std::vector<Value>{in[0][0]}; });
}

ad::DiffFunction constant_rate_dynamics() {
  // xdot = u, scalar.
  return ad::trace("xdot_u", {1, 1},
                   [](const auto& in) { return std::vector<Value>{in[1][0]}; });
}

// Free rigid-body toy: x = [p(3), rho(4), nu(6)], u = nudot. Velocity layout
// is (linear world, angular base-local).
ad::DiffFunction body_dynamics() {
  return ad::trace("body", {13, 6}, [](const auto& in) {
    const auto& x = in[0];
    const std::array<Value, 4> rho{x[3], x[4], x[5], x[6]};
    const km::Vec3<Value> omega{x[10], x[11], x[12]};
    const auto rd = skyline::kindyn::quaternion_rate(rho, omega);
    std::vector<Value> dx;
    dx.push_back(x[7]);
    dx.push_back(x[8]);
    dx.push_back(x[9]);
    for (const Value& c : rd) dx.push_back(c);
    for (int i = 0; i < 6; ++i) dx.push_back(in[1][i]);
    return dx;
  });
}

VectorXd vec1(double v) {
  VectorXd x(1);
  x << v;
  return x;
}

double endpoint_error(const ad::DiffFunction& f, IntegratorKind kind, double dt) {
  VectorXd x = vec1(1.0);
  const VectorXd u = vec1(0.0);
  const int steps = static_cast<int>(std::lround(1.0 / dt));
  for (int i = 0; i < steps; ++i) x = tr::integrate(f, x, u, dt, kind);
  return std::abs(x[0] - std::exp(1.0));
}

// Dense constraint Jacobian assembled block by block.
MatrixXd constraint_jacobian(const hz::Nlp& nlp, const VectorXd& z) {
  MatrixXd J = MatrixXd::Zero(nlp.n_constraint_rows, nlp.n_decision);
  for (const auto& b : nlp.constraints) {
    VectorXd val;
    std::vector<MatrixXd> jac;
    b.fn.value_and_jacobian(nlp.gather(b, z), val, jac);
    for (std::size_t i = 0; i < jac.size(); ++i) {
      if (b.col_offsets[i] < 0 || jac[i].size() == 0) continue;
      J.block(b.row_offset, b.col_offsets[i], jac[i].rows(), jac[i].cols()) +=
          jac[i];
    }
  }
  return J;
}

}  // namespace

TEST_CASE("radau points") {
  for (int d = 1; d <= 5; ++d) {
    const auto pts = tr::radau_points(d);
    REQUIRE(static_cast<int>(pts.size()) == d);
    CHECK(pts.back() == 1.0);
    for (std::size_t i = 1; i < pts.size(); ++i) CHECK(pts[i] > pts[i - 1]);
    CHECK(pts.front() > 0.0);
  }
  const auto p3 = tr::radau_points(3);
  CHECK(p3[0] == doctest::Approx((4.0 - std::sqrt(6.0)) / 10.0).epsilon(1e-15));
  CHECK(p3[1] == doctest::Approx((4.0 + std::sqrt(6.0)) / 10.0).epsilon(1e-15));
  CHECK_THROWS_AS(tr::radau_points(0), tr::TranscriptionError);
  CHECK_THROWS_AS(tr::radau_points(6), tr::TranscriptionError);
}

TEST_CASE("integrator name round trip") {
  for (auto k : {IntegratorKind::euler, IntegratorKind::rk4,
                 IntegratorKind::leapfrog})
    CHECK(tr::integrator_from_string(tr::integrator_name(k)) == k);
  CHECK_THROWS_AS(tr::integrator_from_string("rk5"), tr::TranscriptionError);
}

TEST_CASE("single step closed forms") {
  auto f = exponential_dynamics();
  CHECK(tr::integrate(f, vec1(1.0), vec1(0.0), 1.0, IntegratorKind::euler)[0] ==
        2.0);
  CHECK(tr::integrate(f, vec1(1.0), vec1(0.0), 1.0, IntegratorKind::rk4)[0] ==
        doctest::Approx(65.0 / 24.0).epsilon(1e-15));

  // Constant-rate dynamics are exact for every integrator.
  auto g = constant_rate_dynamics();
  for (auto kind : {IntegratorKind::euler, IntegratorKind::rk4})
    CHECK(tr::integrate(g, vec1(0.0), vec1(1.0), 0.1, kind)[0] ==
          doctest::Approx(0.1).epsilon(1e-15));
  CHECK(tr::integrate(g, vec1(0.0), vec1(1.0), 0.1, IntegratorKind::leapfrog,
                      0)[0] == doctest::Approx(0.1).epsilon(1e-15));

  CHECK_THROWS_AS(
      tr::integrate(g, vec1(0.0), vec1(1.0), 0.1, IntegratorKind::leapfrog),
      tr::TranscriptionError);
  CHECK_THROWS_AS(tr::integrate(f, VectorXd::Zero(2), vec1(0.0), 0.1,
                                IntegratorKind::euler),
                  tr::TranscriptionError);
}

TEST_CASE("convergence order on the exponential") {
  auto f = exponential_dynamics();
  const double e1 = endpoint_error(f, IntegratorKind::rk4, 0.1);
  const double e2 = endpoint_error(f, IntegratorKind::rk4, 0.05);
  const double e3 = endpoint_error(f, IntegratorKind::rk4, 0.025);
  CHECK(std::log2(e1 / e2) > 3.9);
  CHECK(std::log2(e2 / e3) > 3.9);

  const double u1 = endpoint_error(f, IntegratorKind::euler, 0.1);
  const double u2 = endpoint_error(f, IntegratorKind::euler, 0.05);
  CHECK(std::log2(u1 / u2) == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("leapfrog advances the quaternion by the exact exponential map") {
  auto f = body_dynamics();
  std::mt19937 rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    VectorXd x(13);
    for (int i = 0; i < 13; ++i) x[i] = testutil::uniform(rng, -1.0, 1.0);
    x.segment<4>(3).normalize();
    const VectorXd u = VectorXd::Zero(6);
    const double dt = 0.08;
    const VectorXd xn =
        tr::integrate(f, x, u, dt, IntegratorKind::leapfrog, 7, 3);

    // Unit norm is preserved to roundoff.
    CHECK(std::abs(xn.segment<4>(3).norm() - x.segment<4>(3).norm()) < 1e-14);

    // Constant body-frame angular velocity has the closed-form update
    // rho (x) exp(dt*omega/2), compared through Eigen's angle-axis form.
    const Eigen::Vector3d w = x.segment<3>(10);
    Eigen::Quaterniond rho(x[6], x[3], x[4], x[5]);
    Eigen::Quaterniond dq(Eigen::AngleAxisd(dt * w.norm(), w.normalized()));
    const Eigen::Quaterniond rn = rho * dq;
    CHECK(std::abs(xn[3] - rn.x()) < 1e-14);
    CHECK(std::abs(xn[4] - rn.y()) < 1e-14);
    CHECK(std::abs(xn[5] - rn.z()) < 1e-14);
    CHECK(std::abs(xn[6] - rn.w()) < 1e-14);

    // Linear part drifts with the half-step velocity; u = 0 keeps it exact.
    CHECK((xn.segment<3>(0) - (x.segment<3>(0) + dt * x.segment<3>(7))).norm() <
          1e-14);
    CHECK((xn.segment<6>(7) - x.segment<6>(7)).norm() == 0.0);
  }
}

TEST_CASE("multiple shooting adds defect and norm rows") {
  auto prb = hz::create_problem(10);
  hz::create_variable(prb, "x", VariableKind::state, 13);
  hz::create_variable(prb, "u", VariableKind::input, 6);
  prb.quaternion_offset = 3;
  prb.velocity_offset = 7;
  hz::set_dynamics(prb, body_dynamics(), 0.05);
  tr::apply_multiple_shooting(prb, IntegratorKind::rk4);

  auto nlp = hz::assemble_nlp(prb);
  int defect_blocks = 0, norm_rows = 0;
  for (const auto& b : nlp.constraints) {
    if (b.term == "ms_defect") {
      ++defect_blocks;
      CHECK(b.is_defect);
      CHECK(b.fn.n_residuals() == 13);
    }
    if (b.term == "quat_norm") norm_rows += b.fn.n_residuals();
  }
  CHECK(defect_blocks == 10);
  CHECK(norm_rows == 11);
  CHECK(nlp.n_constraint_rows == 10 * 13 + 11);

  CHECK_THROWS_AS(tr::apply_multiple_shooting(prb, IntegratorKind::rk4),
                  tr::TranscriptionError);
}

TEST_CASE("defects vanish on trajectories the integrator generated") {
  std::mt19937 rng(314);
  for (auto kind : {IntegratorKind::euler, IntegratorKind::rk4,
                    IntegratorKind::leapfrog}) {
    const int nx = 4, nu = 2, N = 8;
    MatrixXd A(nx, nx);
    MatrixXd B(nx, nu);
    for (int i = 0; i < nx; ++i) {
      for (int j = 0; j < nx; ++j) A(i, j) = testutil::uniform(rng, -1.0, 1.0);
      for (int j = 0; j < nu; ++j) B(i, j) = testutil::uniform(rng, -1.0, 1.0);
    }
    auto dyn = ad::trace("lin", {nx, nu}, [&](const auto& in) {
      std::vector<Value> dx(nx, Value(0.0));
      for (int i = 0; i < nx; ++i) {
        for (int j = 0; j < nx; ++j) dx[i] = dx[i] + A(i, j) * in[0][j];
        for (int j = 0; j < nu; ++j) dx[i] = dx[i] + B(i, j) * in[1][j];
      }
      return dx;
    });

    auto prb = hz::create_problem(N);
    hz::create_variable(prb, "x", VariableKind::state, nx);
    hz::create_variable(prb, "u", VariableKind::input, nu);
    prb.velocity_offset = 2;
    hz::set_dynamics(prb, dyn, 0.1);
    tr::apply_multiple_shooting(prb, kind);
    auto nlp = hz::assemble_nlp(prb);

    VectorXd z = VectorXd::Zero(nlp.n_decision);
    VectorXd x(nx);
    for (int i = 0; i < nx; ++i) x[i] = testutil::uniform(rng, -1.0, 1.0);
    for (int k = 0; k < N; ++k) {
      VectorXd u(nu);
      for (int i = 0; i < nu; ++i) u[i] = testutil::uniform(rng, -1.0, 1.0);
      z.segment(nlp.offset("x", k), nx) = x;
      z.segment(nlp.offset("u", k), nu) = u;
      x = tr::integrate(dyn, x, u, 0.1, kind, prb.velocity_offset);
    }
    z.segment(nlp.offset("x", N), nx) = x;
    CHECK(nlp.eval_constraints(z).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("scalar defect values") {
  auto prb = hz::create_problem(10);
  hz::create_variable(prb, "x", VariableKind::state, 1);
  hz::create_variable(prb, "u", VariableKind::input, 1);
  hz::set_dynamics(prb, constant_rate_dynamics(), 0.1);
  tr::apply_multiple_shooting(prb, IntegratorKind::euler);
  auto nlp = hz::assemble_nlp(prb);

  VectorXd z = VectorXd::Zero(nlp.n_decision);
  for (int k = 0; k < 10; ++k) z[nlp.offset("u", k)] = 1.0;
  z[nlp.offset("x", 1)] = 0.1;
  VectorXd g = nlp.eval_constraints(z);
  CHECK(g[0] == doctest::Approx(0.0).epsilon(1e-15));

  z[nlp.offset("x", 1)] = 0.2;
  g = nlp.eval_constraints(z);
  CHECK(g[0] == doctest::Approx(0.1).epsilon(1e-13));
}

TEST_CASE("collocation accepts exact linear trajectories") {
  for (int d = 1; d <= 5; ++d) {
    const int N = 4, nx = 2;
    auto dyn = ad::trace("const_rate", {nx, 1}, [](const auto& in) {
      return std::vector<Value>{Value(2.0) + 0.0 * in[1][0], Value(-1.0)};
    });
    auto prb = hz::create_problem(N);
    hz::create_variable(prb, "x", VariableKind::state, nx);
    hz::create_variable(prb, "u", VariableKind::input, 1);
    hz::set_dynamics(prb, dyn, 0.3);
    tr::apply_collocation(prb, {d});
    auto nlp = hz::assemble_nlp(prb);

    CHECK(nlp.n_decision == (N + 1) * nx + N * 1 + N * d * nx);

    const Eigen::Vector2d c(2.0, -1.0);
    const Eigen::Vector2d x0(0.4, 1.1);
    const auto pts = tr::radau_points(d);
    VectorXd z = VectorXd::Zero(nlp.n_decision);
    for (int k = 0; k <= N; ++k)
      z.segment(nlp.offset("x", k), nx) = x0 + 0.3 * k * c;
    for (int k = 0; k < N; ++k)
      for (int j = 1; j <= d; ++j)
        z.segment(nlp.offset("dyn_c" + std::to_string(j), k), nx) =
            x0 + 0.3 * (k + pts[j - 1]) * c;
    CHECK(nlp.eval_constraints(z).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("collocation integrates a cubic exactly") {
  // State (y, t) with ydot = 3 t^2: the solution y = t^3 lies in the degree-3
  // collocation space, so the scheme reproduces it to roundoff. The stage and
  // endpoint unknowns are found with a plain Newton iteration on the
  // assembled equality system.
  auto dyn = ad::trace("cubic", {2, 1}, [](const auto& in) {
    return std::vector<Value>{3.0 * in[0][1] * in[0][1],
                              Value(1.0) + 0.0 * in[1][0]};
  });
  auto prb = hz::create_problem(1);
  hz::create_variable(prb, "x", VariableKind::state, 2);
  hz::create_variable(prb, "u", VariableKind::input, 1);
  hz::set_dynamics(prb, dyn, 1.0);
  tr::apply_collocation(prb, {3});
  auto nlp = hz::assemble_nlp(prb);

  // Unknowns: everything except the pinned x_0 (and the unused input).
  VectorXd z = nlp.guess;
  std::vector<int> free_cols;
  for (int j = 1; j <= 3; ++j)
    for (int i = 0; i < 2; ++i)
      free_cols.push_back(nlp.offset("dyn_c" + std::to_string(j), 0) + i);
  free_cols.push_back(nlp.offset("x", 1));
  free_cols.push_back(nlp.offset("x", 1) + 1);
  REQUIRE(nlp.n_constraint_rows == static_cast<int>(free_cols.size()));

  for (int it = 0; it < 20; ++it) {
    const VectorXd g = nlp.eval_constraints(z);
    if (g.cwiseAbs().maxCoeff() < 1e-14) break;
    const MatrixXd J = constraint_jacobian(nlp, z);
    MatrixXd Jf(nlp.n_constraint_rows, free_cols.size());
    for (std::size_t c = 0; c < free_cols.size(); ++c)
      Jf.col(c) = J.col(free_cols[c]);
    const VectorXd step = Jf.fullPivLu().solve(-g);
    for (std::size_t c = 0; c < free_cols.size(); ++c)
      z[free_cols[c]] += step[c];
  }
  CHECK(nlp.eval_constraints(z).cwiseAbs().maxCoeff() < 1e-13);
  CHECK(z[nlp.offset("x", 1)] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(z[nlp.offset("x", 1) + 1] == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(tr::apply_collocation(prb, {3}), tr::TranscriptionError);
  auto prb2 = hz::create_problem(1);
  hz::create_variable(prb2, "x", VariableKind::state, 2);
  hz::create_variable(prb2, "u", VariableKind::input, 1);
  hz::set_dynamics(prb2, dyn, 1.0);
  CHECK_THROWS_AS(tr::apply_collocation(prb2, {6}), tr::TranscriptionError);
}
