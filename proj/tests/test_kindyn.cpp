#include "skyline/kindyn.hpp"

#include <cmath>

#include <Eigen/Dense>

#include "doctest.h"
#include "skyline/autodiff.hpp"
#include "skyline/urdf.hpp"
#include "testutil.hpp"

namespace kd = skyline::kindyn;
namespace ad = skyline::ad;
namespace urdf = skyline::urdf;
namespace km = skyline::km;

using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::Vector4d;
using Eigen::VectorXd;

namespace {

std::string asset(const std::string& name) {
  return std::string(SKYLINE_ASSET_DIR) + "/" + name;
}

urdf::KinematicModel pendulum() {
  return urdf::parse_urdf_file(asset("pendulum.urdf"));
}

urdf::KinematicModel double_pendulum() {
  return urdf::parse_urdf_file(asset("double_pendulum.urdf"));
}

urdf::KinematicModel quad_floating() {
  return urdf::attach_floating_base(urdf::parse_urdf_file(asset("quad.urdf")));
}

// Independent closed-form inverse dynamics for the bundled double pendulum
// (two unit point masses on unit links, angles from the downward vertical,
// elbow relative), derived from the Lagrangian:
//   KE = qd1^2 + (qd1+qd2)^2/2 + qd1 (qd1+qd2) cos q2
//   U  = -2 g cos q1 - g cos(q1+q2)
Eigen::Vector2d lagrangian_tau(const Eigen::Vector2d& q, const Eigen::Vector2d& qd,
                               const Eigen::Vector2d& qdd) {
  const double g = 9.81;
  const double c2 = std::cos(q[1]), s2 = std::sin(q[1]);
  const double s1 = std::sin(q[0]), s12 = std::sin(q[0] + q[1]);
  Eigen::Vector2d tau;
  tau[0] = (3.0 + 2.0 * c2) * qdd[0] + (1.0 + c2) * qdd[1] -
           s2 * (2.0 * qd[0] * qd[1] + qd[1] * qd[1]) + 2.0 * g * s1 + g * s12;
  tau[1] = (1.0 + c2) * qdd[0] + qdd[1] + s2 * qd[0] * qd[0] + g * s12;
  return tau;
}

double dp_energy(const urdf::KinematicModel& m, const Eigen::Vector2d& q,
                 const Eigen::Vector2d& qd) {
  const double g = 9.81;
  const MatrixXd M = kd::mass_matrix(m, q);
  const double ke = 0.5 * qd.dot(M * qd);
  const double u = -2.0 * g * std::cos(q[0]) - g * std::cos(q[0] + q[1]);
  return ke + u;
}

VectorXd random_quad_q(std::mt19937& rng) {
  VectorXd q(19);
  for (int i = 0; i < 3; ++i) q[i] = testutil::uniform(rng, -1.0, 1.0);
  Vector4d rho;
  for (int i = 0; i < 4; ++i) rho[i] = testutil::uniform(rng, -1.0, 1.0);
  q.segment<4>(3) = rho / rho.norm();
  for (int i = 7; i < 19; ++i) q[i] = testutil::uniform(rng, -0.8, 0.8);
  return q;
}

}  // namespace

TEST_CASE("forward kinematics closed forms") {
  auto m = pendulum();
  VectorXd q(1);
  q << 0.0;
  auto tip = kd::forward_kinematics(m, q, "tip");
  CHECK(tip.position.isApprox(Vector3d(0, 0, -1), 1e-14));

  q << M_PI / 2;
  tip = kd::forward_kinematics(m, q, "tip");
  CHECK((tip.position - Vector3d(-1, 0, 0)).norm() < 1e-14);

  // Rotation stays orthonormal with positive determinant.
  std::mt19937 rng(11);
  for (int i = 0; i < 10; ++i) {
    q << testutil::uniform(rng, -3.0, 3.0);
    const auto pose = kd::forward_kinematics(m, q, "tip");
    CHECK((pose.rotation.transpose() * pose.rotation - Eigen::Matrix3d::Identity())
              .cwiseAbs()
              .maxCoeff() < 1e-10);
    CHECK(pose.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-10));
  }

  auto body = urdf::attach_floating_base(
      urdf::parse_urdf(R"(<robot name="b"><link name="body"/></robot>)"));
  VectorXd qb(7);
  qb << 1, 2, 3, 0, 0, 0, 1;
  CHECK(kd::forward_kinematics(body, qb, "body").position == Vector3d(1, 2, 3));

  CHECK_THROWS_AS(kd::forward_kinematics(m, q, "nope"), kd::KindynError);
  qb << 1, 2, 3, 0, 0, 0, 1.1;
  CHECK_THROWS_AS(kd::forward_kinematics(body, qb, "body"), kd::KindynError);
}

TEST_CASE("frame velocity closed forms") {
  auto m = pendulum();
  VectorXd q(1), nu(1);
  q << 0.0;
  nu << 0.0;
  auto v = kd::frame_velocity(m, q, nu, "tip");
  CHECK(v.linear.norm() == 0.0);
  CHECK(v.angular.norm() == 0.0);

  nu << 1.0;
  v = kd::frame_velocity(m, q, nu, "tip");
  // Oracle: tip velocity is omega x r computed independently.
  const Vector3d omega(0, 1, 0);
  const Vector3d r(0, 0, -1);
  const Vector3d expect = omega.cross(r);
  CHECK((v.linear - expect).norm() < 1e-14);
  CHECK((v.angular - omega).norm() < 1e-14);

  auto body = urdf::attach_floating_base(
      urdf::parse_urdf(R"(<robot name="b"><link name="body"/></robot>)"));
  VectorXd qb = urdf::neutral_configuration(body);
  VectorXd nub = VectorXd::Zero(6);
  nub[0] = 1.0;
  auto vb = kd::frame_velocity(body, qb, nub, "body");
  CHECK(vb.linear == Vector3d(1, 0, 0));
  CHECK(vb.angular.norm() == 0.0);
}

TEST_CASE("frame velocity equals jacobian times nu") {
  auto m = quad_floating();
  std::mt19937 rng(2026);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const VectorXd q = random_quad_q(rng);
    VectorXd nu(18);
    for (int i = 0; i < 18; ++i) nu[i] = testutil::uniform(rng, -1.0, 1.0);
    for (const char* frame : {"lf_foot", "rh_foot", "base", "rf_shank"}) {
      const auto v = kd::frame_velocity(m, q, nu, frame);
      const MatrixXd J = kd::frame_jacobian(m, q, frame);
      Eigen::Matrix<double, 6, 1> expect = J * nu;
      worst = std::max(worst, (expect.head<3>() - v.linear).cwiseAbs().maxCoeff());
      worst = std::max(worst, (expect.tail<3>() - v.angular).cwiseAbs().maxCoeff());
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("frame jacobian structure") {
  auto m = pendulum();
  VectorXd q(1);
  q << 0.7;
  const MatrixXd J = kd::frame_jacobian(m, q, "tip");
  REQUIRE(J.rows() == 6);
  REQUIRE(J.cols() == 1);
  // Linear rows against central differences of FK.
  const double h = 1e-7;
  VectorXd qp = q, qm = q;
  qp[0] += h;
  qm[0] -= h;
  const Vector3d fd = (kd::forward_kinematics(m, qp, "tip").position -
                       kd::forward_kinematics(m, qm, "tip").position) /
                      (2 * h);
  CHECK((J.block<3, 1>(0, 0) - fd).norm() < 1e-8);

  auto quad = quad_floating();
  const VectorXd q0 = urdf::neutral_configuration(quad);
  const MatrixXd Jb = kd::frame_jacobian(quad, q0, "base");
  CHECK(Jb.block<3, 3>(3, 3).isIdentity(1e-14));
  CHECK(Jb.block<3, 3>(0, 0).isIdentity(1e-14));

  // Joints off the root-to-frame path contribute zero columns.
  const MatrixXd Jf = kd::frame_jacobian(quad, q0, "lf_foot");
  const auto& joints = quad.joints;
  const int rf_knee = quad.joint_index("rf_knee");
  REQUIRE(rf_knee >= 0);
  CHECK(Jf.col(quad.v_offset(joints[rf_knee])).norm() == 0.0);
  const int lf_knee = quad.joint_index("lf_knee");
  CHECK(Jf.col(quad.v_offset(joints[lf_knee])).norm() > 0.1);
}

TEST_CASE("inverse dynamics closed forms") {
  auto m = pendulum();
  VectorXd q(1), z(1);
  q << M_PI / 2;
  z << 0.0;
  const VectorXd tau = kd::inverse_dynamics(m, q, z, z);
  REQUIRE(tau.size() == 1);
  CHECK(tau[0] == doctest::Approx(9.81).epsilon(1e-12));

  // Free-floating body in zero gravity at rest needs no wrench.
  auto body = urdf::attach_floating_base(urdf::parse_urdf(R"(<robot name="b">
    <link name="body">
      <inertial><mass value="3"/>
        <inertia ixx="0.1" iyy="0.2" izz="0.25" ixy="0" ixz="0" iyz="0"/>
      </inertial>
    </link>
  </robot>)"));
  body.gravity.setZero();
  const VectorXd q7 = urdf::neutral_configuration(body);
  const VectorXd z6 = VectorXd::Zero(6);
  CHECK(kd::inverse_dynamics(body, q7, z6, z6).norm() == 0.0);
}

TEST_CASE("double pendulum matches the lagrangian oracle") {
  auto m = double_pendulum();
  std::mt19937 rng(314159);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Vector2d q, qd, qdd;
    for (int i = 0; i < 2; ++i) {
      q[i] = testutil::uniform(rng, -3.0, 3.0);
      qd[i] = testutil::uniform(rng, -2.0, 2.0);
      qdd[i] = testutil::uniform(rng, -2.0, 2.0);
    }
    const VectorXd tau = kd::inverse_dynamics(m, q, qd, qdd);
    const Eigen::Vector2d want = lagrangian_tau(q, qd, qdd);
    worst = std::max(worst, (tau - want).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("inverse dynamics is linear in acceleration and contact force") {
  auto m = quad_floating();
  std::mt19937 rng(55);
  const VectorXd q = random_quad_q(rng);
  VectorXd nu(18);
  for (int i = 0; i < 18; ++i) nu[i] = testutil::uniform(rng, -1.0, 1.0);
  VectorXd a1(18), a2(18);
  for (int i = 0; i < 18; ++i) {
    a1[i] = testutil::uniform(rng, -2.0, 2.0);
    a2[i] = testutil::uniform(rng, -2.0, 2.0);
  }
  const VectorXd z = VectorXd::Zero(18);
  const VectorXd t0 = kd::inverse_dynamics(m, q, nu, z);
  const VectorXd t1 = kd::inverse_dynamics(m, q, nu, a1);
  const VectorXd t2 = kd::inverse_dynamics(m, q, nu, a2);
  const VectorXd t12 = kd::inverse_dynamics(m, q, nu, a1 + 0.5 * a2);
  CHECK((t12 - (t1 + 0.5 * t2 - 0.5 * t0)).cwiseAbs().maxCoeff() < 1e-10);

  kd::ContactForceSet f1, f2, f12;
  const Vector3d fa(10, -4, 30), fb(-3, 8, 12);
  f1.forces = {{"lf_foot", fa}};
  f2.forces = {{"lf_foot", fb}};
  f12.forces = {{"lf_foot", fa + 2.0 * fb}};
  const VectorXd g0 = kd::inverse_dynamics(m, q, nu, a1);
  const VectorXd g1 = kd::inverse_dynamics(m, q, nu, a1, f1);
  const VectorXd g2 = kd::inverse_dynamics(m, q, nu, a1, f2);
  const VectorXd g12 = kd::inverse_dynamics(m, q, nu, a1, f12);
  CHECK((g12 - (g1 + 2.0 * g2 - 2.0 * g0)).cwiseAbs().maxCoeff() < 1e-10);

  // Contact force transmission equals the Jacobian-transpose map.
  const MatrixXd J = kd::frame_jacobian(m, q, "lf_foot");
  const VectorXd expect = g0 - J.topRows<3>().transpose() * fa;
  CHECK((g1 - expect).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("mass matrix properties") {
  auto m = pendulum();
  std::mt19937 rng(8);
  for (int i = 0; i < 5; ++i) {
    VectorXd q(1);
    q << testutil::uniform(rng, -3.0, 3.0);
    const MatrixXd M = kd::mass_matrix(m, q);
    CHECK(M(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  }

  auto quad = quad_floating();
  for (int trial = 0; trial < 5; ++trial) {
    const VectorXd q = random_quad_q(rng);
    const MatrixXd M = kd::mass_matrix(quad, q);
    CHECK((M - M.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(M);
    CHECK(es.eigenvalues().minCoeff() > 0.0);

    // Unit-acceleration RNEA columns in zero gravity reproduce CRBA.
    auto zg = quad;
    zg.gravity.setZero();
    const VectorXd z = VectorXd::Zero(18);
    MatrixXd Mrnea(18, 18);
    for (int k = 0; k < 18; ++k) {
      VectorXd ek = VectorXd::Zero(18);
      ek[k] = 1.0;
      Mrnea.col(k) = kd::inverse_dynamics(zg, q, z, ek);
    }
    CHECK((M - Mrnea).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("quaternion rate") {
  const Vector4d ident(0, 0, 0, 1);
  CHECK(kd::quaternion_rate(ident, Vector3d::Zero()).norm() == 0.0);
  const Vector4d r = kd::quaternion_rate(ident, Vector3d(0, 0, 1));
  CHECK(r == Vector4d(0, 0, 0.5, 0));

  std::mt19937 rng(99);
  for (int i = 0; i < 20; ++i) {
    Vector4d rho;
    for (int k = 0; k < 4; ++k) rho[k] = testutil::uniform(rng, -1.0, 1.0);
    rho.normalize();
    Vector3d w;
    for (int k = 0; k < 3; ++k) w[k] = testutil::uniform(rng, -3.0, 3.0);
    CHECK(std::abs(rho.dot(kd::quaternion_rate(rho, w))) < 1e-15);
  }
}

TEST_CASE("spatial inertia composition") {
  urdf::LinkSpec a;
  a.name = "a";
  a.mass = 2.0;
  a.com = Vector3d(0.1, 0, 0.3);
  a.inertia = Vector3d(0.02, 0.03, 0.04).asDiagonal();
  const auto sa = kd::SpatialInertia::from_link(a);
  CHECK(sa.first_moment.isApprox(Vector3d(0.2, 0, 0.6)));
  // Parallel-axis: moment about origin for the x axis picks up m*(y^2+z^2).
  CHECK(sa.rotational_inertia(0, 0) == doctest::Approx(0.02 + 2.0 * 0.09));
  CHECK(sa.rotational_inertia(1, 1) ==
        doctest::Approx(0.03 + 2.0 * (0.01 + 0.09)));

  // Two point masses on the z axis: union inertia about origin is m1 z1^2 +
  // m2 z2^2 for the x and y axes.
  urdf::LinkSpec p1, p2;
  p1.mass = 1.0;
  p1.com = Vector3d(0, 0, -1);
  p2.mass = 3.0;
  p2.com = Vector3d(0, 0, 2);
  const auto u = kd::SpatialInertia::from_link(p1) + kd::SpatialInertia::from_link(p2);
  CHECK(u.mass == 4.0);
  CHECK(u.first_moment.isApprox(Vector3d(0, 0, 5)));
  CHECK(u.rotational_inertia(0, 0) == doctest::Approx(1.0 + 12.0));
  CHECK(u.rotational_inertia(2, 2) == doctest::Approx(0.0));
}

TEST_CASE("energy is conserved by rk4 on the unactuated double pendulum") {
  auto m = double_pendulum();
  Eigen::Vector2d q(0.3, -0.2), qd(0.0, 0.0);
  const double e0 = dp_energy(m, q, qd);
  const double dt = 1e-3;

  auto fdyn = [&](const Eigen::Vector4d& x) {
    const Eigen::Vector2d qq = x.head<2>(), vv = x.tail<2>();
    const MatrixXd M = kd::mass_matrix(m, qq);
    const VectorXd bias = kd::inverse_dynamics(m, qq, vv, Eigen::Vector2d::Zero());
    Eigen::Vector4d dx;
    dx.head<2>() = vv;
    dx.tail<2>() = M.ldlt().solve(-bias);
    return dx;
  };

  Eigen::Vector4d x;
  x << q, qd;
  for (int step = 0; step < 1000; ++step) {
    const Eigen::Vector4d k1 = fdyn(x);
    const Eigen::Vector4d k2 = fdyn(x + 0.5 * dt * k1);
    const Eigen::Vector4d k3 = fdyn(x + 0.5 * dt * k2);
    const Eigen::Vector4d k4 = fdyn(x + dt * k3);
    x += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  const double e1 = dp_energy(m, x.head<2>(), x.tail<2>());
  CHECK(std::abs(e1 - e0) < 1e-5);
}

TEST_CASE("traced algorithms are bitwise identical to the double path") {
  auto quad = quad_floating();
  const std::vector<std::pair<std::string, int>> contacts = {
      {"lf_foot", quad.frame_index("lf_foot")},
      {"rh_foot", quad.frame_index("rh_foot")}};

  auto traced = ad::trace("quad_id", {19, 18, 18, 6}, [&](const auto& in) {
    std::vector<std::pair<int, km::Vec3<ad::Value>>> fc;
    for (std::size_t c = 0; c < contacts.size(); ++c)
      fc.emplace_back(contacts[c].second,
                      km::Vec3<ad::Value>{in[3][3 * c], in[3][3 * c + 1],
                                          in[3][3 * c + 2]});
    return kd::rnea(quad, in[0].data(), in[1].data(), in[2].data(), fc,
                    quad.gravity);
  });

  std::mt19937 rng(606);
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd q = random_quad_q(rng);
    VectorXd nu(18), a(18), f(6);
    for (int i = 0; i < 18; ++i) {
      nu[i] = testutil::uniform(rng, -1.0, 1.0);
      a[i] = testutil::uniform(rng, -2.0, 2.0);
    }
    for (int i = 0; i < 6; ++i) f[i] = testutil::uniform(rng, -20.0, 20.0);

    std::vector<std::pair<int, km::Vec3<double>>> fc;
    for (std::size_t c = 0; c < contacts.size(); ++c)
      fc.emplace_back(contacts[c].second,
                      km::Vec3<double>{f[3 * c], f[3 * c + 1], f[3 * c + 2]});
    const std::vector<double> want =
        kd::rnea(quad, q.data(), nu.data(), a.data(), fc, quad.gravity);
    const VectorXd got = traced({q, nu, a, f});
    REQUIRE(got.size() == 18);
    for (int i = 0; i < 18; ++i) CHECK(got[i] == want[i]);
  }
}

TEST_CASE("traced jacobians match finite differences") {
  auto m = double_pendulum();
  auto traced = ad::trace("dp_id", {2, 2, 2}, [&](const auto& in) {
    return kd::rnea(m, in[0].data(), in[1].data(), in[2].data(), {}, m.gravity);
  });
  auto J = ad::jacobian(traced);
  std::mt19937 rng(13);
  const double h = 1e-6;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<VectorXd> in(3, VectorXd(2));
    for (auto& blk : in)
      for (int i = 0; i < 2; ++i) blk[i] = testutil::uniform(rng, -1.0, 1.0);
    const VectorXd Jv = J(in);
    for (int b = 0; b < 3; ++b)
      for (int j = 0; j < 2; ++j) {
        auto ip = in, im = in;
        ip[b][j] += h;
        im[b][j] -= h;
        const VectorXd fd = (traced(ip) - traced(im)) / (2 * h);
        for (int i = 0; i < 2; ++i) {
          const double got = Jv[i * 6 + 2 * b + j];
          CHECK(std::abs(got - fd[i]) <= 1e-6 * std::max(1.0, std::abs(fd[i])));
        }
      }
  }
}

TEST_CASE("dimension mismatches are rejected") {
  auto m = pendulum();
  VectorXd q(2), z(1);
  q << 0, 0;
  z << 0;
  CHECK_THROWS_AS(kd::forward_kinematics(m, q, "tip"), kd::KindynError);
  CHECK_THROWS_AS(kd::inverse_dynamics(m, z, q, z), kd::KindynError);
  kd::ContactForceSet fs;
  fs.forces = {{"ghost", Vector3d::Zero()}};
  CHECK_THROWS_AS(kd::inverse_dynamics(m, z, z, z, fs), kd::KindynError);
}
