#include "skyline/kindyn.hpp"

#include <cmath>

#include <Eigen/Geometry>

namespace skyline::kindyn {

namespace {

void check_q(const KinematicModel& m, const Eigen::VectorXd& q) {
  if (q.size() != m.nq())
    throw KindynError("configuration vector has size " + std::to_string(q.size()) +
                      ", expected " + std::to_string(m.nq()));
  if (m.floating_base) {
    const double n = q.segment<4>(3).norm();
    if (std::abs(n - 1.0) > 1e-6)
      throw KindynError("base quaternion norm " + std::to_string(n) +
                        " is not within 1e-6 of 1");
  }
}

void check_v(const KinematicModel& m, const Eigen::VectorXd& v,
             const char* what) {
  if (v.size() != m.nv())
    throw KindynError(std::string(what) + " has size " + std::to_string(v.size()) +
                      ", expected " + std::to_string(m.nv()));
}

int resolve_frame(const KinematicModel& m, const std::string& name) {
  const int fi = m.frame_index(name);
  if (fi < 0) throw KindynError("unknown frame \"" + name + "\"");
  return fi;
}

Eigen::Vector3d to_eigen(const km::Vec3<double>& v) {
  return Eigen::Vector3d(v.x, v.y, v.z);
}

Eigen::Matrix3d to_eigen(const km::Mat3<double>& m) {
  Eigen::Matrix3d r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = m(i, j);
  return r;
}

}  // namespace

SpatialInertia SpatialInertia::from_link(const urdf::LinkSpec& link) {
  SpatialInertia s;
  s.mass = link.mass;
  s.first_moment = link.mass * link.com;
  s.rotational_inertia =
      link.inertia + link.mass * (link.com.squaredNorm() * Eigen::Matrix3d::Identity() -
                                  link.com * link.com.transpose());
  return s;
}

SpatialInertia SpatialInertia::operator+(const SpatialInertia& o) const {
  SpatialInertia s;
  s.mass = mass + o.mass;
  s.first_moment = first_moment + o.first_moment;
  s.rotational_inertia = rotational_inertia + o.rotational_inertia;
  return s;
}

FramePose forward_kinematics(const KinematicModel& m, const Eigen::VectorXd& q,
                             const std::string& frame) {
  check_q(m, q);
  const int fi = resolve_frame(m, frame);
  const auto X = link_poses(m, q.data());
  const auto P = frame_pose(m, X, fi);
  return FramePose{to_eigen(P.p), to_eigen(P.R)};
}

FrameVelocity frame_velocity(const KinematicModel& m, const Eigen::VectorXd& q,
                             const Eigen::VectorXd& nu, const std::string& frame) {
  check_q(m, q);
  check_v(m, nu, "velocity vector");
  const int fi = resolve_frame(m, frame);
  const auto X = link_poses(m, q.data());
  const auto K =
      link_motions(m, X, nu.data(), static_cast<const double*>(nullptr));
  const urdf::Frame& fr = m.frames[fi];
  const auto& L = X[fr.link_index];
  const auto& M = K[fr.link_index];
  const km::Vec3<double> rf = L.R * kindyn::detail::lift<double>(fr.local.p);
  return FrameVelocity{to_eigen(M.v + km::cross(M.w, rf)), to_eigen(M.w)};
}

Eigen::MatrixXd frame_jacobian(const KinematicModel& m, const Eigen::VectorXd& q,
                               const std::string& frame) {
  check_q(m, q);
  const int fi = resolve_frame(m, frame);
  const auto X = link_poses(m, q.data());
  const auto P = frame_pose(m, X, fi);
  const Eigen::Vector3d xf = to_eigen(P.p);

  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(6, m.nv());
  if (m.floating_base) {
    const Eigen::Matrix3d Rb = to_eigen(X[m.root_link].R);
    const Eigen::Vector3d pb = to_eigen(X[m.root_link].p);
    J.block<3, 3>(0, 0) = Eigen::Matrix3d::Identity();
    for (int i = 0; i < 3; ++i) {
      const Eigen::Vector3d w = Rb.col(i);
      J.block<3, 1>(0, 3 + i) = w.cross(xf - pb);
      J.block<3, 1>(3, 3 + i) = w;
    }
  }
  // Walk from the frame's link to the root; only joints on that path
  // contribute columns.
  int li = m.frames[fi].link_index;
  while (li >= 0) {
    const int ji = m.link_parent_joint[li];
    if (ji < 0) break;
    const urdf::JointSpec& j = m.joints[ji];
    if (j.movable()) {
      const Eigen::Vector3d s =
          to_eigen(X[j.child_link_index].R * kindyn::detail::lift<double>(j.axis));
      const int col = m.v_offset(j);
      if (j.kind == urdf::JointKind::prismatic) {
        J.block<3, 1>(0, col) = s;
      } else {
        const Eigen::Vector3d o = to_eigen(X[j.child_link_index].p);
        J.block<3, 1>(0, col) = s.cross(xf - o);
        J.block<3, 1>(3, col) = s;
      }
    }
    li = j.parent_link_index;
  }
  return J;
}

Eigen::VectorXd inverse_dynamics(const KinematicModel& m, const Eigen::VectorXd& q,
                                 const Eigen::VectorXd& nu,
                                 const Eigen::VectorXd& nudot,
                                 const ContactForceSet& forces) {
  check_q(m, q);
  check_v(m, nu, "velocity vector");
  check_v(m, nudot, "acceleration vector");
  std::vector<std::pair<int, km::Vec3<double>>> fc;
  fc.reserve(forces.forces.size());
  for (const auto& [name, f] : forces.forces)
    fc.emplace_back(resolve_frame(m, name), km::Vec3<double>{f[0], f[1], f[2]});
  const std::vector<double> tau =
      rnea(m, q.data(), nu.data(), nudot.data(), fc, m.gravity);
  return Eigen::Map<const Eigen::VectorXd>(tau.data(), tau.size());
}

Eigen::MatrixXd mass_matrix(const KinematicModel& m, const Eigen::VectorXd& q) {
  check_q(m, q);
  const std::vector<double> M = crba(m, q.data());
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>(M.data(), m.nv(), m.nv());
}

Eigen::Vector4d quaternion_rate(const Eigen::Vector4d& rho,
                                const Eigen::Vector3d& omega) {
  const std::array<double, 4> r{rho[0], rho[1], rho[2], rho[3]};
  const km::Vec3<double> w{omega[0], omega[1], omega[2]};
  const std::array<double, 4> out = quaternion_rate(r, w);
  return Eigen::Vector4d(out[0], out[1], out[2], out[3]);
}

}  // namespace skyline::kindyn
