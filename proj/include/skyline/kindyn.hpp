#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "skyline/smallmath.hpp"
#include "skyline/urdf.hpp"

namespace skyline::kindyn {

class KindynError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using urdf::KinematicModel;

struct FramePose {
  Eigen::Vector3d position;
  Eigen::Matrix3d rotation;
};

struct FrameVelocity {
  Eigen::Vector3d linear;   // world frame
  Eigen::Vector3d angular;  // world frame
};

// World-frame point forces applied at named frames.
struct ContactForceSet {
  std::vector<std::pair<std::string, Eigen::Vector3d>> forces;
};

// Mass, first moment and rotational inertia about the link frame origin.
// Adding two inertias expressed about the same origin gives the inertia of
// the union.
struct SpatialInertia {
  double mass = 0.0;
  Eigen::Vector3d first_moment = Eigen::Vector3d::Zero();
  Eigen::Matrix3d rotational_inertia = Eigen::Matrix3d::Zero();

  static SpatialInertia from_link(const urdf::LinkSpec& link);
  SpatialInertia operator+(const SpatialInertia& o) const;
};

// ---------------------------------------------------------------------------
// Scalar-generic core. All algorithms are templated on the scalar so the
// exact same operation sequence runs on doubles and on trace nodes. Vectors
// q, nu, nudot use the model layout (quaternion base pose first when
// floating); matrices come back flattened row-major.

template <typename T>
struct LinkPose {
  km::Mat3<T> R;
  km::Vec3<T> p;
};

template <typename T>
struct LinkMotion {
  km::Vec3<T> w;   // world angular velocity
  km::Vec3<T> v;   // world linear velocity of the link origin
  km::Vec3<T> dw;  // world angular acceleration
  km::Vec3<T> a;   // world linear acceleration of the link origin
};

namespace detail {

template <typename T>
km::Vec3<T> lift(const Eigen::Vector3d& v) {
  return {T(v[0]), T(v[1]), T(v[2])};
}

template <typename T>
km::Mat3<T> lift(const Eigen::Matrix3d& m) {
  km::Mat3<T> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = T(m(i, j));
  return r;
}

}  // namespace detail

// Pose of every link, parents before children. For a floating base the
// quaternion is normalized before use.
template <typename T>
std::vector<LinkPose<T>> link_poses(const KinematicModel& m, const T* q) {
  using std::sqrt;
  std::vector<LinkPose<T>> X(m.links.size());
  LinkPose<T>& root = X[m.root_link];
  if (m.floating_base) {
    root.p = {q[0], q[1], q[2]};
    const T n2 = q[3] * q[3] + q[4] * q[4] + q[5] * q[5] + q[6] * q[6];
    const T inv = T(1) / sqrt(n2);
    const std::array<T, 4> rho{q[3] * inv, q[4] * inv, q[5] * inv, q[6] * inv};
    root.R = km::quat_to_mat(rho);
  } else {
    root.R = km::Mat3<T>::identity();
    root.p = km::Vec3<T>{T(0), T(0), T(0)};
  }
  for (const urdf::JointSpec& j : m.joints) {
    const LinkPose<T>& P = X[j.parent_link_index];
    LinkPose<T>& C = X[j.child_link_index];
    // Branches below depend only on model constants, never on scalar values,
    // so the double and traced paths stay in lockstep.
    const bool rot0 = !j.origin.R.isIdentity(0.0);
    const bool off0 = !j.origin.p.isZero(0.0);
    const km::Mat3<T> Rp0 = rot0 ? P.R * detail::lift<T>(j.origin.R) : P.R;
    const km::Vec3<T> pc = off0 ? P.p + P.R * detail::lift<T>(j.origin.p) : P.p;
    switch (j.kind) {
      case urdf::JointKind::revolute:
      case urdf::JointKind::continuous: {
        const T qj = q[m.q_offset(j)];
        C.R = Rp0 * km::axis_angle(detail::lift<T>(j.axis), qj);
        C.p = pc;
        break;
      }
      case urdf::JointKind::prismatic: {
        const T qj = q[m.q_offset(j)];
        C.R = Rp0;
        C.p = pc + Rp0 * (detail::lift<T>(j.axis) * qj);
        break;
      }
      case urdf::JointKind::fixed: {
        C.R = Rp0;
        C.p = pc;
        break;
      }
    }
  }
  return X;
}

// World-frame velocity (and, when nudot != nullptr, acceleration) of every
// link. nu = [pdot(world), omega(base-local), thetadot] when floating.
template <typename T>
std::vector<LinkMotion<T>> link_motions(const KinematicModel& m,
                                        const std::vector<LinkPose<T>>& X,
                                        const T* nu, const T* nudot) {
  std::vector<LinkMotion<T>> K(m.links.size());
  const km::Vec3<T> zero{T(0), T(0), T(0)};
  LinkMotion<T>& root = K[m.root_link];
  if (m.floating_base) {
    const km::Mat3<T>& Rb = X[m.root_link].R;
    root.v = {nu[0], nu[1], nu[2]};
    root.w = Rb * km::Vec3<T>{nu[3], nu[4], nu[5]};
    if (nudot) {
      root.a = {nudot[0], nudot[1], nudot[2]};
      // d/dt (Rb * omega_local) = w x (Rb*omega_local) + Rb*domega_local,
      // and the first term vanishes because w x w = 0.
      root.dw = Rb * km::Vec3<T>{nudot[3], nudot[4], nudot[5]};
    } else {
      root.a = zero;
      root.dw = zero;
    }
  } else {
    root.w = root.v = root.a = root.dw = zero;
  }
  for (const urdf::JointSpec& j : m.joints) {
    const LinkPose<T>& Pp = X[j.parent_link_index];
    const LinkPose<T>& Pc = X[j.child_link_index];
    const LinkMotion<T>& par = K[j.parent_link_index];
    LinkMotion<T>& ch = K[j.child_link_index];
    const km::Vec3<T> r = Pc.p - Pp.p;
    switch (j.kind) {
      case urdf::JointKind::revolute:
      case urdf::JointKind::continuous: {
        const T qd = nu[m.v_offset(j)];
        const km::Vec3<T> s = Pc.R * detail::lift<T>(j.axis);
        ch.w = par.w + s * qd;
        ch.v = par.v + km::cross(par.w, r);
        if (nudot) {
          const T qdd = nudot[m.v_offset(j)];
          ch.dw = par.dw + s * qdd + km::cross(par.w, s) * qd;
          ch.a = par.a + km::cross(par.dw, r) + km::cross(par.w, km::cross(par.w, r));
        }
        break;
      }
      case urdf::JointKind::prismatic: {
        const T qd = nu[m.v_offset(j)];
        const km::Vec3<T> s = Pc.R * detail::lift<T>(j.axis);
        ch.w = par.w;
        ch.v = par.v + km::cross(par.w, r) + s * qd;
        if (nudot) {
          const T qdd = nudot[m.v_offset(j)];
          ch.dw = par.dw;
          ch.a = par.a + km::cross(par.dw, r) + km::cross(par.w, ch.v - par.v) +
                 km::cross(par.w, s) * qd + s * qdd;
        }
        break;
      }
      case urdf::JointKind::fixed: {
        ch.w = par.w;
        ch.v = par.v + km::cross(par.w, r);
        if (nudot) {
          ch.dw = par.dw;
          ch.a = par.a + km::cross(par.dw, r) + km::cross(par.w, km::cross(par.w, r));
        }
        break;
      }
    }
  }
  return K;
}

// Recursive Newton-Euler in world coordinates:
//   tau_full = M(q) nudot + h(q, nu) - sum_c Jc^T f_c
// Contact forces are (frame index, world force) pairs; gravity acts on every
// body as an external force. The first six rows are the floating-base
// residual (world force, then base-frame moment) when the base floats.
template <typename T>
std::vector<T> rnea(const KinematicModel& m, const T* q, const T* nu,
                    const T* nudot,
                    const std::vector<std::pair<int, km::Vec3<T>>>& contact_forces,
                    const Eigen::Vector3d& gravity) {
  const std::vector<LinkPose<T>> X = link_poses(m, q);
  const std::vector<LinkMotion<T>> K = link_motions(m, X, nu, nudot);
  const km::Vec3<T> g = detail::lift<T>(gravity);

  const int n_links = static_cast<int>(m.links.size());
  std::vector<km::Vec3<T>> f(n_links, km::Vec3<T>{T(0), T(0), T(0)});
  std::vector<km::Vec3<T>> n(n_links, km::Vec3<T>{T(0), T(0), T(0)});

  // Per-body net wrench about the link origin.
  for (int li = 0; li < n_links; ++li) {
    const urdf::LinkSpec& link = m.links[li];
    if (link.mass == 0.0 && link.inertia.isZero(0.0)) continue;
    const km::Vec3<T> c = X[li].R * detail::lift<T>(link.com);
    const km::Vec3<T> acom =
        K[li].a + km::cross(K[li].dw, c) + km::cross(K[li].w, km::cross(K[li].w, c));
    const km::Mat3<T> Iw =
        X[li].R * detail::lift<T>(link.inertia) * X[li].R.transposed();
    const km::Vec3<T> F = acom * T(link.mass) - g * T(link.mass);
    const km::Vec3<T> N = Iw * K[li].dw + km::cross(K[li].w, Iw * K[li].w);
    f[li] += F;
    n[li] += N + km::cross(c, F);
  }

  // External contact forces pull wrench off the body carrying the frame.
  for (const auto& [fi, fc] : contact_forces) {
    const urdf::Frame& fr = m.frames[fi];
    const int li = fr.link_index;
    const km::Vec3<T> rf = X[li].R * detail::lift<T>(fr.local.p);
    f[li] -= fc;
    n[li] -= km::cross(rf, fc);
  }

  std::vector<T> tau(m.nv(), T(0));

  // Backward pass: joint torque, then fold the wrench into the parent.
  for (int ji = static_cast<int>(m.joints.size()) - 1; ji >= 0; --ji) {
    const urdf::JointSpec& j = m.joints[ji];
    const int c = j.child_link_index;
    const int p = j.parent_link_index;
    if (j.movable()) {
      const km::Vec3<T> s = X[c].R * detail::lift<T>(j.axis);
      tau[m.v_offset(j)] =
          j.kind == urdf::JointKind::prismatic ? km::dot(s, f[c]) : km::dot(s, n[c]);
    }
    f[p] += f[c];
    n[p] += n[c] + km::cross(X[c].p - X[p].p, f[c]);
  }

  if (m.floating_base) {
    const km::Vec3<T>& fb = f[m.root_link];
    const km::Vec3<T> nb = X[m.root_link].R.tmul(n[m.root_link]);
    tau[0] = fb.x;
    tau[1] = fb.y;
    tau[2] = fb.z;
    tau[3] = nb.x;
    tau[4] = nb.y;
    tau[5] = nb.z;
  }
  return tau;
}

// Composite-rigid-body mass matrix, flattened row-major nv x nv. Composites
// are carried as (mass, first moment, inertia) about the world origin; joint
// columns pair the composite force of a unit joint acceleration with every
// ancestor's motion subspace.
template <typename T>
std::vector<T> crba(const KinematicModel& m, const T* q) {
  const std::vector<LinkPose<T>> X = link_poses(m, q);
  const int n_links = static_cast<int>(m.links.size());
  const int nv = m.nv();

  std::vector<T> mass(n_links, T(0));
  std::vector<km::Vec3<T>> h(n_links, km::Vec3<T>{T(0), T(0), T(0)});
  std::vector<km::Mat3<T>> Io(n_links, km::Mat3<T>::zero());

  for (int li = 0; li < n_links; ++li) {
    const urdf::LinkSpec& link = m.links[li];
    if (link.mass == 0.0 && link.inertia.isZero(0.0)) continue;
    const km::Vec3<T> xc = X[li].p + X[li].R * detail::lift<T>(link.com);
    const km::Mat3<T> Ic =
        X[li].R * detail::lift<T>(link.inertia) * X[li].R.transposed();
    mass[li] = T(link.mass);
    h[li] = xc * T(link.mass);
    // Parallel axis from the center of mass to the world origin.
    Io[li] = Ic + (km::Mat3<T>::identity() * km::dot(xc, xc) - km::outer(xc, xc)) *
                      T(link.mass);
  }

  for (int ji = static_cast<int>(m.joints.size()) - 1; ji >= 0; --ji) {
    const urdf::JointSpec& j = m.joints[ji];
    mass[j.parent_link_index] += mass[j.child_link_index];
    h[j.parent_link_index] += h[j.child_link_index];
    Io[j.parent_link_index] += Io[j.child_link_index];
  }

  std::vector<T> M(static_cast<std::size_t>(nv) * nv, T(0));
  auto at = [&](int r, int c) -> T& { return M[static_cast<std::size_t>(r) * nv + c]; };

  // Motion subspace of one degree of freedom in origin coordinates.
  struct Axis {
    km::Vec3<T> w, vo;
  };
  auto joint_axis = [&](const urdf::JointSpec& j) -> Axis {
    const km::Vec3<T> s = X[j.child_link_index].R * detail::lift<T>(j.axis);
    if (j.kind == urdf::JointKind::prismatic)
      return {km::Vec3<T>{T(0), T(0), T(0)}, s};
    return {s, km::cross(X[j.child_link_index].p, s)};
  };
  auto composite_force = [&](int li, const Axis& ax) {
    // (f, n_o) of the composite rooted at li under unit acceleration ax.
    struct Wrench {
      km::Vec3<T> f, no;
    } F;
    F.f = ax.vo * mass[li] + km::cross(ax.w, h[li]);
    F.no = Io[li] * ax.w + km::cross(h[li], ax.vo);
    return F;
  };
  auto pair = [&](const Axis& ax, const auto& F) -> T {
    return km::dot(ax.w, F.no) + km::dot(ax.vo, F.f);
  };

  std::vector<Axis> base_axes;
  if (m.floating_base) {
    const km::Mat3<T>& Rb = X[m.root_link].R;
    const km::Vec3<T>& pb = X[m.root_link].p;
    for (int i = 0; i < 3; ++i) {
      km::Vec3<T> e{T(i == 0 ? 1 : 0), T(i == 1 ? 1 : 0), T(i == 2 ? 1 : 0)};
      base_axes.push_back({km::Vec3<T>{T(0), T(0), T(0)}, e});
    }
    for (int i = 0; i < 3; ++i) {
      const km::Vec3<T> w{Rb(0, i), Rb(1, i), Rb(2, i)};
      base_axes.push_back({w, km::cross(pb, w)});
    }
    for (int a = 0; a < 6; ++a) {
      const auto F = composite_force(m.root_link, base_axes[a]);
      for (int b = 0; b < 6; ++b) at(b, a) = pair(base_axes[b], F);
    }
  }

  for (const urdf::JointSpec& j : m.joints) {
    if (!j.movable()) continue;
    const int col = m.v_offset(j);
    const Axis ax = joint_axis(j);
    const auto F = composite_force(j.child_link_index, ax);
    at(col, col) = pair(ax, F);
    // Walk ancestors of the joint's child link.
    int li = j.parent_link_index;
    while (li >= 0) {
      const int pj = m.link_parent_joint[li];
      if (pj < 0) break;
      const urdf::JointSpec& anc = m.joints[pj];
      if (anc.movable()) {
        const T v = pair(joint_axis(anc), F);
        at(m.v_offset(anc), col) = v;
        at(col, m.v_offset(anc)) = v;
      }
      li = anc.parent_link_index;
    }
    if (m.floating_base)
      for (int a = 0; a < 6; ++a) {
        const T v = pair(base_axes[a], F);
        at(a, col) = v;
        at(col, a) = v;
      }
  }
  return M;
}

// rhodot = 1/2 rho (x) (omega, 0), quaternion stored (x, y, z, w), omega in
// the base-local frame.
template <typename T>
std::array<T, 4> quaternion_rate(const std::array<T, 4>& rho,
                                 const km::Vec3<T>& omega) {
  const std::array<T, 4> wq{omega.x, omega.y, omega.z, T(0)};
  std::array<T, 4> r = km::quat_mul(rho, wq);
  for (T& c : r) c = c * T(0.5);
  return r;
}

// Pose of a named frame given precomputed link poses.
template <typename T>
LinkPose<T> frame_pose(const KinematicModel& m, const std::vector<LinkPose<T>>& X,
                       int frame_index) {
  const urdf::Frame& fr = m.frames[frame_index];
  const LinkPose<T>& L = X[fr.link_index];
  LinkPose<T> out;
  out.R = L.R * detail::lift<T>(fr.local.R);
  out.p = L.p + L.R * detail::lift<T>(fr.local.p);
  return out;
}

// ---------------------------------------------------------------------------
// Double-precision wrappers used by tests and non-traced callers.

FramePose forward_kinematics(const KinematicModel& m, const Eigen::VectorXd& q,
                             const std::string& frame);
FrameVelocity frame_velocity(const KinematicModel& m, const Eigen::VectorXd& q,
                             const Eigen::VectorXd& nu, const std::string& frame);
// 6 x nv world-frame geometric Jacobian, rows (linear, angular).
Eigen::MatrixXd frame_jacobian(const KinematicModel& m, const Eigen::VectorXd& q,
                               const std::string& frame);
Eigen::VectorXd inverse_dynamics(const KinematicModel& m, const Eigen::VectorXd& q,
                                 const Eigen::VectorXd& nu,
                                 const Eigen::VectorXd& nudot,
                                 const ContactForceSet& forces = {});
Eigen::MatrixXd mass_matrix(const KinematicModel& m, const Eigen::VectorXd& q);
Eigen::Vector4d quaternion_rate(const Eigen::Vector4d& rho,
                                const Eigen::Vector3d& omega);

}  // namespace skyline::kindyn
