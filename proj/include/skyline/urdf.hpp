#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace skyline::urdf {

class UrdfError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Transform {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d p = Eigen::Vector3d::Zero();
};

// URDF rpy convention: R = Rz(yaw) * Ry(pitch) * Rx(roll).
Eigen::Matrix3d rotation_from_rpy(double roll, double pitch, double yaw);

enum class JointKind { revolute, continuous, prismatic, fixed };

struct JointSpec {
  std::string name;
  JointKind kind = JointKind::fixed;
  std::string parent_link;
  std::string child_link;
  Transform origin;              // child frame in parent frame at zero position
  Eigen::Vector3d axis{1, 0, 0};  // in child frame
  std::optional<std::array<double, 2>> position_limits;
  std::optional<double> effort_limit;

  int parent_link_index = -1;
  int child_link_index = -1;
  // Index among movable joints in topological order; -1 for fixed joints.
  int coord_index = -1;

  bool movable() const { return kind != JointKind::fixed; }
};

struct LinkSpec {
  std::string name;
  double mass = 0.0;
  Eigen::Vector3d com = Eigen::Vector3d::Zero();
  Eigen::Matrix3d inertia = Eigen::Matrix3d::Zero();  // about com, link frame
};

struct Frame {
  std::string name;
  int link_index = -1;
  Transform local;
};

// Validated kinematic tree. Joints are stored parents-before-children; the
// floating base is a coordinate-layout convention, not a joint:
//   q = [p(3), rho(4, quaternion x,y,z,w), theta(n)]
//   v = [pdot(3, world), omega(3, base-local), thetadot(n)]
class KinematicModel {
 public:
  std::vector<LinkSpec> links;
  std::vector<JointSpec> joints;   // topological order
  std::vector<Frame> frames;
  std::vector<int> link_parent_joint;  // per link, index into joints; -1 at root
  int root_link = -1;
  bool floating_base = false;
  int n_movable = 0;
  Eigen::Vector3d gravity{0.0, 0.0, -9.81};

  int nq() const { return floating_base ? 7 + n_movable : n_movable; }
  int nv() const { return floating_base ? 6 + n_movable : n_movable; }

  // Offset of a movable joint's coordinate inside q (resp. v).
  int q_offset(const JointSpec& j) const {
    return (floating_base ? 7 : 0) + j.coord_index;
  }
  int v_offset(const JointSpec& j) const {
    return (floating_base ? 6 : 0) + j.coord_index;
  }

  int link_index(const std::string& name) const;           // -1 if absent
  int frame_index(const std::string& name) const;          // -1 if absent
  int joint_index(const std::string& name) const;          // -1 if absent
  const Frame& frame(const std::string& name) const;       // throws UrdfError

  void add_frame(const std::string& name, const std::string& link,
                 const Transform& local);
};

KinematicModel parse_urdf(const std::string& text);
KinematicModel parse_urdf_file(const std::string& path);

KinematicModel attach_floating_base(const KinematicModel& model);

Eigen::VectorXd neutral_configuration(const KinematicModel& model);

}  // namespace skyline::urdf
