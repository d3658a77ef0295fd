#include "skyline/urdf.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <Eigen/Eigenvalues>

namespace skyline::urdf {

namespace pt = boost::property_tree;

Eigen::Matrix3d rotation_from_rpy(double roll, double pitch, double yaw) {
  const double cr = std::cos(roll), sr = std::sin(roll);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  Eigen::Matrix3d Rx, Ry, Rz;
  Rx << 1, 0, 0, 0, cr, -sr, 0, sr, cr;
  Ry << cp, 0, sp, 0, 1, 0, -sp, 0, cp;
  Rz << cy, -sy, 0, sy, cy, 0, 0, 0, 1;
  return Rz * Ry * Rx;
}

namespace {

Eigen::Vector3d parse_vec3(const std::string& text, const std::string& where) {
  std::istringstream is(text);
  Eigen::Vector3d v;
  if (!(is >> v[0] >> v[1] >> v[2]))
    throw UrdfError("malformed 3-vector in " + where + ": \"" + text + "\"");
  std::string rest;
  if (is >> rest)
    throw UrdfError("trailing data in 3-vector of " + where + ": \"" + text + "\"");
  return v;
}

Transform parse_origin(const pt::ptree& elem) {
  Transform t;
  if (auto origin = elem.get_child_optional("origin")) {
    if (auto xyz = origin->get_optional<std::string>("<xmlattr>.xyz"))
      t.p = parse_vec3(*xyz, "origin xyz");
    if (auto rpy = origin->get_optional<std::string>("<xmlattr>.rpy")) {
      const Eigen::Vector3d r = parse_vec3(*rpy, "origin rpy");
      t.R = rotation_from_rpy(r[0], r[1], r[2]);
    }
  }
  return t;
}

LinkSpec parse_link(const pt::ptree& elem) {
  LinkSpec link;
  link.name = elem.get<std::string>("<xmlattr>.name", "");
  if (link.name.empty()) throw UrdfError("link without a name attribute");
  if (auto inertial = elem.get_child_optional("inertial")) {
    const Transform origin = parse_origin(*inertial);
    link.com = origin.p;
    link.mass = inertial->get<double>("mass.<xmlattr>.value", 0.0);
    if (auto in = inertial->get_child_optional("inertia")) {
      Eigen::Matrix3d I;
      const double ixx = in->get<double>("<xmlattr>.ixx", 0.0);
      const double iyy = in->get<double>("<xmlattr>.iyy", 0.0);
      const double izz = in->get<double>("<xmlattr>.izz", 0.0);
      const double ixy = in->get<double>("<xmlattr>.ixy", 0.0);
      const double ixz = in->get<double>("<xmlattr>.ixz", 0.0);
      const double iyz = in->get<double>("<xmlattr>.iyz", 0.0);
      I << ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz;
      // The inertial origin rotation maps the tensor into the link frame.
      link.inertia = origin.R * I * origin.R.transpose();
    }
  }
  return link;
}

JointKind parse_joint_kind(const std::string& type, const std::string& joint) {
  if (type == "revolute") return JointKind::revolute;
  if (type == "continuous") return JointKind::continuous;
  if (type == "prismatic") return JointKind::prismatic;
  if (type == "fixed") return JointKind::fixed;
  throw UrdfError("joint \"" + joint + "\": unsupported joint kind \"" + type +
                  "\"");
}

JointSpec parse_joint(const pt::ptree& elem) {
  JointSpec j;
  j.name = elem.get<std::string>("<xmlattr>.name", "");
  if (j.name.empty()) throw UrdfError("joint without a name attribute");
  j.kind = parse_joint_kind(elem.get<std::string>("<xmlattr>.type", ""), j.name);
  j.parent_link = elem.get<std::string>("parent.<xmlattr>.link", "");
  j.child_link = elem.get<std::string>("child.<xmlattr>.link", "");
  if (j.parent_link.empty() || j.child_link.empty())
    throw UrdfError("joint \"" + j.name + "\": missing parent or child link");
  j.origin = parse_origin(elem);
  if (auto axis = elem.get_optional<std::string>("axis.<xmlattr>.xyz"))
    j.axis = parse_vec3(*axis, "joint \"" + j.name + "\" axis");
  if (auto limit = elem.get_child_optional("limit")) {
    const auto lower = limit->get_optional<double>("<xmlattr>.lower");
    const auto upper = limit->get_optional<double>("<xmlattr>.upper");
    if (lower && upper) j.position_limits = {{*lower, *upper}};
    if (auto effort = limit->get_optional<double>("<xmlattr>.effort"))
      j.effort_limit = *effort;
  }
  return j;
}

void validate_joint(const JointSpec& j) {
  if (j.movable()) {
    const double n = j.axis.norm();
    if (std::abs(n - 1.0) > 1e-9)
      throw UrdfError("joint \"" + j.name + "\": axis is not unit norm (|axis| = " +
                      std::to_string(n) + ")");
  }
  if (j.position_limits && (*j.position_limits)[0] > (*j.position_limits)[1])
    throw UrdfError("joint \"" + j.name + "\": lower limit exceeds upper limit");
}

void validate_link(const LinkSpec& link) {
  if (link.mass < 0.0)
    throw UrdfError("link \"" + link.name + "\": negative mass");
  if ((link.inertia - link.inertia.transpose()).cwiseAbs().maxCoeff() > 1e-9)
    throw UrdfError("link \"" + link.name + "\": inertia tensor not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(link.inertia);
  const Eigen::Vector3d m = es.eigenvalues();
  if (m.minCoeff() < -1e-9)
    throw UrdfError("link \"" + link.name + "\": inertia tensor not positive semidefinite");
  if (link.mass > 0.0) {
    const double tol = 1e-9 * std::max(1.0, m.maxCoeff());
    if (m[0] + m[1] < m[2] - tol || m[0] + m[2] < m[1] - tol ||
        m[1] + m[2] < m[0] - tol)
      throw UrdfError("link \"" + link.name +
                      "\": principal moments violate the triangle inequality");
  }
}

}  // namespace

int KinematicModel::link_index(const std::string& name) const {
  for (std::size_t i = 0; i < links.size(); ++i)
    if (links[i].name == name) return static_cast<int>(i);
  return -1;
}

int KinematicModel::frame_index(const std::string& name) const {
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (frames[i].name == name) return static_cast<int>(i);
  return -1;
}

int KinematicModel::joint_index(const std::string& name) const {
  for (std::size_t i = 0; i < joints.size(); ++i)
    if (joints[i].name == name) return static_cast<int>(i);
  return -1;
}

const Frame& KinematicModel::frame(const std::string& name) const {
  const int i = frame_index(name);
  if (i < 0) throw UrdfError("unknown frame \"" + name + "\"");
  return frames[i];
}

void KinematicModel::add_frame(const std::string& name, const std::string& link,
                               const Transform& local) {
  if (frame_index(name) >= 0)
    throw UrdfError("frame \"" + name + "\" already exists");
  const int li = link_index(link);
  if (li < 0)
    throw UrdfError("frame \"" + name + "\" references unknown link \"" + link +
                    "\"");
  frames.push_back(Frame{name, li, local});
}

KinematicModel parse_urdf(const std::string& text) {
  pt::ptree doc;
  try {
    std::istringstream is(text);
    pt::read_xml(is, doc, pt::xml_parser::no_comments);
  } catch (const pt::xml_parser_error& e) {
    throw UrdfError("XML syntax error at line " + std::to_string(e.line()) +
                    ": " + e.message());
  }

  if (doc.count("robot") != 1)
    throw UrdfError("expected exactly one <robot> element");
  const pt::ptree& robot = doc.get_child("robot");

  KinematicModel model;
  std::vector<JointSpec> raw_joints;
  for (const auto& [key, elem] : robot) {
    if (key == "link") {
      LinkSpec link = parse_link(elem);
      if (model.link_index(link.name) >= 0)
        throw UrdfError("duplicate link \"" + link.name + "\"");
      validate_link(link);
      model.links.push_back(std::move(link));
    } else if (key == "joint") {
      JointSpec j = parse_joint(elem);
      validate_joint(j);
      raw_joints.push_back(std::move(j));
    }
  }
  if (model.links.empty()) throw UrdfError("URDF declares no links");

  // Resolve references and find the root (the unique link with no parent).
  const int n_links = static_cast<int>(model.links.size());
  std::vector<int> parent_of(n_links, -1);  // index into raw_joints
  for (std::size_t ji = 0; ji < raw_joints.size(); ++ji) {
    JointSpec& j = raw_joints[ji];
    j.parent_link_index = model.link_index(j.parent_link);
    j.child_link_index = model.link_index(j.child_link);
    if (j.parent_link_index < 0)
      throw UrdfError("joint \"" + j.name + "\": dangling parent link \"" +
                      j.parent_link + "\"");
    if (j.child_link_index < 0)
      throw UrdfError("joint \"" + j.name + "\": dangling child link \"" +
                      j.child_link + "\"");
    if (parent_of[j.child_link_index] >= 0)
      throw UrdfError("link \"" + j.child_link + "\" has multiple parent joints");
    parent_of[j.child_link_index] = static_cast<int>(ji);
  }

  std::vector<int> roots;
  for (int li = 0; li < n_links; ++li)
    if (parent_of[li] < 0) roots.push_back(li);
  if (roots.empty())
    throw UrdfError("cycle in joint graph: no root link");
  if (roots.size() > 1) {
    std::string names;
    for (int li : roots) names += " \"" + model.links[li].name + "\"";
    throw UrdfError("multiple root links:" + names);
  }
  model.root_link = roots[0];

  // Topological joint order: breadth-first from the root, children visited
  // in document order, so coordinate assignment is deterministic.
  std::vector<char> joint_seen(raw_joints.size(), 0);
  std::vector<int> queue{model.root_link};
  model.link_parent_joint.assign(n_links, -1);
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const int li = queue[head];
    for (std::size_t ji = 0; ji < raw_joints.size(); ++ji) {
      if (joint_seen[ji] || raw_joints[ji].parent_link_index != li) continue;
      joint_seen[ji] = 1;
      JointSpec j = raw_joints[ji];
      if (j.movable()) j.coord_index = model.n_movable++;
      const int child = j.child_link_index;
      model.link_parent_joint[child] = static_cast<int>(model.joints.size());
      model.joints.push_back(std::move(j));
      queue.push_back(child);
    }
  }
  for (std::size_t ji = 0; ji < raw_joints.size(); ++ji)
    if (!joint_seen[ji])
      throw UrdfError("cycle in joint graph involving joint \"" +
                      raw_joints[ji].name + "\"");

  for (const LinkSpec& link : model.links)
    model.frames.push_back(
        Frame{link.name, model.link_index(link.name), Transform{}});

  return model;
}

KinematicModel parse_urdf_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UrdfError("cannot open URDF file \"" + path + "\"");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_urdf(ss.str());
}

KinematicModel attach_floating_base(const KinematicModel& model) {
  if (model.floating_base)
    throw UrdfError("model already has a floating base");
  KinematicModel out = model;
  out.floating_base = true;
  return out;
}

Eigen::VectorXd neutral_configuration(const KinematicModel& model) {
  Eigen::VectorXd q = Eigen::VectorXd::Zero(model.nq());
  if (model.floating_base) q[6] = 1.0;  // identity quaternion (x,y,z,w)
  for (const JointSpec& j : model.joints) {
    if (!j.movable()) continue;
    double v = 0.0;
    if (j.position_limits) {
      const auto& [lo, hi] = *j.position_limits;
      if (lo > 0.0 || hi < 0.0) v = 0.5 * (lo + hi);
    }
    q[model.q_offset(j)] = v;
  }
  return q;
}

}  // namespace skyline::urdf
