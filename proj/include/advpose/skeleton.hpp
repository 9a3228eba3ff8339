// Articulated-skeleton domain types, camera model and pinhole projection.
//
// Conventions used throughout:
//   * 3D coordinates are millimeters, 2D coordinates are pixels.
//   * Camera transform is  p_cam = R * (p_world - t)  with R row-orthonormal
//     and t the camera position in world coordinates.
//   * Pixel coordinates: u = fx * x/z + cx, v = fy * y/z + cy, z > 0 in front
//     of the camera.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "advpose/core.hpp"

namespace advpose {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

enum class Frame { World, Camera };

struct Pose3D {
  Mat coords;  // P x 3, millimeters
  Frame frame = Frame::World;

  int joints() const { return static_cast<int>(coords.rows()); }
  Vec3 joint(int j) const { return coords.row(j).transpose(); }
  bool finite() const { return coords.allFinite(); }
};

struct Pose2D {
  Mat coords;  // P x 2, pixels

  int joints() const { return static_cast<int>(coords.rows()); }
  bool finite() const { return coords.allFinite(); }
};

struct CameraModel {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();  // camera position in world coordinates

  bool intrinsics_valid() const { return fx > 0.0 && fy > 0.0; }
  bool rotation_valid(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

// ------ topology ------

struct SkeletonTopology {
  int joint_count = 0;
  std::vector<int> parent;                      // root points to itself
  std::vector<std::string> names;
  std::vector<std::pair<int, int>> symmetry_pairs;  // (left, right)
  std::map<std::string, std::vector<int>> limb_groups;
  std::pair<int, int> head_segment{-1, -1};
  int root = 0;

  int find(std::string_view name) const {
    for (int j = 0; j < joint_count; j++)
      if (names[j] == name) return j;
    return -1;
  }

  // Joints in the subtree rooted at j, j included, in topological order.
  std::vector<int> subtree(int j) const {
    std::vector<int> out{j};
    for (size_t k = 0; k < out.size(); k++)
      for (int c = 0; c < joint_count; c++)
        if (parent[c] == out[k] && c != out[k]) out.push_back(c);
    return out;
  }
};

inline std::vector<std::string> validate_topology(const SkeletonTopology& t) {
  std::vector<std::string> bad;
  const int P = t.joint_count;
  if (P <= 0) {
    bad.push_back("joint count must be positive");
    return bad;
  }
  if (static_cast<int>(t.parent.size()) != P) bad.push_back("parent array size != joint count");
  if (static_cast<int>(t.names.size()) != P) bad.push_back("names size != joint count");
  if (t.root < 0 || t.root >= P) bad.push_back("root out of range");
  if (!bad.empty()) return bad;

  int self_parents = 0;
  for (int j = 0; j < P; j++) {
    if (t.parent[j] < 0 || t.parent[j] >= P) {
      bad.push_back("parent index out of range at joint " + std::to_string(j));
      return bad;
    }
    if (t.parent[j] == j) self_parents++;
  }
  if (self_parents != 1 || t.parent[t.root] != t.root)
    bad.push_back("exactly one self-parent at the root is required");

  // Walk each joint toward the root; a cycle never reaches it.
  for (int j = 0; j < P; j++) {
    int cur = j, steps = 0;
    while (t.parent[cur] != cur && steps <= P) {
      cur = t.parent[cur];
      steps++;
    }
    if (cur != t.root || steps > P) {
      bad.push_back("not a tree: joint " + std::to_string(j) + " does not reach the root");
      break;
    }
  }

  std::set<int> seen;
  for (auto [l, r] : t.symmetry_pairs) {
    if (l < 0 || l >= P || r < 0 || r >= P) {
      bad.push_back("symmetry pair index out of range");
      continue;
    }
    if (l == r) bad.push_back("symmetry pair: left equals right (" + std::to_string(l) + ")");
    if (!seen.insert(l).second || !seen.insert(r).second)
      bad.push_back("symmetry pairs share a joint");
  }

  for (const auto& [name, joints] : t.limb_groups)
    for (int j : joints)
      if (j < 0 || j >= P) bad.push_back("limb group " + name + " has joint out of range");

  auto [ha, hb] = t.head_segment;
  if (ha < 0 || ha >= P || hb < 0 || hb >= P) bad.push_back("head segment joint out of range");
  else if (ha == hb) bad.push_back("head segment joints must be distinct");

  return bad;
}

// ------ projection ------

inline std::pair<Pose3D, Pose2D> project(const Pose3D& pose, const CameraModel& cam) {
  if (pose.frame != Frame::World) throw Error("project expects a world-frame pose");
  const int P = pose.joints();
  Pose3D cam_pose{Mat(P, 3), Frame::Camera};
  Pose2D px{Mat(P, 2)};
  for (int j = 0; j < P; j++) {
    Vec3 p = cam.rotation * (pose.joint(j) - cam.translation);
    if (p.z() <= 0.0) throw NonPositiveDepth("joint " + std::to_string(j) + " behind camera");
    cam_pose.coords.row(j) = p.transpose();
    px.coords(j, 0) = cam.fx * p.x() / p.z() + cam.cx;
    px.coords(j, 1) = cam.fy * p.y() / p.z() + cam.cy;
  }
  return {cam_pose, px};
}

// Intrinsic-only projection of a camera-frame pose.
inline Pose2D project_camera_frame(const Pose3D& pose, const CameraModel& cam) {
  if (pose.frame != Frame::Camera) throw Error("expected a camera-frame pose");
  const int P = pose.joints();
  Pose2D px{Mat(P, 2)};
  for (int j = 0; j < P; j++) {
    double z = pose.coords(j, 2);
    if (z <= 0.0) throw NonPositiveDepth("joint " + std::to_string(j) + " behind camera");
    px.coords(j, 0) = cam.fx * pose.coords(j, 0) / z + cam.cx;
    px.coords(j, 1) = cam.fy * pose.coords(j, 1) / z + cam.cy;
  }
  return px;
}

// ------ serialization ------

inline std::string topology_to_text(const SkeletonTopology& t) {
  std::ostringstream os;
  os << "ADVPOSE-SKEL v1\n";
  os << "joints " << t.joint_count << "\n";
  for (int j = 0; j < t.joint_count; j++)
    os << "joint " << j << " " << t.names[j] << " " << t.parent[j] << "\n";
  os << "root " << t.root << "\n";
  for (auto [l, r] : t.symmetry_pairs) os << "pair " << l << " " << r << "\n";
  for (const auto& [name, joints] : t.limb_groups) {
    os << "group " << name;
    for (int j : joints) os << " " << j;
    os << "\n";
  }
  os << "head " << t.head_segment.first << " " << t.head_segment.second << "\n";
  return os.str();
}

inline SkeletonTopology topology_from_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "ADVPOSE-SKEL v1")
    throw BadMagic("not a skeleton file");
  SkeletonTopology t;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "joints") {
      ls >> t.joint_count;
      t.parent.assign(t.joint_count, 0);
      t.names.assign(t.joint_count, "");
    } else if (kw == "joint") {
      int idx, par;
      std::string name;
      ls >> idx >> name >> par;
      if (idx < 0 || idx >= t.joint_count) throw IoError("joint index out of range");
      t.names[idx] = name;
      t.parent[idx] = par;
    } else if (kw == "root") {
      ls >> t.root;
    } else if (kw == "pair") {
      int l, r;
      ls >> l >> r;
      t.symmetry_pairs.emplace_back(l, r);
    } else if (kw == "group") {
      std::string name;
      ls >> name;
      std::vector<int> joints;
      int j;
      while (ls >> j) joints.push_back(j);
      t.limb_groups[name] = joints;
    } else if (kw == "head") {
      ls >> t.head_segment.first >> t.head_segment.second;
    } else {
      throw IoError("unknown skeleton keyword: " + kw);
    }
    // The group branch reads joints until extraction fails, so skip it here.
    if (kw != "group" && ls.fail()) throw IoError("malformed skeleton line: " + line);
  }
  auto bad = validate_topology(t);
  if (!bad.empty()) throw IoError("invalid skeleton: " + bad.front());
  return t;
}

// Default 16-joint skeleton (MPII-style joint set).
// Index layout: 0 pelvis (root), 1 spine, 2 neck, 3 head, 4-6 left leg,
// 7-9 right leg, 10-12 left arm, 13-15 right arm.
inline const SkeletonTopology& default_topology() {
  static const SkeletonTopology t = [] {
    SkeletonTopology s;
    s.joint_count = 16;
    s.names = {"pelvis", "spine",  "neck",   "head",   "l_hip",      "l_knee",  "l_ankle",
               "r_hip",  "r_knee", "r_ankle", "l_shoulder", "l_elbow", "l_wrist",
               "r_shoulder", "r_elbow", "r_wrist"};
    s.parent = {0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 2, 10, 11, 2, 13, 14};
    s.root = 0;
    s.symmetry_pairs = {{4, 7}, {5, 8}, {6, 9}, {10, 13}, {11, 14}, {12, 15}};
    // Per-limb error groups keyed by the distal joint of each segment.
    s.limb_groups = {{"U.Arms", {11, 14}},
                     {"L.Arms", {12, 15}},
                     {"U.Legs", {5, 8}},
                     {"L.Legs", {6, 9}}};
    s.head_segment = {2, 3};
    return s;
  }();
  return t;
}

}  // namespace advpose
