// Two-domain synthetic corpus: anthropometric skeleton sampling via forward
// kinematics, look-at cameras, stick-figure rendering, pose corruption for
// discriminator sanity checks, and a deterministic text dataset format.
//
// Storage convention: all persisted floats are 32-bit; values are quantised to
// f32 at generation time before any dependent quantity (projection, image) is
// computed, so save -> load is bit-exact.  Labeled samples persist the
// camera-frame 3D pose and re-derive 2D by intrinsic projection on load, which
// keeps the 2D/3D consistency exact instead of f32-rounded.
#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "advpose/core.hpp"
#include "advpose/skeleton.hpp"

namespace advpose {

inline constexpr double kPi = 3.14159265358979323846;

// ------ anthropometric model ------

struct AnthropometricModel {
  // Indexed by child joint of each bone; root entries unused.
  Vec bone_mean;   // mm
  Vec bone_std;    // mm
  Mat angle_min;   // P x 3 Euler offsets from rest, radians (alpha, beta, gamma)
  Mat angle_max;
  Mat rest_angles; // P x 3
  Mat rest_dir;    // P x 3 unit bone direction in the parent's frame
};

inline Mat3 rot_x(double a) {
  Mat3 m;
  m << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return m;
}
inline Mat3 rot_y(double a) {
  Mat3 m;
  m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return m;
}
inline Mat3 rot_z(double a) {
  Mat3 m;
  m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return m;
}

// Rotation carrying the +z axis onto unit vector u.
inline Mat3 align_z_to(const Vec3& u) {
  Vec3 z(0, 0, 1);
  Vec3 axis = z.cross(u);
  double s = axis.norm(), c = z.dot(u);
  if (s < 1e-12) {
    if (c > 0) return Mat3::Identity();
    Mat3 flip = Mat3::Identity();
    flip(1, 1) = flip(2, 2) = -1.0;  // pi about x
    return flip;
  }
  axis /= s;
  Mat3 k;
  k << 0, -axis.z(), axis.y(), axis.z(), 0, -axis.x(), -axis.y(), axis.x(), 0;
  return Mat3::Identity() + s * k + (1.0 - c) * k * k;
}

inline std::vector<std::string> validate_model(const AnthropometricModel& m,
                                               const SkeletonTopology& topo) {
  std::vector<std::string> bad;
  const int P = topo.joint_count;
  if (m.bone_mean.size() != P || m.bone_std.size() != P || m.angle_min.rows() != P ||
      m.angle_max.rows() != P || m.rest_angles.rows() != P || m.rest_dir.rows() != P) {
    bad.push_back("model arrays not sized to joint count");
    return bad;
  }
  for (int j = 0; j < P; j++) {
    if (j == topo.root) continue;
    if (m.bone_mean(j) <= 0.0) bad.push_back("bone mean <= 0 at joint " + std::to_string(j));
    if (m.bone_std(j) < 0.0) bad.push_back("bone std < 0 at joint " + std::to_string(j));
    for (int k = 0; k < 3; k++)
      if (m.angle_min(j, k) > m.angle_max(j, k))
        bad.push_back("angle min > max at joint " + std::to_string(j));
  }
  for (auto [l, r] : topo.symmetry_pairs) {
    if (m.bone_mean(l) != m.bone_mean(r) || m.bone_std(l) != m.bone_std(r))
      bad.push_back("symmetric bones differ: " + topo.names[l] + "/" + topo.names[r]);
  }
  return bad;
}

// Default body: template joint positions in mm (world y points down), bone
// statistics, and per-joint articulation ranges.  Angle alpha tilts about the
// local x axis (kept within +-pi/2 so poses remain angle-recoverable), beta is
// the main swing about local y, gamma (twist) is pinned to zero.  The root row
// carries the body's global heading: a free yaw about the vertical axis, so
// sampled people face every direction rather than a canonical one.
inline AnthropometricModel default_model(const SkeletonTopology& topo) {
  const int P = topo.joint_count;
  Mat tmpl(P, 3);
  tmpl.row(0) << 0, 0, 0;        // pelvis
  tmpl.row(1) << 0, -220, 0;     // spine
  tmpl.row(2) << 0, -440, 0;     // neck
  tmpl.row(3) << 0, -600, 0;     // head
  tmpl.row(4) << 130, 0, 0;      // l_hip
  tmpl.row(5) << 130, 420, 0;    // l_knee
  tmpl.row(6) << 130, 820, 0;    // l_ankle
  tmpl.row(7) << -130, 0, 0;     // r_hip
  tmpl.row(8) << -130, 420, 0;   // r_knee
  tmpl.row(9) << -130, 820, 0;   // r_ankle
  tmpl.row(10) << 180, -440, 0;  // l_shoulder
  tmpl.row(11) << 180, -160, 0;  // l_elbow
  tmpl.row(12) << 180, 100, 0;   // l_wrist
  tmpl.row(13) << -180, -440, 0; // r_shoulder
  tmpl.row(14) << -180, -160, 0; // r_elbow
  tmpl.row(15) << -180, 100, 0;  // r_wrist

  AnthropometricModel m;
  m.bone_mean = Vec::Zero(P);
  m.bone_std = Vec::Zero(P);
  m.angle_min = Mat::Zero(P, 3);
  m.angle_max = Mat::Zero(P, 3);
  m.rest_angles = Mat::Zero(P, 3);
  m.rest_dir = Mat::Zero(P, 3);

  auto set_range = [&](int j, double a, double b_lo, double b_hi) {
    m.angle_min(j, 0) = -a;
    m.angle_max(j, 0) = a;
    m.angle_min(j, 1) = b_lo;
    m.angle_max(j, 1) = b_hi;
  };
  set_range(1, 0.25, -0.35, 0.35);   // spine
  set_range(2, 0.20, -0.30, 0.30);   // neck
  set_range(3, 0.35, -0.45, 0.45);   // head
  set_range(4, 0.08, -0.08, 0.08);   // hips: nearly rigid pelvis
  set_range(7, 0.08, -0.08, 0.08);
  set_range(5, 0.45, -0.85, 0.55);   // thighs (hip articulation)
  set_range(8, 0.45, -0.55, 0.85);
  set_range(6, 0.18, -0.10, 1.90);   // shins (knee flexion)
  set_range(9, 0.18, -1.90, 0.10);
  set_range(10, 0.12, -0.12, 0.12);  // shoulders on the girdle
  set_range(13, 0.12, -0.12, 0.12);
  set_range(11, 0.95, -1.25, 1.25);  // upper arms (shoulder articulation)
  set_range(14, 0.95, -1.25, 1.25);
  set_range(12, 0.18, -0.10, 2.20);  // forearms (elbow flexion)
  set_range(15, 0.18, -2.20, 0.10);
  m.angle_min(0, 1) = -kPi;          // pelvis heading (free yaw)
  m.angle_max(0, 1) = kPi;

  Vec sigma(P);
  sigma << 0, 10, 8, 6, 5, 12, 12, 5, 12, 12, 6, 10, 10, 6, 10, 10;

  // Derive bone lengths and rest directions (in parent frames) from the
  // template by walking parents-first.
  std::vector<Mat3> rg(P, Mat3::Identity());
  for (int j : topo.subtree(topo.root)) {
    if (j == topo.root) continue;
    int par = topo.parent[j];
    Vec3 d = (tmpl.row(j) - tmpl.row(par)).transpose();
    double len = d.norm();
    m.bone_mean(j) = len;
    m.bone_std(j) = sigma(j);
    Vec3 u = rg[par].transpose() * (d / len);
    m.rest_dir.row(j) = u.transpose();
    rg[j] = rg[par] * align_z_to(u);
  }
  return m;
}

// ------ pose sampling ------

struct PoseDraws {
  Vec lengths;  // by child joint, root = 0
  Mat angles;   // P x 3
};

// Forward kinematics from the root: bone lengths from a +-2 sigma truncated
// Gaussian, joint angles uniform within scope-scaled limits around rest.
// Global frame of the root joint for a given angle table.  The root has no
// parent bone, so its row acts directly as a world rotation (beta = heading).
inline Mat3 root_frame(const Mat& angles, int root) {
  return rot_y(angles(root, 1)) * rot_x(angles(root, 0)) * rot_z(angles(root, 2));
}

inline Pose3D sample_pose(const AnthropometricModel& m, const SkeletonTopology& topo,
                          double scope, Rng& rng, PoseDraws* draws = nullptr) {
  const int P = topo.joint_count;
  Vec lengths = Vec::Zero(P);
  Mat angles = Mat::Zero(P, 3);
  for (int j = 0; j < P; j++) {
    if (j != topo.root) lengths(j) = rng.trunc_normal(m.bone_mean(j), m.bone_std(j), 2.0);
    for (int k = 0; k < 3; k++)
      angles(j, k) = m.rest_angles(j, k) +
                     rng.uniform(scope * m.angle_min(j, k), scope * m.angle_max(j, k));
  }

  Pose3D pose{Mat::Zero(P, 3), Frame::World};
  std::vector<Mat3> rg(P, Mat3::Identity());
  rg[topo.root] = root_frame(angles, topo.root);
  for (int j : topo.subtree(topo.root)) {
    if (j == topo.root) continue;
    int par = topo.parent[j];
    Mat3 q = align_z_to(m.rest_dir.row(j).transpose());
    Mat3 local = q * rot_y(angles(j, 1)) * rot_x(angles(j, 0));
    Vec3 dir = rg[par] * local * Vec3(0, 0, 1);
    pose.coords.row(j) = pose.coords.row(par) + lengths(j) * dir.transpose();
    rg[j] = rg[par] * local * rot_z(angles(j, 2));
  }
  if (draws) {
    draws->lengths = lengths;
    draws->angles = angles;
  }
  return pose;
}

inline Pose3D rest_pose(const AnthropometricModel& m, const SkeletonTopology& topo) {
  AnthropometricModel frozen = m;
  frozen.bone_std.setZero();
  Rng rng(0);
  return sample_pose(frozen, topo, 0.0, rng);
}

struct RecoveredPose {
  Vec lengths;
  Mat angles;  // gamma always 0 (the default model carries no twist)
};

// Inverse of sample_pose for zero-twist models: walks parents-first, reading
// each bone's (alpha, beta) off its direction in the parent frame.  The global
// heading is not identifiable from coordinates alone (any yaw can be absorbed
// into the root's children), so callers that know it pass it via root_rot;
// with the wrong root_rot the recovery still reproduces the coordinates, but
// the angles land in a spun parameterization instead of the sampled one.
inline RecoveredPose recover_pose(const Pose3D& pose, const AnthropometricModel& m,
                                  const SkeletonTopology& topo,
                                  const Mat3& root_rot = Mat3::Identity()) {
  const int P = topo.joint_count;
  RecoveredPose out{Vec::Zero(P), Mat::Zero(P, 3)};
  std::vector<Mat3> rg(P, Mat3::Identity());
  rg[topo.root] = root_rot;
  for (int j : topo.subtree(topo.root)) {
    if (j == topo.root) continue;
    int par = topo.parent[j];
    Vec3 d = (pose.coords.row(j) - pose.coords.row(par)).transpose();
    double len = d.norm();
    out.lengths(j) = len;
    Mat3 q = align_z_to(m.rest_dir.row(j).transpose());
    Vec3 w = q.transpose() * rg[par].transpose() * (d / len);
    double alpha = std::asin(std::clamp(-w.y(), -1.0, 1.0));
    double beta = std::atan2(w.x(), w.z());
    out.angles(j, 0) = alpha;
    out.angles(j, 1) = beta;
    rg[j] = rg[par] * q * rot_y(beta) * rot_x(alpha);
  }
  return out;
}

// ------ cameras and domains ------

struct CameraRange {
  double az_min = -3.14159265358979, az_max = 3.14159265358979;
  double el_min = 0.0, el_max = 0.5;
  double dist_min = 3800.0, dist_max = 4200.0;
};

struct DomainSpec {
  std::string name;
  bool sampled_cameras = true;
  std::vector<std::array<double, 3>> fixed_views;  // (azimuth, elevation, distance)
  CameraRange range;
  double pose_scope = 1.0;
  bool has_3d_labels = false;
  int img_h = 32, img_w = 32;
  // Focal length trades millimeters-per-pixel against heatmap edge margin: at
  // 36 the projected body stays >= 3 sigma from the 16x16 heatmap border, so
  // Gaussian truncation bias on soft-argmax stays below rendering quantization.
  double fx = 36.0, fy = 36.0;
};

inline std::vector<std::string> validate_domain(const DomainSpec& d) {
  std::vector<std::string> bad;
  if (d.img_h < 8 || d.img_w < 8) bad.push_back("image size below 8x8");
  if (d.sampled_cameras) {
    if (d.range.az_min > d.range.az_max || d.range.el_min > d.range.el_max ||
        d.range.dist_min > d.range.dist_max || d.range.dist_min <= 0.0)
      bad.push_back("empty or invalid camera range");
  } else if (d.fixed_views.empty()) {
    bad.push_back("fixed-camera domain without views");
  }
  if (d.pose_scope <= 0.0 || d.pose_scope > 1.0) bad.push_back("pose scope outside (0,1]");
  if (d.fx <= 0.0 || d.fy <= 0.0) bad.push_back("non-positive focal length");
  return bad;
}

// Everything needed to rebuild a camera exactly; this is what dataset files
// store (as f32), since storing a rotation matrix at f32 would break its
// orthonormality tolerance.
struct CameraParams {
  double az = 0, el = 0, dist = 4000;
  Vec3 target = Vec3::Zero();
  double fx = 24, fy = 24, cx = 15.5, cy = 15.5;
};

// Look-at camera: sits at `dist` from the target along (az, el), images the
// target at the principal point with depth exactly `dist`.  World y is down,
// so the image keeps heads up.
inline CameraModel build_camera(const CameraParams& p) {
  Vec3 fwd(std::cos(p.el) * std::sin(p.az), std::sin(p.el), std::cos(p.el) * std::cos(p.az));
  Vec3 eye = p.target - p.dist * fwd;
  Vec3 up(0, -1, 0);
  Vec3 zc = (p.target - eye).normalized();
  Vec3 xc = zc.cross(up).normalized();
  Vec3 yc = zc.cross(xc);
  CameraModel cam;
  cam.fx = p.fx;
  cam.fy = p.fy;
  cam.cx = p.cx;
  cam.cy = p.cy;
  cam.rotation.row(0) = xc.transpose();
  cam.rotation.row(1) = yc.transpose();
  cam.rotation.row(2) = zc.transpose();
  cam.translation = eye;
  return cam;
}

inline CameraParams sample_camera_params(const DomainSpec& d, const Vec3& target, Rng& rng) {
  CameraParams p;
  p.target = target;
  p.fx = d.fx;
  p.fy = d.fy;
  p.cx = (d.img_w - 1) / 2.0;
  p.cy = (d.img_h - 1) / 2.0;
  if (d.sampled_cameras) {
    p.az = rng.uniform(d.range.az_min, d.range.az_max);
    p.el = rng.uniform(d.range.el_min, d.range.el_max);
    p.dist = rng.uniform(d.range.dist_min, d.range.dist_max);
  } else {
    auto v = d.fixed_views[rng.uniform_index(d.fixed_views.size())];
    p.az = v[0];
    p.el = v[1];
    p.dist = v[2];
  }
  return p;
}

inline CameraModel sample_camera(const DomainSpec& d, const Vec3& target, Rng& rng) {
  return build_camera(sample_camera_params(d, target, rng));
}

// All three domains draw from the same articulation statistics; what differs
// is label availability and the camera list.  A shared pose distribution is
// what makes distilling the labeled domain's geometry onto the unlabeled one
// meaningful -- the adversary then transfers a valid prior instead of a
// mismatched one.  Camera elevation and distance are kept nearly aliased
// across domains for the same reason: with the body's heading free, a fixed
// lab azimuth already covers every relative view, so a matched camera regime
// leaves the rendered images carrying no domain watermark the discriminator
// could latch onto instead of pose plausibility.
inline constexpr double kSharedPoseScope = 0.85;

// Labeled domain: 4 fixed cameras at cardinal azimuths, constant distance.
inline DomainSpec lab_domain() {
  DomainSpec d;
  d.name = "lab";
  d.sampled_cameras = false;
  double el = 10.0 * kPi / 180.0;
  d.fixed_views = {{0.0, el, 4000.0},
                   {0.5 * kPi, el, 4000.0},
                   {kPi, el, 4000.0},
                   {1.5 * kPi, el, 4000.0}};
  d.pose_scope = kSharedPoseScope;
  d.has_3d_labels = true;
  return d;
}

// Unlabeled domain: free azimuth, mild elevation/distance spread around the
// lab values.
inline DomainSpec wild_domain() {
  DomainSpec d;
  d.name = "wild";
  d.sampled_cameras = true;
  d.range = {-kPi, kPi, 5.0 * kPi / 180.0, 15.0 * kPi / 180.0, 3900.0, 4100.0};
  d.pose_scope = kSharedPoseScope;
  d.has_3d_labels = false;
  return d;
}

// Held-out transfer domain: wild-style sampled views inside the wild span,
// labels retained for measurement only.
inline DomainSpec xfer_domain() {
  DomainSpec d;
  d.name = "xfer";
  d.sampled_cameras = true;
  d.range = {-kPi, kPi, 6.0 * kPi / 180.0, 14.0 * kPi / 180.0, 3920.0, 4080.0};
  d.pose_scope = kSharedPoseScope;
  d.has_3d_labels = true;
  return d;
}

// ------ rendering ------

// 1-pixel stick figure via integer line rasterization; out-of-frame pixels
// are simply not plotted.
inline Mat render_stick_figure(const Pose2D& pose, const SkeletonTopology& topo, int h, int w) {
  Mat img = Mat::Zero(h, w);
  auto plot = [&](long x, long y) {
    if (x >= 0 && x < w && y >= 0 && y < h) img(y, x) = 1.0;
  };
  for (int j = 0; j < topo.joint_count; j++) {
    int par = topo.parent[j];
    if (par == j) continue;
    double u0 = pose.coords(par, 0), v0 = pose.coords(par, 1);
    double u1 = pose.coords(j, 0), v1 = pose.coords(j, 1);
    if (std::abs(u0) > 1e6 || std::abs(v0) > 1e6 || std::abs(u1) > 1e6 || std::abs(v1) > 1e6)
      continue;  // degenerate projection; nothing sensible to draw
    long x0 = std::llround(u0), y0 = std::llround(v0);
    long x1 = std::llround(u1), y1 = std::llround(v1);
    // Quick reject when the whole segment lies on one side of the frame.
    if ((x0 < 0 && x1 < 0) || (x0 >= w && x1 >= w) || (y0 < 0 && y1 < 0) ||
        (y0 >= h && y1 >= h))
      continue;
    long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    for (;;) {
      plot(x0, y0);
      if (x0 == x1 && y0 == y1) break;
      long e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
  return img;
}

// ------ corruption ------

inline int pick_non_root(const SkeletonTopology& topo, Rng& rng) {
  int j = static_cast<int>(rng.uniform_index(topo.joint_count - 1));
  return j >= topo.root ? j + 1 : j;
}

// Rotation carrying unit vector a onto unit vector b.
inline Mat3 align_vectors(const Vec3& a, const Vec3& b) {
  return align_z_to(b) * align_z_to(a).transpose();
}

enum class CorruptMode { LimbSwap, LengthScale, AngleViolation };

inline CorruptMode corrupt_mode_from_name(const std::string& s) {
  if (s == "limb-swap") return CorruptMode::LimbSwap;
  if (s == "length-scale") return CorruptMode::LengthScale;
  if (s == "angle-violation") return CorruptMode::AngleViolation;
  throw ConfigError("unknown corruption mode: " + s);
}

inline std::string corrupt_mode_name(CorruptMode m) {
  switch (m) {
    case CorruptMode::LimbSwap: return "limb-swap";
    case CorruptMode::LengthScale: return "length-scale";
    default: return "angle-violation";
  }
}

// Anthropometrically invalid variants of a valid pose: swapped left/right
// subtrees, one stretched bone, or one joint articulated past its limit.
// root_rot is the pose's global heading; only AngleViolation needs it (the
// coordinate-space modes commute with any rigid rotation of the body).
inline Pose3D corrupt_pose(const Pose3D& pose, const SkeletonTopology& topo,
                           const AnthropometricModel& model, CorruptMode mode,
                           double magnitude, Rng& rng,
                           const Mat3& root_rot = Mat3::Identity()) {
  Pose3D out = pose;
  switch (mode) {
    case CorruptMode::LimbSwap: {
      auto [l, r] = topo.symmetry_pairs[rng.uniform_index(topo.symmetry_pairs.size())];
      auto ls = topo.subtree(l), rs = topo.subtree(r);
      if (ls.size() == rs.size()) {
        for (size_t k = 0; k < ls.size(); k++)
          out.coords.row(ls[k]).swap(out.coords.row(rs[k]));
      }
      break;
    }
    case CorruptMode::LengthScale: {
      int j = pick_non_root(topo, rng);
      Eigen::RowVector3d delta = magnitude * (pose.coords.row(j) - pose.coords.row(topo.parent[j]));
      for (int k : topo.subtree(j)) out.coords.row(k) += delta;
      break;
    }
    case CorruptMode::AngleViolation: {
      int j = pick_non_root(topo, rng);
      int axis = (rng.uniform01() < 0.5) ? 0 : 1;
      bool high = rng.uniform01() < 0.5;
      RecoveredPose rec = recover_pose(pose, model, topo, root_rot);
      Mat angles = rec.angles;
      angles(j, axis) = high ? model.rest_angles(j, axis) + model.angle_max(j, axis) + magnitude
                             : model.rest_angles(j, axis) + model.angle_min(j, axis) - magnitude;
      // Re-aim the bone into j, carrying its whole subtree rigidly.
      int par = topo.parent[j];
      Mat3 q = align_z_to(model.rest_dir.row(j).transpose());
      // Parent global frame from the recovered chain.
      Mat3 rg = root_rot;
      {
        std::vector<int> chain;
        for (int a = par; a != topo.root; a = topo.parent[a]) chain.push_back(a);
        for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
          Mat3 qa = align_z_to(model.rest_dir.row(*it).transpose());
          rg = rg * qa * rot_y(rec.angles(*it, 1)) * rot_x(rec.angles(*it, 0));
        }
      }
      Vec3 old_dir = (pose.coords.row(j) - pose.coords.row(par)).transpose().normalized();
      Vec3 new_dir = rg * q * rot_y(angles(j, 1)) * rot_x(angles(j, 0)) * Vec3(0, 0, 1);
      Mat3 spin = align_vectors(old_dir, new_dir);
      Eigen::RowVector3d pivot = pose.coords.row(par);
      for (int k : topo.subtree(j))
        out.coords.row(k) = pivot + (spin * (pose.coords.row(k) - pivot).transpose()).transpose();
      break;
    }
  }
  return out;
}

// ------ samples and files ------

struct SyntheticSample {
  long id = 0;
  std::string domain;
  Mat image;  // img_h x img_w in [0,1]
  Pose2D pose2d;
  std::optional<Pose3D> pose3d;  // camera frame, present iff the domain is labeled
  CameraModel camera;
  CameraParams cam_params;
};

struct Dataset {
  std::string domain;
  int p = 0, img_h = 0, img_w = 0;
  bool has_3d = false;
  std::vector<SyntheticSample> samples;
};

namespace detail {

inline void quantize(CameraParams& p) {
  p.az = quantize_f32(p.az);
  p.el = quantize_f32(p.el);
  p.dist = quantize_f32(p.dist);
  for (int k = 0; k < 3; k++) p.target(k) = quantize_f32(p.target(k));
  p.fx = quantize_f32(p.fx);
  p.fy = quantize_f32(p.fy);
  p.cx = quantize_f32(p.cx);
  p.cy = quantize_f32(p.cy);
}

inline std::vector<float> mat_to_f32(const Mat& m) {
  std::vector<float> out;
  out.reserve(m.size());
  for (long r = 0; r < m.rows(); r++)
    for (long c = 0; c < m.cols(); c++) out.push_back(static_cast<float>(m(r, c)));
  return out;
}

inline Mat f32_to_mat(const std::vector<float>& v, long rows, long cols) {
  if (static_cast<long>(v.size()) != rows * cols)
    throw IoError("float blob has wrong element count");
  Mat m(rows, cols);
  size_t k = 0;
  for (long r = 0; r < rows; r++)
    for (long c = 0; c < cols; c++) m(r, c) = static_cast<double>(v[k++]);
  return m;
}

}  // namespace detail

// One fully generated sample; everything derives deterministically from
// (domain, model, seed, index) so generation is order-independent.
inline SyntheticSample generate_sample(const DomainSpec& domain, const AnthropometricModel& model,
                                       const SkeletonTopology& topo, uint64_t seed, long index) {
  Rng rng(mix_seed(seed, static_cast<uint64_t>(index)));
  Pose3D world = sample_pose(model, topo, domain.pose_scope, rng);
  CameraParams params = sample_camera_params(domain, world.coords.row(topo.root).transpose(), rng);
  detail::quantize(params);
  CameraModel cam = build_camera(params);

  Pose3D cam_pose = project(world, cam).first;
  // Quantise the stored quantity first, then derive everything else from it.
  for (long i = 0; i < cam_pose.coords.size(); i++)
    cam_pose.coords(i) = quantize_f32(cam_pose.coords(i));

  SyntheticSample s;
  s.id = index;
  s.domain = domain.name;
  s.camera = cam;
  s.cam_params = params;
  if (domain.has_3d_labels) {
    s.pose2d = project_camera_frame(cam_pose, cam);
    s.pose3d = cam_pose;
  } else {
    Pose2D q = project_camera_frame(cam_pose, cam);
    for (long i = 0; i < q.coords.size(); i++) q.coords(i) = quantize_f32(q.coords(i));
    s.pose2d = q;
    s.pose3d.reset();
  }
  s.image = render_stick_figure(s.pose2d, topo, domain.img_h, domain.img_w);
  return s;
}

inline Dataset generate_dataset(const DomainSpec& domain, const AnthropometricModel& model,
                                const SkeletonTopology& topo, long n, uint64_t seed) {
  if (n <= 0) throw ConfigError("dataset size must be positive");
  auto bad = validate_domain(domain);
  if (!bad.empty()) throw ConfigError("invalid domain: " + bad.front());
  Dataset ds;
  ds.domain = domain.name;
  ds.p = topo.joint_count;
  ds.img_h = domain.img_h;
  ds.img_w = domain.img_w;
  ds.has_3d = domain.has_3d_labels;
  ds.samples.reserve(n);
  for (long i = 0; i < n; i++) ds.samples.push_back(generate_sample(domain, model, topo, seed, i));
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + path);
  f << "ADVPOSE-DATA v1 domain=" << ds.domain << " P=" << ds.p << " img=" << ds.img_h << "x"
    << ds.img_w << " labels=" << (ds.has_3d ? 1 : 0) << " n=" << ds.samples.size() << "\n";
  for (const auto& s : ds.samples) {
    const CameraParams& c = s.cam_params;
    std::vector<float> campack = {
        static_cast<float>(c.az),        static_cast<float>(c.el),
        static_cast<float>(c.dist),      static_cast<float>(c.target(0)),
        static_cast<float>(c.target(1)), static_cast<float>(c.target(2)),
        static_cast<float>(c.fx),        static_cast<float>(c.fy),
        static_cast<float>(c.cx),        static_cast<float>(c.cy)};
    f << "s " << s.id << " " << f32_hex(campack) << " " << f32_hex(detail::mat_to_f32(s.image));
    if (ds.has_3d) {
      f << " - " << f32_hex(detail::mat_to_f32(s.pose3d->coords));
    } else {
      f << " " << f32_hex(detail::mat_to_f32(s.pose2d.coords)) << " -";
    }
    f << "\n";
  }
  if (!f.good()) throw IoError("write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(f, line)) throw BadMagic("empty dataset file: " + path);
  Dataset ds;
  long n = -1;
  {
    std::istringstream hs(line);
    std::string magic, ver, kv;
    hs >> magic >> ver;
    if (magic != "ADVPOSE-DATA" || ver != "v1") throw BadMagic("not a dataset file: " + path);
    while (hs >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) throw IoError("bad header token: " + kv);
      std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "domain") ds.domain = val;
      else if (key == "P") ds.p = std::stoi(val);
      else if (key == "img") {
        auto x = val.find('x');
        if (x == std::string::npos) throw IoError("bad img header");
        ds.img_h = std::stoi(val.substr(0, x));
        ds.img_w = std::stoi(val.substr(x + 1));
      } else if (key == "labels") ds.has_3d = val == "1";
      else if (key == "n") n = std::stol(val);
      else throw IoError("unknown header key: " + key);
    }
    if (ds.p <= 0 || ds.img_h < 8 || ds.img_w < 8 || n < 0)
      throw IoError("incomplete dataset header");
    ds.samples.reserve(n);
  }
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag, camhex, imghex, p2hex, p3hex;
    SyntheticSample s;
    ls >> tag >> s.id >> camhex >> imghex >> p2hex >> p3hex;
    if (ls.fail() || tag != "s") throw IoError("malformed sample line");
    auto campack = parse_f32_hex(camhex);
    if (campack.size() != 10) throw IoError("camera blob must hold 10 floats");
    CameraParams c;
    c.az = campack[0];
    c.el = campack[1];
    c.dist = campack[2];
    c.target = Vec3(campack[3], campack[4], campack[5]);
    c.fx = campack[6];
    c.fy = campack[7];
    c.cx = campack[8];
    c.cy = campack[9];
    s.cam_params = c;
    s.camera = build_camera(c);
    s.domain = ds.domain;
    s.image = detail::f32_to_mat(parse_f32_hex(imghex), ds.img_h, ds.img_w);
    if (s.image.minCoeff() < 0.0 || s.image.maxCoeff() > 1.0)
      throw IoError("image values outside [0,1]");
    if (ds.has_3d) {
      if (p2hex != "-" || p3hex == "-")
        throw IoError("labeled dataset must store 3D poses and derive 2D");
      Pose3D cam_pose{detail::f32_to_mat(parse_f32_hex(p3hex), ds.p, 3), Frame::Camera};
      s.pose3d = cam_pose;
      s.pose2d = project_camera_frame(cam_pose, s.camera);
    } else {
      if (p3hex != "-" || p2hex == "-")
        throw IoError("unlabeled dataset must store 2D poses only");
      s.pose2d = Pose2D{detail::f32_to_mat(parse_f32_hex(p2hex), ds.p, 2)};
      s.pose3d.reset();
    }
    ds.samples.push_back(std::move(s));
  }
  if (static_cast<long>(ds.samples.size()) != n)
    throw CountMismatch("dataset header n=" + std::to_string(n) + " but file holds " +
                        std::to_string(ds.samples.size()));
  return ds;
}

}  // namespace advpose
