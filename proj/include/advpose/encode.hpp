// Discriminator information sources: per-joint Gaussian heatmaps, depth maps
// (root-relative depth times the unit-peak Gaussian), and the 6xPxP pairwise
// geometric descriptor, plus the differentiable glue between them: soft-argmax
// coordinate extraction and 2D+depth -> 3D back-projection.
#pragma once

#include <cmath>
#include <utility>

#include "advpose/core.hpp"
#include "advpose/skeleton.hpp"
#include "advpose/synth.hpp"

namespace advpose {

// Absolute root depth assumed when back-projecting predictions; the wild
// domain never reveals the true one.  Lab cameras sit at exactly this
// distance, which keeps ground-truth and predicted descriptors commensurable.
inline constexpr double kNominalRootDepth = 4000.0;
// Descriptor normalization applied at the discriminator boundary.
inline constexpr double kDescOffsetScale = 1.0 / 500.0;
inline constexpr double kDescSquareScale = 1.0 / (500.0 * 500.0);

// P maps of h x w, one row per joint, pixels row-major (index y*w + x).
struct HeatmapStack {
  int h = 0, w = 0;
  Mat maps;  // P x (h*w)
  int joints() const { return static_cast<int>(maps.rows()); }
};

struct DepthMapStack {
  int h = 0, w = 0;
  Mat maps;  // P x (h*w), millimeters
  int joints() const { return static_cast<int>(maps.rows()); }
};

// Channel k in {0,1,2}: coordinate-k offset joint_i - joint_j (mm); channel
// k+3: its square (mm^2).  Entry (k, i*P + j).
struct GeoDescriptor {
  int p = 0;
  Mat d;  // 6 x (P*P)
  double at(int ch, int i, int j) const { return d(ch, i * p + j); }
};

struct DiscriminatorInput {
  HeatmapStack heatmaps;
  DepthMapStack depth_maps;
  GeoDescriptor descriptor;
};

// Row-major flattening to single rows, the layout every dense net consumes:
// images scan rows, map stacks scan joints then pixels, descriptors scan
// channels then (i, j).
inline Mat flatten_image(const Mat& img) {
  Mat row(1, img.size());
  long k = 0;
  for (long r = 0; r < img.rows(); r++)
    for (long c = 0; c < img.cols(); c++) row(0, k++) = img(r, c);
  return row;
}

inline Mat flatten_maps(const Mat& maps) {  // P x (h*w) -> 1 x P*h*w
  Mat row(1, maps.size());
  long k = 0;
  for (long j = 0; j < maps.rows(); j++)
    for (long c = 0; c < maps.cols(); c++) row(0, k++) = maps(j, c);
  return row;
}

inline Mat flatten_descriptor(const GeoDescriptor& g) {  // 1 x 6*P*P
  Mat row(1, g.d.size());
  long k = 0;
  for (long ch = 0; ch < 6; ch++)
    for (long c = 0; c < g.d.cols(); c++) row(0, k++) = g.d(ch, c);
  return row;
}

// Unit-peak isotropic Gaussians (unit variance) at the given heatmap-frame
// centers; off-map centers just leave truncated tails.
inline HeatmapStack render_heatmaps(const Pose2D& centers_hm, int h, int w) {
  const int P = centers_hm.joints();
  HeatmapStack out{h, w, Mat(P, h * w)};
  for (int j = 0; j < P; j++) {
    double cx = centers_hm.coords(j, 0), cy = centers_hm.coords(j, 1);
    for (int y = 0; y < h; y++)
      for (int x = 0; x < w; x++) {
        double dx = x - cx, dy = y - cy;
        out.maps(j, y * w + x) = std::exp(-0.5 * (dx * dx + dy * dy));
      }
  }
  return out;
}

inline DepthMapStack render_depth_maps(const HeatmapStack& hm, const Vec& depths_rel) {
  if (depths_rel.size() != hm.maps.rows())
    throw ShapeMismatch("depth count " + std::to_string(depths_rel.size()) +
                        " does not match " + std::to_string(hm.maps.rows()) + " heatmaps");
  DepthMapStack out{hm.h, hm.w, hm.maps};
  out.maps.array().colwise() *= depths_rel.array();
  return out;
}

inline GeoDescriptor geometric_descriptor(const Pose3D& pose) {
  if (!pose.finite()) throw NonFiniteValue("pose passed to geometric_descriptor");
  const int P = pose.joints();
  GeoDescriptor out{P, Mat(6, P * P)};
  for (int k = 0; k < 3; k++)
    for (int i = 0; i < P; i++)
      for (int j = 0; j < P; j++) {
        double delta = pose.coords(i, k) - pose.coords(j, k);
        out.d(k, i * P + j) = delta;
        out.d(k + 3, i * P + j) = delta * delta;
      }
  return out;
}

// Expectation of pixel coordinates under the map normalized to unit mass;
// returns (x, y).
inline std::pair<double, double> soft_argmax(const Mat& map) {
  double total = map.sum();
  if (!(total > 0.0)) throw DegenerateMap("soft_argmax needs positive total mass");
  double mx = 0.0, my = 0.0;
  for (long y = 0; y < map.rows(); y++)
    for (long x = 0; x < map.cols(); x++) {
      mx += x * map(y, x);
      my += y * map(y, x);
    }
  return {mx / total, my / total};
}

inline std::pair<double, double> soft_argmax_row(const Mat& row, int h, int w, int joint) {
  Mat m(h, w);
  for (int y = 0; y < h; y++)
    for (int x = 0; x < w; x++) m(y, x) = row(joint, y * w + x);
  return soft_argmax(m);
}

inline Pose3D compose_3d(const Pose2D& px, const Vec& depths_abs, const CameraModel& cam) {
  const int P = px.joints();
  if (depths_abs.size() != P) throw ShapeMismatch("depth count does not match 2D pose");
  Pose3D out{Mat(P, 3), Frame::Camera};
  for (int j = 0; j < P; j++) {
    double z = depths_abs(j);
    if (!(z > 0.0)) throw NonPositiveDepth("depth " + std::to_string(z) + " at joint " +
                                           std::to_string(j));
    out.coords(j, 0) = (px.coords(j, 0) - cam.cx) * z / cam.fx;
    out.coords(j, 1) = (px.coords(j, 1) - cam.cy) * z / cam.fy;
    out.coords(j, 2) = z;
  }
  return out;
}

inline Vec root_relative_depths(const Pose3D& cam_pose, int root) {
  return cam_pose.coords.col(2).array() - cam_pose.coords(root, 2);
}

// Encode a labeled sample: heatmaps from ground-truth 2D mapped to heatmap
// scale, depth maps from root-relative label depths, descriptor straight from
// the labeled camera-frame pose.
inline DiscriminatorInput encode_ground_truth(const SyntheticSample& sample,
                                              const SkeletonTopology& topo, int hm_h = 16,
                                              int hm_w = 16) {
  if (!sample.pose3d) throw MissingLabels("sample " + std::to_string(sample.id) +
                                          " from domain " + sample.domain);
  double sx = double(hm_w) / sample.image.cols();
  double sy = double(hm_h) / sample.image.rows();
  Pose2D hm_coords{Mat(sample.pose2d.joints(), 2)};
  hm_coords.coords.col(0) = sample.pose2d.coords.col(0) * sx;
  hm_coords.coords.col(1) = sample.pose2d.coords.col(1) * sy;

  DiscriminatorInput out;
  out.heatmaps = render_heatmaps(hm_coords, hm_h, hm_w);
  out.depth_maps = render_depth_maps(out.heatmaps, root_relative_depths(*sample.pose3d, topo.root));
  out.descriptor = geometric_descriptor(*sample.pose3d);
  return out;
}

// Encode a prediction: per-joint soft-argmax mapped back to image scale, 3D by
// back-projecting at the nominal root depth, descriptor from that pose.  Every
// step has a tape twin, so the same pathway is differentiable during training.
inline DiscriminatorInput encode_prediction(const HeatmapStack& hm, const Vec& depths_rel,
                                            const CameraModel& cam, int img_h, int img_w) {
  const int P = hm.joints();
  if (depths_rel.size() != P) throw ShapeMismatch("depth count does not match heatmaps");
  Pose2D px{Mat(P, 2)};
  for (int j = 0; j < P; j++) {
    auto [x, y] = soft_argmax_row(hm.maps, hm.h, hm.w, j);
    px.coords(j, 0) = x * img_w / hm.w;
    px.coords(j, 1) = y * img_h / hm.h;
  }
  Vec depths_abs = depths_rel.array() + kNominalRootDepth;

  DiscriminatorInput out;
  out.heatmaps = hm;
  out.depth_maps = render_depth_maps(hm, depths_rel);
  out.descriptor = geometric_descriptor(compose_3d(px, depths_abs, cam));
  return out;
}

}  // namespace advpose
