// Evaluation protocols: MPJPE with root-depth alignment (protocol 1), MPJPE
// after similarity alignment (protocol 2), PCKh@0.5 in 2D, 3D PCK/AUC, and
// per-limb-group error breakdown.
#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "advpose/core.hpp"
#include "advpose/skeleton.hpp"

namespace advpose {

// Mean with a canonical accumulation order so that permuting the input leaves
// the result bitwise unchanged.
inline double stable_mean(std::vector<double> vals) {
  if (vals.empty()) throw CountMismatch("mean of empty set");
  std::sort(vals.begin(), vals.end());
  double sum = 0.0;
  for (double v : vals) sum += v;
  return sum / static_cast<double>(vals.size());
}

// Translate pred along z so its root depth matches gt's; x and y untouched.
inline Pose3D root_depth_align(const Pose3D& pred, const Pose3D& gt, int root) {
  if (pred.joints() != gt.joints()) throw ShapeMismatch("root_depth_align: joint count mismatch");
  Pose3D out = pred;
  double dz = gt.coords(root, 2) - pred.coords(root, 2);
  out.coords.col(2).array() += dz;
  out.coords(root, 2) = gt.coords(root, 2);  // exact, immune to rounding in +dz
  return out;
}

// Mean per-joint position error after per-sample root-depth alignment.
inline double mpjpe(const std::vector<Pose3D>& preds, const std::vector<Pose3D>& gts,
                    int root = 0) {
  if (preds.size() != gts.size() || preds.empty())
    throw CountMismatch("mpjpe: need equal, nonzero sample counts");
  std::vector<double> errors;
  for (size_t n = 0; n < preds.size(); n++) {
    Pose3D a = root_depth_align(preds[n], gts[n], root);
    if (a.joints() != gts[n].joints()) throw ShapeMismatch("mpjpe: joint count mismatch");
    for (int j = 0; j < a.joints(); j++)
      errors.push_back((a.coords.row(j) - gts[n].coords.row(j)).norm());
  }
  return stable_mean(std::move(errors));
}

// Least-squares similarity alignment of pred onto gt: returns s*R*pred + t
// with R a proper rotation; s = 1 when with_scale is false.  Cross-covariance
// factorization with determinant correction (reflections excluded).
inline Pose3D procrustes_align(const Pose3D& pred, const Pose3D& gt, bool with_scale = true) {
  const int P = pred.joints();
  if (gt.joints() != P) throw ShapeMismatch("procrustes_align: joint count mismatch");
  if (P < 3) throw DegenerateConfiguration("procrustes_align needs at least 3 joints");

  Eigen::RowVector3d mu_p = pred.coords.colwise().mean();
  Eigen::RowVector3d mu_g = gt.coords.colwise().mean();
  Mat p0 = pred.coords.rowwise() - mu_p;
  Mat g0 = gt.coords.rowwise() - mu_g;

  Eigen::JacobiSVD<Mat> gt_svd(g0);
  double lead = gt_svd.singularValues()(0);
  if (lead <= 0.0 || gt_svd.singularValues()(1) <= 1e-9 * lead)
    throw DegenerateConfiguration("procrustes_align: ground-truth joints are collinear");

  double var_p = p0.squaredNorm() / P;
  if (var_p <= 0.0)
    throw DegenerateConfiguration("procrustes_align: prediction joints are coincident");

  Mat3 cov = (g0.transpose() * p0) / P;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 fix = Vec3::Ones();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) fix(2) = -1.0;
  Mat3 rot = svd.matrixU() * fix.asDiagonal() * svd.matrixV().transpose();
  double s = with_scale ? svd.singularValues().dot(fix) / var_p : 1.0;
  Vec3 t = mu_g.transpose() - s * rot * mu_p.transpose();

  Pose3D out = pred;
  Mat aligned = (s * (rot * pred.coords.transpose())).colwise() + t;
  out.coords = aligned.transpose();
  return out;
}

// Mean per-joint error after per-sample similarity alignment.
inline double mpjpe_p2(const std::vector<Pose3D>& preds, const std::vector<Pose3D>& gts,
                       bool with_scale = true) {
  if (preds.size() != gts.size() || preds.empty())
    throw CountMismatch("mpjpe_p2: need equal, nonzero sample counts");
  std::vector<double> errors;
  for (size_t n = 0; n < preds.size(); n++) {
    Pose3D a = procrustes_align(preds[n], gts[n], with_scale);
    for (int j = 0; j < a.joints(); j++)
      errors.push_back((a.coords.row(j) - gts[n].coords.row(j)).norm());
  }
  return stable_mean(std::move(errors));
}

// Percent of joints whose 2D error is below half the ground-truth head-segment
// length of the same sample.
inline double pckh_2d(const std::vector<Pose2D>& preds, const std::vector<Pose2D>& gts,
                      const SkeletonTopology& topology) {
  if (preds.size() != gts.size() || preds.empty())
    throw CountMismatch("pckh_2d: need equal, nonzero sample counts");
  auto [ha, hb] = topology.head_segment;
  long correct = 0, total = 0;
  for (size_t n = 0; n < preds.size(); n++) {
    if (preds[n].joints() != gts[n].joints()) throw ShapeMismatch("pckh_2d joint count mismatch");
    double head = (gts[n].coords.row(ha) - gts[n].coords.row(hb)).norm();
    if (head == 0.0) throw ZeroHeadSegment("sample " + std::to_string(n));
    double thresh = 0.5 * head;
    for (int j = 0; j < preds[n].joints(); j++) {
      if ((preds[n].coords.row(j) - gts[n].coords.row(j)).norm() < thresh) correct++;
      total++;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

// 3D PCK at 150 mm plus AUC over thresholds 5,10,...,150 mm, computed after
// per-sample root-depth alignment.
inline std::pair<double, double> pck3d_auc(const std::vector<Pose3D>& preds,
                                           const std::vector<Pose3D>& gts, int root = 0) {
  if (preds.size() != gts.size() || preds.empty())
    throw CountMismatch("pck3d_auc: need equal, nonzero sample counts");
  std::vector<double> errors;
  for (size_t n = 0; n < preds.size(); n++) {
    Pose3D a = root_depth_align(preds[n], gts[n], root);
    for (int j = 0; j < a.joints(); j++)
      errors.push_back((a.coords.row(j) - gts[n].coords.row(j)).norm());
  }
  auto pct_below = [&](double thresh) {
    long c = 0;
    for (double e : errors)
      if (e < thresh) c++;
    return 100.0 * static_cast<double>(c) / static_cast<double>(errors.size());
  };
  double pck = pct_below(150.0);
  double auc = 0.0;
  int count = 0;
  for (int t = 5; t <= 150; t += 5) {
    auc += pct_below(static_cast<double>(t));
    count++;
  }
  return {pck, auc / count};
}

// Protocol-1 MPJPE restricted to each limb group's joints.
inline std::map<std::string, double> per_group_error(const std::vector<Pose3D>& preds,
                                                     const std::vector<Pose3D>& gts,
                                                     const SkeletonTopology& topology) {
  if (preds.size() != gts.size() || preds.empty())
    throw CountMismatch("per_group_error: need equal, nonzero sample counts");
  std::map<std::string, std::vector<double>> errors;
  for (size_t n = 0; n < preds.size(); n++) {
    Pose3D a = root_depth_align(preds[n], gts[n], topology.root);
    for (const auto& [name, joints] : topology.limb_groups)
      for (int j : joints)
        errors[name].push_back((a.coords.row(j) - gts[n].coords.row(j)).norm());
  }
  std::map<std::string, double> out;
  for (auto& [name, errs] : errors) out[name] = stable_mean(std::move(errs));
  return out;
}

// ------ report ------

struct MetricsReport {
  std::string variant;
  uint64_t seed = 0;
  long samples = 0;
  double mpjpe_p1 = 0.0;
  double mpjpe_p2 = 0.0;
  double pckh05 = 0.0;
  double pck3d = 0.0;
  double auc3d = 0.0;
  std::map<std::string, double> per_group;

  bool valid() const {
    auto pct = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 100.0; };
    bool ok = std::isfinite(mpjpe_p1) && std::isfinite(mpjpe_p2) && pct(pckh05) && pct(pck3d) &&
              pct(auc3d) && samples >= 0;
    for (const auto& [name, v] : per_group) ok = ok && std::isfinite(v);
    return ok;
  }

  static std::string csv_header() {
    return "variant,seed,samples,mpjpe_p1,mpjpe_p2,pckh05,pck3d,auc3d,"
           "err_u_arms,err_l_arms,err_u_legs,err_l_legs";
  }

  std::string csv_row() const {
    auto group = [&](const char* name) -> std::string {
      auto it = per_group.find(name);
      return it == per_group.end() ? std::string() : format_double(it->second);
    };
    std::string row = variant + "," + std::to_string(seed) + "," + std::to_string(samples) + "," +
                      format_double(mpjpe_p1) + "," + format_double(mpjpe_p2) + "," +
                      format_double(pckh05) + "," + format_double(pck3d) + "," +
                      format_double(auc3d);
    for (const char* g : {"U.Arms", "L.Arms", "U.Legs", "L.Legs"}) row += "," + group(g);
    return row;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "ADVPOSE-METRICS v1\n";
    os << "variant " << variant << "\n";
    os << "seed " << seed << "\n";
    os << "samples " << samples << "\n";
    os << "mpjpe_p1 " << format_double(mpjpe_p1) << "\n";
    os << "mpjpe_p2 " << format_double(mpjpe_p2) << "\n";
    os << "pckh05 " << format_double(pckh05) << "\n";
    os << "pck3d " << format_double(pck3d) << "\n";
    os << "auc3d " << format_double(auc3d) << "\n";
    for (const auto& [name, v] : per_group) os << "group " << name << " " << format_double(v) << "\n";
    return os.str();
  }

  static MetricsReport from_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "ADVPOSE-METRICS v1")
      throw BadMagic("not a metrics report");
    MetricsReport r;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string kw;
      ls >> kw;
      if (kw == "variant") ls >> r.variant;
      else if (kw == "seed") ls >> r.seed;
      else if (kw == "samples") ls >> r.samples;
      else if (kw == "mpjpe_p1") ls >> r.mpjpe_p1;
      else if (kw == "mpjpe_p2") ls >> r.mpjpe_p2;
      else if (kw == "pckh05") ls >> r.pckh05;
      else if (kw == "pck3d") ls >> r.pck3d;
      else if (kw == "auc3d") ls >> r.auc3d;
      else if (kw == "group") {
        std::string name;
        double v;
        ls >> name >> v;
        r.per_group[name] = v;
      } else {
        throw IoError("unknown metrics keyword: " + kw);
      }
      if (ls.fail()) throw IoError("malformed metrics line: " + line);
    }
    return r;
  }
};

// Convenience wrapper used by the evaluation commands.
inline MetricsReport compute_metrics(const std::vector<Pose3D>& preds3d,
                                     const std::vector<Pose3D>& gts3d,
                                     const std::vector<Pose2D>& preds2d,
                                     const std::vector<Pose2D>& gts2d,
                                     const SkeletonTopology& topology,
                                     const std::string& variant = "", uint64_t seed = 0) {
  MetricsReport r;
  r.variant = variant;
  r.seed = seed;
  r.samples = static_cast<long>(gts3d.size());
  r.mpjpe_p1 = mpjpe(preds3d, gts3d, topology.root);
  r.mpjpe_p2 = mpjpe_p2(preds3d, gts3d);
  r.pckh05 = pckh_2d(preds2d, gts2d, topology);
  auto [pck, auc] = pck3d_auc(preds3d, gts3d, topology.root);
  r.pck3d = pck;
  r.auc3d = auc;
  r.per_group = per_group_error(preds3d, gts3d, topology);
  return r;
}

}  // namespace advpose
