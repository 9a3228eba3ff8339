// Learning procedures: the pose regression loss, two-phase generator
// pretraining, the discriminator/generator adversarial losses, and the
// alternating optimization loop.  Everything is deterministic given a seed:
// each iteration draws its minibatch from a per-iteration stream.
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "advpose/metrics.hpp"
#include "advpose/models.hpp"
#include "advpose/synth.hpp"

namespace advpose {

// ------ configs ------

struct PretrainConfig {
  int iters_2d = 2000;     // phase 1: heatmap term only, 2D module alone
  int iters_joint = 3000;  // phase 2: full pose loss, jointly
  int batch = 12;
  double lr = 1e-3;
  int val_every = 200;  // 0 disables periodic validation
  uint64_t seed = 1;
};

struct AdvConfig {
  double lambda = 1e-4;  // classification-term weight in the generator loss
  int iterations = 5000;
  int batch = 12;
  int ratio = 1;  // D updates per G update
  double lr_g = 2.5e-4;
  double lr_d = 1e-4;
  int val_every = 200;
  uint64_t seed = 1;
};

inline void validate_config(const PretrainConfig& c) {
  if (c.iters_2d < 0 || c.iters_joint < 0 || c.iters_2d + c.iters_joint == 0)
    throw ConfigError("pretrain needs a positive iteration count");
  if (c.batch <= 0) throw ConfigError("batch size must be positive");
  if (!(c.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (c.val_every < 0) throw ConfigError("val_every must be >= 0");
}

inline void validate_config(const AdvConfig& c) {
  if (!(c.lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (c.iterations <= 0) throw ConfigError("iteration count must be positive");
  if (c.batch <= 0) throw ConfigError("batch size must be positive");
  if (c.ratio < 1) throw ConfigError("D:G ratio must be a positive integer");
  if (!(c.lr_g > 0.0) || !(c.lr_d > 0.0)) throw ConfigError("learning rates must be positive");
  if (c.val_every < 0) throw ConfigError("val_every must be >= 0");
}

// ------ history ------

struct TrainRecord {
  long iteration = 0;
  std::optional<double> l_pose, l_d, l_g, d_acc_real, d_acc_fake, val_mpjpe;
};

struct TrainHistory {
  std::vector<TrainRecord> records;

  void append(TrainRecord r) {
    if (!records.empty() && r.iteration <= records.back().iteration)
      throw ConfigError("history iterations must increase");
    for (const auto* v : {&r.l_pose, &r.l_d, &r.l_g})
      if (v->has_value() && !std::isfinite(**v))
        throw NonFiniteValue("non-finite loss at iteration " + std::to_string(r.iteration));
    records.push_back(std::move(r));
  }

  static constexpr const char* kHeader = "iteration,l_pose,l_d,l_g,d_acc_real,d_acc_fake,val_mpjpe";

  void save_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path);
    f << kHeader << "\n";
    auto cell = [&](const std::optional<double>& v) {
      f << ",";
      if (v) f << format_double(*v);
    };
    for (const auto& r : records) {
      f << r.iteration;
      cell(r.l_pose);
      cell(r.l_d);
      cell(r.l_g);
      cell(r.d_acc_real);
      cell(r.d_acc_fake);
      cell(r.val_mpjpe);
      f << "\n";
    }
    if (!f.good()) throw IoError("write failed: " + path);
  }

  static TrainHistory load_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line) || line != kHeader)
      throw IoError("unexpected history header in " + path);
    TrainHistory out;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      // A trailing empty cell is eaten by getline; restore it.
      while (cells.size() < 7) cells.push_back("");
      if (cells.size() != 7) throw IoError("malformed history row: " + line);
      TrainRecord r;
      r.iteration = std::stol(cells[0]);
      auto opt = [](const std::string& s) -> std::optional<double> {
        if (s.empty()) return std::nullopt;
        return std::stod(s);
      };
      r.l_pose = opt(cells[1]);
      r.l_d = opt(cells[2]);
      r.l_g = opt(cells[3]);
      r.d_acc_real = opt(cells[4]);
      r.d_acc_fake = opt(cells[5]);
      r.val_mpjpe = opt(cells[6]);
      out.append(std::move(r));
    }
    return out;
  }
};

// ------ batches ------

// One training minibatch in flattened-row form.  Unlabeled samples carry a
// zero depth row and a zero mask entry, so the depth term never sees them.
struct TrainBatch {
  Mat images;     // B x img_h*img_w
  Mat gt_maps;    // B x P*hm_h*hm_w, rendered ground-truth heatmaps
  Mat gt_depths;  // B x P, root-relative label depths in mm (zeros if unlabeled)
  Vec labeled;    // B, 1 for samples with 3D labels
  Mat cams;       // B x 4: fx, fy, cx, cy in image pixels
  long size() const { return images.rows(); }
};

inline TrainBatch make_train_batch(const GeneratorModel& g, const SkeletonTopology& topo,
                                   const std::vector<const SyntheticSample*>& samples) {
  const long B = static_cast<long>(samples.size());
  if (B == 0) throw ConfigError("empty training batch");
  TrainBatch b;
  b.images = Mat(B, g.img_h * g.img_w);
  b.gt_maps = Mat(B, g.p * g.hm_h * g.hm_w);
  b.gt_depths = Mat::Zero(B, g.p);
  b.labeled = Vec::Zero(B);
  b.cams = Mat(B, 4);
  for (long i = 0; i < B; i++) {
    const SyntheticSample& s = *samples[i];
    if (s.image.rows() != g.img_h || s.image.cols() != g.img_w)
      throw ShapeMismatch("sample image does not match the model's input size");
    b.images.row(i) = flatten_image(s.image);
    Pose2D hm2d{Mat(s.pose2d.joints(), 2)};
    hm2d.coords.col(0) = s.pose2d.coords.col(0) * (double(g.hm_w) / g.img_w);
    hm2d.coords.col(1) = s.pose2d.coords.col(1) * (double(g.hm_h) / g.img_h);
    b.gt_maps.row(i) = flatten_maps(render_heatmaps(hm2d, g.hm_h, g.hm_w).maps);
    if (s.pose3d) {
      b.labeled(i) = 1.0;
      b.gt_depths.row(i) = root_relative_depths(*s.pose3d, topo.root).transpose();
    }
    b.cams.row(i) << s.camera.fx, s.camera.fy, s.camera.cx, s.camera.cy;
  }
  return b;
}

// ------ pose loss ------

// Heatmap term over every sample; depth term over labeled samples only, in
// the depth head's native units (mm / kDepthScale) so the two terms stay
// commensurate.
struct PoseLossNodes {
  GenTapeOut gen;
  int heatmap_term = -1, depth_term = -1, loss = -1;
};

inline PoseLossNodes pose_loss_tape(GeneratorModel& g, Tape& tape, const TrainBatch& b) {
  PoseLossNodes n;
  const Mat* oracle = g.mode == GenMode::Oracle2D ? &b.gt_maps : nullptr;
  n.gen = g_forward_tape(g, tape, b.images, oracle);
  n.heatmap_term = tape.sse(n.gen.maps, tape.leaf(b.gt_maps));
  int dep_sse = tape.sse_rows(n.gen.depths_mm, tape.leaf(b.gt_depths), b.labeled);
  n.depth_term = tape.scale(dep_sse, 1.0 / (kDepthScale * kDepthScale));
  n.loss = tape.add(n.heatmap_term, n.depth_term);
  return n;
}

inline double loss_pose(GeneratorModel& g, const TrainBatch& b) {
  Tape tape;
  return tape.val(pose_loss_tape(g, tape, b).loss)(0, 0);
}

// Plain-path twin, computed sample by sample without the tape; serves as an
// independent oracle for the tape value and exposes the two terms.
struct PoseLossParts {
  double heatmap = 0.0, depth = 0.0, total = 0.0;
};

inline PoseLossParts pose_loss_parts(const GeneratorModel& g, const TrainBatch& b) {
  PoseLossParts out;
  for (long i = 0; i < b.size(); i++) {
    Mat tap;
    Mat maps = g.two_d.infer(b.images.row(i), &tap);
    if (g.mode == GenMode::Oracle2D) maps = b.gt_maps.row(i);
    Mat din(1, maps.cols() + tap.cols());
    din << maps, tap;
    Mat depths_mm = kDepthScale * g.depth.infer(din);
    out.heatmap += (maps - b.gt_maps.row(i)).squaredNorm();
    if (b.labeled(i) > 0.0)
      out.depth += ((depths_mm - b.gt_depths.row(i)) / kDepthScale).squaredNorm();
  }
  out.total = out.heatmap + out.depth;
  return out;
}

// ------ discriminator loss ------

// Mean bce against 1 over reals plus mean bce against 0 over fakes.
inline double loss_d_from_scores(const Vec& real_scores, const Vec& fake_scores) {
  if (real_scores.size() == 0 || fake_scores.size() == 0)
    throw ConfigError("discriminator loss needs both reals and fakes");
  double lr = 0.0, lf = 0.0;
  for (long i = 0; i < real_scores.size(); i++) lr += bce(real_scores(i), 1.0);
  for (long i = 0; i < fake_scores.size(); i++) lf += bce(fake_scores(i), 0.0);
  return lr / static_cast<double>(real_scores.size()) +
         lf / static_cast<double>(fake_scores.size());
}

inline double loss_d_value(const DiscriminatorModel& d,
                           const std::vector<std::pair<Mat, DiscriminatorInput>>& reals,
                           const std::vector<std::pair<Mat, DiscriminatorInput>>& fakes) {
  Vec rs(static_cast<long>(reals.size())), fs(static_cast<long>(fakes.size()));
  for (size_t i = 0; i < reals.size(); i++) rs(i) = d_forward(d, reals[i].first, reals[i].second);
  for (size_t i = 0; i < fakes.size(); i++) fs(i) = d_forward(d, fakes[i].first, fakes[i].second);
  return loss_d_from_scores(rs, fs);
}

// Flattened-row batch of discriminator inputs.
struct DBatch {
  Mat img, maps, dmaps, desc;
  long size() const { return img.rows(); }
};

inline DBatch gt_d_batch(const std::vector<const SyntheticSample*>& samples,
                         const SkeletonTopology& topo, int hm_h, int hm_w) {
  const long B = static_cast<long>(samples.size());
  if (B == 0) throw ConfigError("empty discriminator batch");
  DBatch b;
  for (long i = 0; i < B; i++) {
    const SyntheticSample& s = *samples[i];
    DiscriminatorInput in = encode_ground_truth(s, topo, hm_h, hm_w);
    if (i == 0) {
      b.img = Mat(B, s.image.size());
      b.maps = Mat(B, in.heatmaps.maps.size());
      b.dmaps = Mat(B, in.depth_maps.maps.size());
      b.desc = Mat(B, in.descriptor.d.size());
    }
    b.img.row(i) = flatten_image(s.image);
    b.maps.row(i) = flatten_maps(in.heatmaps.maps);
    b.dmaps.row(i) = flatten_maps(in.depth_maps.maps);
    b.desc.row(i) = flatten_descriptor(in.descriptor);
  }
  return b;
}

namespace detail {

// Ground-truth 2D in heatmap coordinates, for oracle-2d inference.
inline Pose2D to_heatmap_frame(const GeneratorModel& g, const Pose2D& px) {
  Pose2D hm{Mat(px.joints(), 2)};
  hm.coords.col(0) = px.coords.col(0) * (double(g.hm_w) / g.img_w);
  hm.coords.col(1) = px.coords.col(1) * (double(g.hm_h) / g.img_h);
  return hm;
}

}  // namespace detail

// Fake inputs are plain generator predictions: constants as far as a
// discriminator update is concerned.
inline DBatch fake_d_batch(const GeneratorModel& g,
                           const std::vector<const SyntheticSample*>& samples) {
  const long B = static_cast<long>(samples.size());
  if (B == 0) throw ConfigError("empty discriminator batch");
  DBatch b;
  for (long i = 0; i < B; i++) {
    const SyntheticSample& s = *samples[i];
    Pose2D hm2d;
    const Pose2D* oracle = nullptr;
    if (g.mode == GenMode::Oracle2D) {
      hm2d = detail::to_heatmap_frame(g, s.pose2d);
      oracle = &hm2d;
    }
    GeneratorOutput out = g_forward(g, flatten_image(s.image), oracle);
    DiscriminatorInput in = encode_prediction(out.heatmaps, out.depths, s.camera, g.img_h, g.img_w);
    if (i == 0) {
      b.img = Mat(B, s.image.size());
      b.maps = Mat(B, in.heatmaps.maps.size());
      b.dmaps = Mat(B, in.depth_maps.maps.size());
      b.desc = Mat(B, in.descriptor.d.size());
    }
    b.img.row(i) = flatten_image(s.image);
    b.maps.row(i) = flatten_maps(in.heatmaps.maps);
    b.dmaps.row(i) = flatten_maps(in.depth_maps.maps);
    b.desc.row(i) = flatten_descriptor(in.descriptor);
  }
  return b;
}

struct DLossNodes {
  int real_scores = -1, fake_scores = -1, loss = -1;
};

inline DLossNodes d_loss_tape(DiscriminatorModel& d, Tape& tape, const DBatch& reals,
                              const DBatch& fakes) {
  DLossNodes n;
  n.real_scores = d_forward_tape(d, tape, tape.leaf(reals.img), tape.leaf(reals.maps),
                                 tape.leaf(reals.dmaps), tape.leaf(reals.desc));
  n.fake_scores = d_forward_tape(d, tape, tape.leaf(fakes.img), tape.leaf(fakes.maps),
                                 tape.leaf(fakes.dmaps), tape.leaf(fakes.desc));
  int lr = tape.bce_loss(n.real_scores, Vec::Ones(reals.size()), Reduce::Mean);
  int lf = tape.bce_loss(n.fake_scores, Vec::Zero(fakes.size()), Reduce::Mean);
  n.loss = tape.add(lr, lf);
  return n;
}

// Fraction classified correctly at the 0.5 threshold.
inline double score_accuracy(const Mat& scores, bool real_side) {
  double hit = 0.0;
  for (long i = 0; i < scores.rows(); i++)
    hit += (real_side ? scores(i, 0) > 0.5 : scores(i, 0) < 0.5) ? 1.0 : 0.0;
  return hit / static_cast<double>(scores.rows());
}

// ------ generator loss ------

struct GLossNodes {
  PoseLossNodes pose;
  int scores = -1, cls_sum = -1, loss = -1;
};

// lambda * sum over the batch of bce(D(fake), 1) plus the pose loss.
inline GLossNodes g_loss_tape(GeneratorModel& g, DiscriminatorModel& d, Tape& tape,
                              const TrainBatch& b, double lambda) {
  GLossNodes n;
  n.pose = pose_loss_tape(g, tape, b);
  EncodeTapeOut enc = encode_prediction_tape(tape, n.pose.gen.maps, n.pose.gen.depths_mm, b.cams,
                                             g.p, g.hm_h, g.hm_w, g.img_h, g.img_w);
  int img = tape.leaf(b.images);
  n.scores = d_forward_tape(d, tape, img, n.pose.gen.maps, enc.dmaps, enc.desc_raw);
  n.cls_sum = tape.bce_loss(n.scores, Vec::Ones(b.size()), Reduce::Sum);
  n.loss = tape.add(tape.scale(n.cls_sum, lambda), n.pose.loss);
  return n;
}

inline double loss_g_value(GeneratorModel& g, DiscriminatorModel& d, const TrainBatch& b,
                           double lambda) {
  Tape tape;
  return tape.val(g_loss_tape(g, d, tape, b, lambda).loss)(0, 0);
}

// Plain-path oracle for the decomposition: per-sample prediction encodings
// scored one at a time, classification term summed by hand.
struct GLossParts {
  double cls_sum = 0.0, pose = 0.0, total = 0.0;
};

inline GLossParts g_loss_parts(const GeneratorModel& g, const DiscriminatorModel& d,
                               const std::vector<const SyntheticSample*>& samples,
                               const TrainBatch& b, double lambda) {
  GLossParts out;
  for (const SyntheticSample* s : samples) {
    Pose2D hm2d;
    const Pose2D* oracle = nullptr;
    if (g.mode == GenMode::Oracle2D) {
      hm2d = detail::to_heatmap_frame(g, s->pose2d);
      oracle = &hm2d;
    }
    GeneratorOutput pred = g_forward(g, flatten_image(s->image), oracle);
    DiscriminatorInput in =
        encode_prediction(pred.heatmaps, pred.depths, s->camera, g.img_h, g.img_w);
    out.cls_sum += bce(d_forward(d, flatten_image(s->image), in), 1.0);
  }
  PoseLossParts pose = pose_loss_parts(g, b);
  out.pose = pose.total;
  out.total = lambda * out.cls_sum + out.pose;
  return out;
}

// ------ inference to 3D ------

struct PosePrediction {
  Pose2D px;  // image-frame joints from soft-argmax
  Pose3D p3;  // camera-frame metric pose
};

inline PosePrediction predict_sample(const GeneratorModel& g, const SyntheticSample& s) {
  Pose2D hm2d;
  const Pose2D* oracle = nullptr;
  if (g.mode == GenMode::Oracle2D) {
    hm2d = detail::to_heatmap_frame(g, s.pose2d);
    oracle = &hm2d;
  }
  GeneratorOutput out = g_forward(g, flatten_image(s.image), oracle);
  PosePrediction pr;
  pr.px = Pose2D{Mat(g.p, 2)};
  for (int j = 0; j < g.p; j++) {
    auto [x, y] = soft_argmax_row(out.heatmaps.maps, g.hm_h, g.hm_w, j);
    pr.px.coords(j, 0) = x * g.img_w / g.hm_w;
    pr.px.coords(j, 1) = y * g.img_h / g.hm_h;
  }
  Vec depths_abs = out.depths.array() + kNominalRootDepth;
  pr.p3 = compose_3d(pr.px, depths_abs, s.camera);
  return pr;
}

inline Pose3D predict_pose3d(const GeneratorModel& g, const SyntheticSample& s) {
  return predict_sample(g, s).p3;
}

// Protocol-#1 MPJPE of the generator over a labeled dataset.
inline double validation_mpjpe(const GeneratorModel& g, const Dataset& data,
                               const SkeletonTopology& topo) {
  std::vector<Pose3D> preds, gts;
  for (const auto& s : data.samples) {
    if (!s.pose3d) continue;
    preds.push_back(predict_pose3d(g, s));
    gts.push_back(*s.pose3d);
  }
  if (preds.empty()) throw MissingLabels("validation set has no 3D labels");
  return mpjpe(preds, gts, topo.root);
}

// ------ minibatch sampling ------

namespace detail {

inline std::vector<const SyntheticSample*> draw_from(const Dataset& d, long n, Rng& rng) {
  std::vector<const SyntheticSample*> out;
  out.reserve(n);
  for (long i = 0; i < n; i++) out.push_back(&d.samples[rng.uniform_index(d.samples.size())]);
  return out;
}

// Half lab, half wild; all lab when the wild set is empty.
inline std::vector<const SyntheticSample*> draw_mixed(const Dataset& lab, const Dataset& wild,
                                                      long n, Rng& rng) {
  long n_lab = wild.samples.empty() ? n : (n + 1) / 2;
  auto out = draw_from(lab, n_lab, rng);
  if (n > n_lab)
    for (const auto* s : draw_from(wild, n - n_lab, rng)) out.push_back(s);
  return out;
}

inline void check_finite_record(const TrainRecord& r) {
  for (const auto* v : {&r.l_pose, &r.l_d, &r.l_g})
    if (v->has_value() && !std::isfinite(**v))
      throw NonFiniteValue("training diverged at iteration " + std::to_string(r.iteration));
}

}  // namespace detail

// ------ pretraining ------

// Phase 1 fits the 2D module alone on the heatmap term over both domains;
// phase 2 fine-tunes with the full pose loss.  Phase 1 always trains the 2D
// module directly (mode freezes apply to the adversarial stage, not here);
// phase 2 honors the generator mode via its trainable parameter set.
//
// The driver form exists so runs can stop and resume: every iteration reseeds
// from its absolute index, so once the optimizer state and the two counters
// are restored a resumed run replays exactly like an unbroken one.
struct PretrainDriver {
  GeneratorModel* g = nullptr;
  PretrainConfig cfg;
  Adam opt_2d, opt_joint;
  long done_2d = 0, done_joint = 0;

  PretrainDriver(GeneratorModel& gen, const PretrainConfig& c)
      : g(&gen),
        cfg(c),
        opt_2d(gen.two_d.params(), c.lr),
        opt_joint(gen.trainable_params(), c.lr) {
    validate_config(c);
  }

  bool complete() const { return done_2d >= cfg.iters_2d && done_joint >= cfg.iters_joint; }

  // The first history iteration the next call would append; lets callers spot
  // numbering collisions against a previously recorded history.
  long next_iteration() const {
    return done_2d < cfg.iters_2d ? done_2d : cfg.iters_2d + done_joint;
  }

  // Runs at most `budget` iterations across the two phases, appending records
  // to hist; returns the number actually run.
  long run_chunk(long budget, const Dataset& lab, const Dataset& wild, const Dataset* val,
                 const SkeletonTopology& topo, TrainHistory& hist) {
    if (lab.samples.empty()) throw ConfigError("pretraining needs a non-empty labeled set");
    auto want_val = [&](long it, long total) {
      return val && cfg.val_every > 0 && ((it + 1) % cfg.val_every == 0 || it + 1 == total);
    };
    long done = 0;

    while (done < budget && done_2d < cfg.iters_2d) {
      long it = done_2d;
      Rng rng(mix_seed(cfg.seed, "pre2d", static_cast<uint64_t>(it)));
      TrainBatch b = make_train_batch(*g, topo, detail::draw_mixed(lab, wild, cfg.batch, rng));
      Tape tape;
      int img = tape.leaf(b.images);
      int maps = g->two_d.forward(tape, img);
      int loss = tape.sse(maps, tape.leaf(b.gt_maps));
      opt_2d.zero_grads();
      tape.backward(loss);
      opt_2d.step();
      done_2d = it + 1;
      done++;
      TrainRecord r;
      r.iteration = it;
      r.l_pose = tape.val(loss)(0, 0);
      if (want_val(it, cfg.iters_2d)) r.val_mpjpe = validation_mpjpe(*g, *val, topo);
      detail::check_finite_record(r);
      hist.append(std::move(r));
    }

    while (done < budget && done_2d >= cfg.iters_2d && done_joint < cfg.iters_joint) {
      long it = done_joint;
      Rng rng(mix_seed(cfg.seed, "prejoint", static_cast<uint64_t>(it)));
      TrainBatch b = make_train_batch(*g, topo, detail::draw_mixed(lab, wild, cfg.batch, rng));
      Tape tape;
      PoseLossNodes n = pose_loss_tape(*g, tape, b);
      opt_joint.zero_grads();
      tape.backward(n.loss);
      opt_joint.step();
      done_joint = it + 1;
      done++;
      TrainRecord r;
      r.iteration = cfg.iters_2d + it;
      r.l_pose = tape.val(n.loss)(0, 0);
      if (want_val(it, cfg.iters_joint)) r.val_mpjpe = validation_mpjpe(*g, *val, topo);
      detail::check_finite_record(r);
      hist.append(std::move(r));
    }
    return done;
  }

  // Runs every remaining iteration in one go.
  void run(const Dataset& lab, const Dataset& wild, const Dataset* val,
           const SkeletonTopology& topo, TrainHistory& hist) {
    run_chunk(std::numeric_limits<long>::max(), lab, wild, val, topo, hist);
  }
};

inline TrainHistory pretrain_generator(GeneratorModel& g, const Dataset& lab, const Dataset& wild,
                                       const Dataset* val, const SkeletonTopology& topo,
                                       const PretrainConfig& cfg) {
  PretrainDriver drv(g, cfg);
  TrainHistory hist;
  drv.run(lab, wild, val, topo, hist);
  return hist;
}

// ------ adversarial loop ------

struct AdvResult {
  TrainHistory history;
  long d_steps = 0, g_steps = 0;
};

// Each cycle runs `ratio` discriminator updates, then one generator update.
// D minibatches: ceil(B/2) ground-truth encodings from labeled lab samples as
// reals, floor(B/2) generator predictions as fakes, the fakes split evenly
// between lab and wild images (extra one to lab when odd).  The G minibatch
// mixes both domains.
inline AdvResult adversarial_train(GeneratorModel& g, DiscriminatorModel& d, const Dataset& lab,
                                   const Dataset& wild, const Dataset* val,
                                   const SkeletonTopology& topo, const AdvConfig& cfg) {
  validate_config(cfg);
  if (lab.samples.empty()) throw ConfigError("adversarial training needs lab samples");
  for (const auto& s : lab.samples)
    if (!s.pose3d) throw MissingLabels("lab sample " + std::to_string(s.id) + " lacks 3D labels");

  const long n_real = (cfg.batch + 1) / 2;
  const long n_fake = cfg.batch / 2;
  const long n_fake_lab = wild.samples.empty() ? n_fake : (n_fake + 1) / 2;
  const long n_fake_wild = n_fake - n_fake_lab;

  AdvResult res;
  Adam opt_d(d.params(), cfg.lr_d);
  Adam opt_g(g.trainable_params(), cfg.lr_g);

  for (int it = 0; it < cfg.iterations; it++) {
    Rng rng(mix_seed(cfg.seed, "adv", static_cast<uint64_t>(it)));
    double ld = 0.0, acc_r = 0.0, acc_f = 0.0;
    for (int k = 0; k < cfg.ratio; k++) {
      DBatch reals = gt_d_batch(detail::draw_from(lab, n_real, rng), topo, g.hm_h, g.hm_w);
      auto fake_samples = detail::draw_from(lab, n_fake_lab, rng);
      if (n_fake_wild > 0)
        for (const auto* s : detail::draw_from(wild, n_fake_wild, rng)) fake_samples.push_back(s);
      DBatch fakes = fake_d_batch(g, fake_samples);
      Tape tape;
      DLossNodes n = d_loss_tape(d, tape, reals, fakes);
      opt_d.zero_grads();
      tape.backward(n.loss);
      opt_d.step();
      res.d_steps++;
      ld += tape.val(n.loss)(0, 0);
      acc_r += score_accuracy(tape.val(n.real_scores), true);
      acc_f += score_accuracy(tape.val(n.fake_scores), false);
    }

    TrainBatch b = make_train_batch(g, topo, detail::draw_mixed(lab, wild, cfg.batch, rng));
    Tape tape;
    GLossNodes n = g_loss_tape(g, d, tape, b, cfg.lambda);
    opt_g.zero_grads();
    tape.backward(n.loss);
    opt_g.step();
    res.g_steps++;

    TrainRecord r;
    r.iteration = it;
    r.l_pose = tape.val(n.pose.loss)(0, 0);
    r.l_g = tape.val(n.loss)(0, 0);
    r.l_d = ld / cfg.ratio;
    r.d_acc_real = acc_r / cfg.ratio;
    r.d_acc_fake = acc_f / cfg.ratio;
    if (val && cfg.val_every > 0 && ((it + 1) % cfg.val_every == 0 || it + 1 == cfg.iterations))
      r.val_mpjpe = validation_mpjpe(g, *val, topo);
    detail::check_finite_record(r);
    res.history.append(std::move(r));
  }
  return res;
}

// Budget-matched no-discriminator arm for ablations: continues pose-only
// training from the pretrained weights with the adversarial stage's step
// count, generator learning rate, and batch sizes.
inline TrainHistory baseline_train(GeneratorModel& g, const Dataset& lab, const Dataset& wild,
                                   const Dataset* val, const SkeletonTopology& topo,
                                   const AdvConfig& cfg) {
  validate_config(cfg);
  if (lab.samples.empty()) throw ConfigError("training needs lab samples");
  TrainHistory hist;
  Adam opt(g.trainable_params(), cfg.lr_g);
  for (int it = 0; it < cfg.iterations; it++) {
    Rng rng(mix_seed(cfg.seed, "adv", static_cast<uint64_t>(it)));
    TrainBatch b = make_train_batch(g, topo, detail::draw_mixed(lab, wild, cfg.batch, rng));
    Tape tape;
    PoseLossNodes n = pose_loss_tape(g, tape, b);
    opt.zero_grads();
    tape.backward(n.loss);
    opt.step();
    TrainRecord r;
    r.iteration = it;
    r.l_pose = tape.val(n.loss)(0, 0);
    if (val && cfg.val_every > 0 && ((it + 1) % cfg.val_every == 0 || it + 1 == cfg.iterations))
      r.val_mpjpe = validation_mpjpe(g, *val, topo);
    detail::check_finite_record(r);
    hist.append(std::move(r));
  }
  return hist;
}

// ------ discriminator sanity training ------

// Trains a discriminator to separate ground-truth encodings from corrupted
// poses rendered through the same pipeline; no generator involved.  Fresh
// samples are drawn per index from dedicated seed streams, so train and
// held-out data never overlap.
struct DSanityConfig {
  int iterations = 400;
  int batch = 12;
  double lr = 1e-3;
  double magnitude = 0.5;  // corruption magnitude
  uint64_t seed = 1;
};

namespace detail {

struct CorruptPair {
  SyntheticSample real, fake;
};

// A consistent (image, 2D, 3D) triple for a true pose and for its corrupted
// twin viewed by the same camera.
inline CorruptPair make_corrupt_pair(const AnthropometricModel& model,
                                     const SkeletonTopology& topo, const DomainSpec& domain,
                                     CorruptMode mode, double magnitude, uint64_t stream,
                                     long index) {
  Rng rng(mix_seed(stream, static_cast<uint64_t>(index)));
  PoseDraws draws;
  Pose3D world = sample_pose(model, topo, domain.pose_scope, rng, &draws);
  CameraParams params =
      sample_camera_params(domain, world.coords.row(topo.root).transpose(), rng);
  CameraModel cam = build_camera(params);
  Pose3D broken = corrupt_pose(world, topo, model, mode, magnitude, rng,
                               root_frame(draws.angles, topo.root));

  CorruptPair out;
  auto fill = [&](SyntheticSample& s, const Pose3D& pose) {
    auto [cam3d, px] = project(pose, cam);
    s.domain = domain.name;
    s.pose3d = cam3d;
    s.pose2d = px;
    s.image = render_stick_figure(px, topo, domain.img_h, domain.img_w);
    s.camera = cam;
    s.cam_params = params;
  };
  fill(out.real, world);
  fill(out.fake, broken);
  return out;
}

}  // namespace detail

// Returns the per-mode held-out accuracy (reals and corrupted negatives
// weighted equally), after training against a mix of all requested modes.
inline std::map<std::string, double> train_d_on_corrupt(
    DiscriminatorModel& d, const AnthropometricModel& model, const SkeletonTopology& topo,
    const DomainSpec& domain, const std::vector<CorruptMode>& modes, const DSanityConfig& cfg,
    int hm_h, int hm_w, long held_out = 60) {
  if (modes.empty()) throw ConfigError("need at least one corruption mode");
  if (cfg.iterations <= 0 || cfg.batch <= 0 || !(cfg.lr > 0.0))
    throw ConfigError("bad discriminator sanity config");

  Adam opt(d.params(), cfg.lr);
  const long half = std::max<long>(1, cfg.batch / 2);
  uint64_t train_stream = mix_seed(cfg.seed, "dsan-train");
  long next_index = 0;
  for (int it = 0; it < cfg.iterations; it++) {
    std::vector<SyntheticSample> reals, fakes;
    for (long i = 0; i < half; i++) {
      CorruptMode mode = modes[static_cast<size_t>(next_index) % modes.size()];
      auto pair = detail::make_corrupt_pair(model, topo, domain, mode, cfg.magnitude,
                                            train_stream, next_index++);
      reals.push_back(std::move(pair.real));
      fakes.push_back(std::move(pair.fake));
    }
    std::vector<const SyntheticSample*> rp, fp;
    for (const auto& s : reals) rp.push_back(&s);
    for (const auto& s : fakes) fp.push_back(&s);
    DBatch rb = gt_d_batch(rp, topo, hm_h, hm_w);
    DBatch fb = gt_d_batch(fp, topo, hm_h, hm_w);
    Tape tape;
    DLossNodes n = d_loss_tape(d, tape, rb, fb);
    opt.zero_grads();
    tape.backward(n.loss);
    opt.step();
    if (!std::isfinite(tape.val(n.loss)(0, 0)))
      throw NonFiniteValue("discriminator sanity training diverged at iteration " +
                           std::to_string(it));
  }

  std::map<std::string, double> acc;
  for (CorruptMode mode : modes) {
    uint64_t eval_stream = mix_seed(cfg.seed, "dsan-eval-" + corrupt_mode_name(mode));
    double hit = 0.0;
    for (long i = 0; i < held_out; i++) {
      auto pair = detail::make_corrupt_pair(model, topo, domain, mode, cfg.magnitude,
                                            eval_stream, i);
      DiscriminatorInput rin = encode_ground_truth(pair.real, topo, hm_h, hm_w);
      DiscriminatorInput fin = encode_ground_truth(pair.fake, topo, hm_h, hm_w);
      hit += d_forward(d, flatten_image(pair.real.image), rin) > 0.5 ? 1.0 : 0.0;
      hit += d_forward(d, flatten_image(pair.fake.image), fin) < 0.5 ? 1.0 : 0.0;
    }
    acc[corrupt_mode_name(mode)] = hit / static_cast<double>(2 * held_out);
  }
  return acc;
}

}  // namespace advpose
