// The two adversaries.  The generator lifts a rendered image to 16 joint
// heatmaps plus root-relative depths (dense stand-in for a convolutional
// 2D-pose front end).  The discriminator scores anthropometric plausibility
// from up to three sources: the raw image, heatmaps + depth maps, and the
// pairwise geometric descriptor.  Both come in plain inference form and as
// tape builders for training.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "advpose/diffnet.hpp"
#include "advpose/encode.hpp"

namespace advpose {

// The depth head's raw output is in units of this many millimeters; keeps the
// net's outputs and weights O(1) while losses stay in raw mm.
inline constexpr double kDepthScale = 500.0;

enum class GenMode { EndToEnd, Fix2D, Oracle2D };

inline std::string gen_mode_name(GenMode m) {
  switch (m) {
    case GenMode::EndToEnd: return "end-to-end";
    case GenMode::Fix2D: return "fix-2d";
    default: return "oracle-2d";
  }
}

struct ModelConfig {
  int p = 16;
  int img_h = 32, img_w = 32;
  int hm_h = 16, hm_w = 16;
  std::vector<int> two_d_hidden = {1024, 1024};
  std::vector<int> depth_hidden = {512, 256};
  int embed_width = 128;
  std::vector<int> head_hidden = {128, 64};
  uint64_t seed = 1;
};

struct GeneratorModel {
  GenMode mode = GenMode::EndToEnd;
  int p = 0, img_h = 0, img_w = 0, hm_h = 0, hm_w = 0;
  int tap_width = 0;
  DenseNet two_d;   // image -> P*hm_h*hm_w heatmap values in (0,1)
  DenseNet depth;   // [heatmaps (+) penultimate 2D features] -> P depth units

  std::vector<Tensor*> params() {
    auto out = two_d.params();
    for (auto* t : depth.params()) out.push_back(t);
    return out;
  }
  // Everything the optimizer may move; in fix-2d the 2D module is frozen.
  std::vector<Tensor*> trainable_params() {
    return mode == GenMode::EndToEnd ? params() : depth.params();
  }
};

struct DiscriminatorModel {
  bool use_image = true, use_maps = true, use_geo = true;
  std::optional<DenseNet> image_embed, map_embed, geo_embed;
  DenseNet head;  // concatenated embeddings -> score in (0,1)

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (auto* net : {&image_embed, &map_embed, &geo_embed})
      if (net->has_value())
        for (auto* t : (*net)->params()) out.push_back(t);
    for (auto* t : head.params()) out.push_back(t);
    return out;
  }
};

namespace detail {

inline DenseNet make_net(const std::string& prefix, int in, const std::vector<int>& hidden,
                         int out, Act out_act, uint64_t seed) {
  DenseNetSpec spec;
  spec.widths.push_back(in);
  for (int h : hidden) {
    spec.widths.push_back(h);
    spec.acts.push_back(Act::Relu);
  }
  spec.widths.push_back(out);
  spec.acts.push_back(out_act);
  spec.seed = seed;
  return DenseNet(spec, prefix);
}

}  // namespace detail

inline GeneratorModel build_generator(const ModelConfig& c, GenMode mode) {
  GeneratorModel g;
  g.mode = mode;
  g.p = c.p;
  g.img_h = c.img_h;
  g.img_w = c.img_w;
  g.hm_h = c.hm_h;
  g.hm_w = c.hm_w;
  if (c.two_d_hidden.empty() || c.depth_hidden.empty())
    throw ConfigError("generator needs at least one hidden layer per net");
  g.tap_width = c.two_d_hidden.back();
  int img = c.img_h * c.img_w;
  int phw = c.p * c.hm_h * c.hm_w;
  g.two_d = detail::make_net("g2d", img, c.two_d_hidden, phw, Act::Sigmoid,
                             mix_seed(c.seed, "g2d", 0));
  g.depth = detail::make_net("gdep", phw + g.tap_width, c.depth_hidden, c.p, Act::Identity,
                             mix_seed(c.seed, "gdep", 0));
  return g;
}

inline DiscriminatorModel build_discriminator(const ModelConfig& c, bool use_image,
                                              bool use_maps, bool use_geo) {
  if (!use_image && !use_maps && !use_geo)
    throw ConfigError("discriminator needs a non-empty source set");
  DiscriminatorModel d;
  d.use_image = use_image;
  d.use_maps = use_maps;
  d.use_geo = use_geo;
  int phw = c.p * c.hm_h * c.hm_w;
  int sources = 0;
  if (use_image) {
    d.image_embed = detail::make_net("dimg", c.img_h * c.img_w, {}, c.embed_width, Act::Relu,
                                     mix_seed(c.seed, "dimg", 0));
    sources++;
  }
  if (use_maps) {
    d.map_embed = detail::make_net("dmap", 2 * phw, {}, c.embed_width, Act::Relu,
                                   mix_seed(c.seed, "dmap", 0));
    sources++;
  }
  if (use_geo) {
    d.geo_embed = detail::make_net("dgeo", 6 * c.p * c.p, {}, c.embed_width, Act::Relu,
                                   mix_seed(c.seed, "dgeo", 0));
    sources++;
  }
  d.head = detail::make_net("dhead", sources * c.embed_width, c.head_hidden, 1, Act::Sigmoid,
                            mix_seed(c.seed, "dhead", 0));
  return d;
}

// ------ generator forward ------

struct GeneratorOutput {
  HeatmapStack heatmaps;
  Vec depths;  // root-relative mm
};

// Plain inference.  In oracle-2d mode the heatmaps are rendered from the
// provided ground-truth 2D pose (heatmap frame); features still come from the
// image so the depth head sees its usual inputs.
inline GeneratorOutput g_forward(const GeneratorModel& g, const Mat& image,
                                 const Pose2D* gt2d_hm = nullptr) {
  Mat row = image.rows() == 1 ? image : flatten_image(image);
  if (row.cols() != g.img_h * g.img_w)
    throw ShapeMismatch("image size " + std::to_string(row.cols()) + ", expected " +
                        std::to_string(g.img_h * g.img_w));
  Mat tap;
  Mat maps = g.two_d.infer(row, &tap);
  if (g.mode == GenMode::Oracle2D) {
    if (!gt2d_hm) throw MissingLabels("oracle-2d inference needs ground-truth 2D");
    maps = flatten_maps(render_heatmaps(*gt2d_hm, g.hm_h, g.hm_w).maps);
  }
  Mat din(1, maps.cols() + tap.cols());
  din << maps, tap;
  Mat dh = g.depth.infer(din);

  GeneratorOutput out;
  out.heatmaps.h = g.hm_h;
  out.heatmaps.w = g.hm_w;
  out.heatmaps.maps = Mat(g.p, g.hm_h * g.hm_w);
  for (int j = 0; j < g.p; j++)
    out.heatmaps.maps.row(j) = maps.block(0, j * g.hm_h * g.hm_w, 1, g.hm_h * g.hm_w);
  out.depths = kDepthScale * dh.row(0).transpose();
  return out;
}

struct GenTapeOut {
  int maps = -1;       // B x P*hm_h*hm_w
  int depths_mm = -1;  // B x P, root-relative mm
};

// Tape forward over a batch of flattened images (B x img pixels).  fix-2d and
// oracle-2d enter the heatmaps as leaves, so no gradient can reach the 2D
// module; oracle_maps (B x P*hm_h*hm_w) is required in oracle-2d mode.
inline GenTapeOut g_forward_tape(GeneratorModel& g, Tape& tape, const Mat& images,
                                 const Mat* oracle_maps = nullptr) {
  if (images.cols() != g.img_h * g.img_w) throw ShapeMismatch("batch image width");
  GenTapeOut out;
  int tap = -1;
  if (g.mode == GenMode::EndToEnd) {
    int img = tape.leaf(images);
    out.maps = g.two_d.forward(tape, img, &tap);
  } else {
    Mat tap_v;
    Mat maps_v = g.two_d.infer(images, &tap_v);
    if (g.mode == GenMode::Oracle2D) {
      if (!oracle_maps) throw MissingLabels("oracle-2d training needs rendered GT heatmaps");
      maps_v = *oracle_maps;
    }
    out.maps = tape.leaf(maps_v);
    tap = tape.leaf(tap_v);
  }
  int din = tape.concat_cols({out.maps, tap});
  int dh = g.depth.forward(tape, din);
  out.depths_mm = tape.scale(dh, kDepthScale);
  return out;
}

// ------ prediction encoding on the tape ------

struct EncodeTapeOut {
  int dmaps = -1;     // B x P*hm_h*hm_w, raw mm
  int desc_raw = -1;  // B x 6*P*P, raw mm / mm^2
};

// Tape twin of encode_prediction: soft-argmax -> image frame -> back-project
// at the nominal root depth -> pairwise descriptor; depth maps as the
// heatmap-times-depth product.  cams holds one (fx, fy, cx, cy) row per sample.
inline EncodeTapeOut encode_prediction_tape(Tape& tape, int maps, int depths_mm,
                                            const Mat& cams, int p, int hm_h, int hm_w,
                                            int img_h, int img_w) {
  EncodeTapeOut out;
  int hm_xy = tape.soft_argmax(maps, p, hm_h, hm_w);
  int px = tape.scale_interleaved(hm_xy, double(img_w) / hm_w, double(img_h) / hm_h);
  int z_abs = tape.add_scalar(depths_mm, kNominalRootDepth);
  int c3d = tape.compose3d(px, z_abs, cams);
  out.desc_raw = tape.pairwise_descriptor(c3d, 1.0, 1.0);
  out.dmaps = tape.scale_maps_by_depths(maps, depths_mm, p, hm_h * hm_w);
  return out;
}

// ------ discriminator forward ------

// Scales raw inputs at the boundary so every branch sees O(1) values: depth
// maps and descriptor offsets by 1/500, squared offsets by 1/500^2.
inline int d_forward_tape(DiscriminatorModel& d, Tape& tape, int image, int maps, int dmaps,
                          int desc_raw) {
  std::vector<int> embeds;
  if (d.use_image) embeds.push_back(d.image_embed->forward(tape, image));
  if (d.use_maps) {
    int dm_scaled = tape.scale(dmaps, kDescOffsetScale);
    int min = tape.concat_cols({maps, dm_scaled});
    embeds.push_back(d.map_embed->forward(tape, min));
  }
  if (d.use_geo) {
    int cols = static_cast<int>(tape.val(desc_raw).cols());
    int half = cols / 2;
    int off = tape.scale(tape.slice_cols(desc_raw, 0, half), kDescOffsetScale);
    int sq = tape.scale(tape.slice_cols(desc_raw, half, half), kDescSquareScale);
    int geo = tape.concat_cols({off, sq});
    embeds.push_back(d.geo_embed->forward(tape, geo));
  }
  int cat = embeds.size() == 1 ? embeds[0] : tape.concat_cols(embeds);
  return d.head.forward(tape, cat);
}

inline double d_forward(const DiscriminatorModel& d, const Mat& image,
                        const DiscriminatorInput& in) {
  Mat cat(1, 0);
  auto append = [&](const Mat& row) {
    Mat next(1, cat.cols() + row.cols());
    next << cat, row;
    cat = next;
  };
  if (d.use_image) append(d.image_embed->infer(image.rows() == 1 ? image : flatten_image(image)));
  if (d.use_maps) {
    Mat hm = flatten_maps(in.heatmaps.maps);
    Mat dm = kDescOffsetScale * flatten_maps(in.depth_maps.maps);
    Mat row(1, hm.cols() + dm.cols());
    row << hm, dm;
    append(d.map_embed->infer(row));
  }
  if (d.use_geo) {
    Mat raw = flatten_descriptor(in.descriptor);
    long half = raw.cols() / 2;
    raw.leftCols(half) *= kDescOffsetScale;
    raw.rightCols(half) *= kDescSquareScale;
    append(d.geo_embed->infer(raw));
  }
  return d.head.infer(cat)(0, 0);
}

// ------ variants ------

struct Variant {
  std::string name;
  bool discriminator = false;
  bool use_image = false, use_maps = false, use_geo = false;
  GenMode mode = GenMode::EndToEnd;
  bool pretrain = true;
};

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {"Baseline", "Map",        "Geo",
                                                 "Full",     "Full-fix2D", "Full-no-pretrain"};
  return names;
}

inline Variant variant_spec(const std::string& name) {
  Variant v;
  v.name = name;
  if (name == "Baseline") {
    v.discriminator = false;
  } else if (name == "Map") {
    v.discriminator = true;
    v.use_image = v.use_maps = true;
  } else if (name == "Geo") {
    v.discriminator = true;
    v.use_image = v.use_geo = true;
  } else if (name == "Full" || name == "Full-fix2D" || name == "Full-no-pretrain") {
    v.discriminator = true;
    v.use_image = v.use_maps = v.use_geo = true;
    if (name == "Full-fix2D") v.mode = GenMode::Fix2D;
    if (name == "Full-no-pretrain") v.pretrain = false;
  } else {
    throw UnknownVariant("unknown variant: " + name);
  }
  return v;
}

struct ModelSet {
  Variant variant;
  GeneratorModel g;
  std::optional<DiscriminatorModel> d;
};

inline ModelSet make_variant(const ModelConfig& cfg, const std::string& name) {
  ModelSet set;
  set.variant = variant_spec(name);
  set.g = build_generator(cfg, set.variant.mode);
  if (set.variant.discriminator)
    set.d = build_discriminator(cfg, set.variant.use_image, set.variant.use_maps,
                                set.variant.use_geo);
  return set;
}

// ------ persistence ------

inline void save_model_config(Checkpoint& ck, const ModelConfig& c) {
  ck.put_scalar("cfg/p", c.p);
  ck.put_scalar("cfg/img_h", c.img_h);
  ck.put_scalar("cfg/img_w", c.img_w);
  ck.put_scalar("cfg/hm_h", c.hm_h);
  ck.put_scalar("cfg/hm_w", c.hm_w);
  ck.put_scalar("cfg/embed_width", c.embed_width);
  auto put_widths = [&](const std::string& name, const std::vector<int>& w) {
    Mat m(1, w.size());
    for (size_t i = 0; i < w.size(); i++) m(0, i) = w[i];
    ck.put(name, m, 1);
  };
  put_widths("cfg/two_d_hidden", c.two_d_hidden);
  put_widths("cfg/depth_hidden", c.depth_hidden);
  put_widths("cfg/head_hidden", c.head_hidden);
}

inline ModelConfig load_model_config(const Checkpoint& ck) {
  ModelConfig c;
  c.p = static_cast<int>(ck.get_scalar("cfg/p"));
  c.img_h = static_cast<int>(ck.get_scalar("cfg/img_h"));
  c.img_w = static_cast<int>(ck.get_scalar("cfg/img_w"));
  c.hm_h = static_cast<int>(ck.get_scalar("cfg/hm_h"));
  c.hm_w = static_cast<int>(ck.get_scalar("cfg/hm_w"));
  c.embed_width = static_cast<int>(ck.get_scalar("cfg/embed_width"));
  auto get_widths = [&](const std::string& name, std::vector<int>& w) {
    const Checkpoint::Record* r = ck.find(name);
    if (!r) throw IoError("checkpoint record missing: " + name);
    w.clear();
    for (double v : r->data) w.push_back(static_cast<int>(v));
  };
  get_widths("cfg/two_d_hidden", c.two_d_hidden);
  get_widths("cfg/depth_hidden", c.depth_hidden);
  get_widths("cfg/head_hidden", c.head_hidden);
  return c;
}

inline void save_model_set(Checkpoint& ck, const ModelConfig& cfg, ModelSet& set) {
  save_model_config(ck, cfg);
  ck.put_scalar("meta/mode", static_cast<double>(set.variant.mode == GenMode::Fix2D   ? 1
                                                 : set.variant.mode == GenMode::Oracle2D ? 2
                                                                                         : 0));
  ck.put_scalar("meta/has_d", set.d ? 1.0 : 0.0);
  ck.put_scalar("meta/use_image", set.d && set.d->use_image ? 1.0 : 0.0);
  ck.put_scalar("meta/use_maps", set.d && set.d->use_maps ? 1.0 : 0.0);
  ck.put_scalar("meta/use_geo", set.d && set.d->use_geo ? 1.0 : 0.0);
  Mat vn(1, set.variant.name.size());
  for (size_t i = 0; i < set.variant.name.size(); i++)
    vn(0, i) = static_cast<double>(set.variant.name[i]);
  ck.put("meta/variant", vn, 1);
  save_net(ck, set.g.two_d);
  save_net(ck, set.g.depth);
  if (set.d)
    for (auto* t : set.d->params()) ck.put(t->name, t->value, t->rank);
}

inline ModelSet load_model_set(const Checkpoint& ck) {
  ModelConfig cfg = load_model_config(ck);
  const Checkpoint::Record* vn = ck.find("meta/variant");
  if (!vn) throw IoError("checkpoint record missing: meta/variant");
  std::string name;
  for (double v : vn->data) name.push_back(static_cast<char>(v));
  ModelSet set = make_variant(cfg, name);
  int mode = static_cast<int>(ck.get_scalar("meta/mode"));
  set.g.mode = mode == 1 ? GenMode::Fix2D : mode == 2 ? GenMode::Oracle2D : GenMode::EndToEnd;
  set.variant.mode = set.g.mode;
  load_net(ck, set.g.two_d);
  load_net(ck, set.g.depth);
  if (set.d)
    for (auto* t : set.d->params()) ck.get(t->name, t->value);
  return set;
}

// Generator-only and discriminator-only checkpoints.  Training commands save
// the two models separately so evaluation only ever needs the generator file.

inline void save_generator(Checkpoint& ck, const ModelConfig& cfg, const GeneratorModel& g) {
  save_model_config(ck, cfg);
  ck.put_scalar("meta/mode", static_cast<double>(g.mode == GenMode::Fix2D      ? 1
                                                 : g.mode == GenMode::Oracle2D ? 2
                                                                               : 0));
  save_net(ck, g.two_d);
  save_net(ck, g.depth);
}

inline GeneratorModel load_generator(const Checkpoint& ck, ModelConfig* cfg_out = nullptr) {
  ModelConfig cfg = load_model_config(ck);
  int mode = static_cast<int>(ck.get_scalar("meta/mode"));
  GeneratorModel g = build_generator(
      cfg, mode == 1 ? GenMode::Fix2D : mode == 2 ? GenMode::Oracle2D : GenMode::EndToEnd);
  load_net(ck, g.two_d);
  load_net(ck, g.depth);
  if (cfg_out) *cfg_out = cfg;
  return g;
}

inline void save_discriminator(Checkpoint& ck, const ModelConfig& cfg, DiscriminatorModel& d) {
  save_model_config(ck, cfg);
  ck.put_scalar("meta/use_image", d.use_image ? 1.0 : 0.0);
  ck.put_scalar("meta/use_maps", d.use_maps ? 1.0 : 0.0);
  ck.put_scalar("meta/use_geo", d.use_geo ? 1.0 : 0.0);
  for (auto* t : d.params()) ck.put(t->name, t->value, t->rank);
}

inline DiscriminatorModel load_discriminator(const Checkpoint& ck) {
  ModelConfig cfg = load_model_config(ck);
  DiscriminatorModel d =
      build_discriminator(cfg, ck.get_scalar("meta/use_image") != 0.0,
                          ck.get_scalar("meta/use_maps") != 0.0,
                          ck.get_scalar("meta/use_geo") != 0.0);
  for (auto* t : d.params()) ck.get(t->name, t->value);
  return d;
}

}  // namespace advpose
