#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "advpose/models.hpp"

using namespace advpose;

namespace {

// Small enough that exhaustive finite-difference checks stay cheap, big enough
// to exercise every branch.
ModelConfig tiny_config(uint64_t seed = 9) {
  ModelConfig c;
  c.p = 4;
  c.img_h = 8;
  c.img_w = 8;
  c.hm_h = 6;
  c.hm_w = 6;
  c.two_d_hidden = {20, 16};
  c.depth_hidden = {18, 10};
  c.embed_width = 8;
  c.head_hidden = {8, 6};
  c.seed = seed;
  return c;
}

Mat random_row(Rng& rng, int n, double lo = 0.0, double hi = 1.0) {
  Mat m(1, n);
  for (int i = 0; i < n; i++) m(0, i) = rng.uniform(lo, hi);
  return m;
}

DiscriminatorInput random_input(Rng& rng, int p, int h, int w) {
  DiscriminatorInput in;
  in.heatmaps.h = h;
  in.heatmaps.w = w;
  in.heatmaps.maps = Mat(p, h * w);
  for (long i = 0; i < in.heatmaps.maps.size(); i++)
    in.heatmaps.maps(i) = rng.uniform(0.0, 1.0);
  Vec depths(p);
  for (int j = 0; j < p; j++) depths(j) = rng.uniform(-400.0, 400.0);
  in.depth_maps = render_depth_maps(in.heatmaps, depths);
  Pose3D pose{Mat(p, 3), Frame::Camera};
  for (long i = 0; i < pose.coords.size(); i++) pose.coords(i) = rng.uniform(-500.0, 500.0);
  pose.coords.col(2).array() += 4000.0;
  in.descriptor = geometric_descriptor(pose);
  return in;
}

struct TempPath {
  std::string path;
  explicit TempPath(const std::string& name) : path("/tmp/advpose_models_" + name) {}
  ~TempPath() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("variant table matches the ablation design") {
  auto base = variant_spec("Baseline");
  REQUIRE_FALSE(base.discriminator);
  auto map = variant_spec("Map");
  REQUIRE(map.discriminator);
  REQUIRE(map.use_image);
  REQUIRE(map.use_maps);
  REQUIRE_FALSE(map.use_geo);
  auto geo = variant_spec("Geo");
  REQUIRE(geo.use_image);
  REQUIRE_FALSE(geo.use_maps);
  REQUIRE(geo.use_geo);
  auto full = variant_spec("Full");
  REQUIRE((full.use_image && full.use_maps && full.use_geo));
  REQUIRE(full.mode == GenMode::EndToEnd);
  REQUIRE(full.pretrain);
  REQUIRE(variant_spec("Full-fix2D").mode == GenMode::Fix2D);
  REQUIRE_FALSE(variant_spec("Full-no-pretrain").pretrain);
  REQUIRE_THROWS_AS(variant_spec("Fancy"), UnknownVariant);

  auto cfg = tiny_config();
  ModelSet mb = make_variant(cfg, "Baseline");
  REQUIRE_FALSE(mb.d.has_value());
  ModelSet mg = make_variant(cfg, "Geo");
  REQUIRE(mg.d.has_value());
  REQUIRE_FALSE(mg.d->map_embed.has_value());
  REQUIRE(mg.d->geo_embed.has_value());
  // Head input shrinks with the source count: 2 sources here.
  REQUIRE(mg.d->head.spec.widths.front() == 2 * cfg.embed_width);
  ModelSet mf = make_variant(cfg, "Full");
  REQUIRE(mf.d->head.spec.widths.front() == 3 * cfg.embed_width);
}

TEST_CASE("generator outputs live in range") {
  auto cfg = tiny_config();
  GeneratorModel g = build_generator(cfg, GenMode::EndToEnd);
  Rng rng(21);
  for (int trial = 0; trial < 10; trial++) {
    Mat img = random_row(rng, 64);
    GeneratorOutput out = g_forward(g, img);
    REQUIRE(out.heatmaps.maps.minCoeff() > 0.0);
    REQUIRE(out.heatmaps.maps.maxCoeff() < 1.0);
    REQUIRE(out.heatmaps.maps.rows() == 4);
    REQUIRE(out.depths.size() == 4);
    REQUIRE(out.depths.allFinite());
  }
  REQUIRE_THROWS_AS(g_forward(g, random_row(rng, 63)), ShapeMismatch);
}

TEST_CASE("tape and plain generator forwards agree") {
  auto cfg = tiny_config(31);
  GeneratorModel g = build_generator(cfg, GenMode::EndToEnd);
  Rng rng(5);
  Mat batch(3, 64);
  for (long i = 0; i < batch.size(); i++) batch(i) = rng.uniform(0.0, 1.0);

  Tape tape;
  GenTapeOut t = g_forward_tape(g, tape, batch);
  for (int b = 0; b < 3; b++) {
    GeneratorOutput plain = g_forward(g, batch.row(b));
    REQUIRE((tape.val(t.maps).row(b) - flatten_maps(plain.heatmaps.maps)).cwiseAbs().maxCoeff() <
            1e-12);
    REQUIRE((tape.val(t.depths_mm).row(b).transpose() - plain.depths).cwiseAbs().maxCoeff() <
            1e-9);
  }
}

TEST_CASE("fix-2d freezes the 2D module") {
  auto cfg = tiny_config(77);
  Rng rng(9);
  Mat batch(2, 64);
  for (long i = 0; i < batch.size(); i++) batch(i) = rng.uniform(0.0, 1.0);

  auto run_and_collect = [&](GenMode mode) {
    GeneratorModel g = build_generator(cfg, mode);
    Tape tape;
    GenTapeOut t = g_forward_tape(g, tape, batch);
    int target = tape.leaf(Mat::Constant(2, 4, 100.0));
    int loss = tape.sse(t.depths_mm, target);
    tape.backward(loss);
    double two_d_grad = 0.0, depth_grad = 0.0;
    for (auto* p : g.two_d.params()) two_d_grad += p->grad.cwiseAbs().sum();
    for (auto* p : g.depth.params()) depth_grad += p->grad.cwiseAbs().sum();
    return std::make_pair(two_d_grad, depth_grad);
  };

  auto [e2e_2d, e2e_dep] = run_and_collect(GenMode::EndToEnd);
  REQUIRE(e2e_2d > 0.0);  // gradient reaches the 2D module end to end
  REQUIRE(e2e_dep > 0.0);
  auto [fix_2d, fix_dep] = run_and_collect(GenMode::Fix2D);
  REQUIRE(fix_2d == 0.0);  // identically absent, not merely small
  REQUIRE(fix_dep > 0.0);

  // trainable_params excludes the frozen 2D net in fix-2d mode.
  GeneratorModel frozen = build_generator(cfg, GenMode::Fix2D);
  REQUIRE(frozen.trainable_params().size() == frozen.depth.params().size());
  GeneratorModel open = build_generator(cfg, GenMode::EndToEnd);
  REQUIRE(open.trainable_params().size() ==
          open.two_d.params().size() + open.depth.params().size());
}

TEST_CASE("oracle-2d feeds rendered ground truth to the depth head") {
  auto cfg = tiny_config(15);
  GeneratorModel g = build_generator(cfg, GenMode::Oracle2D);
  Rng rng(3);
  Mat batch = random_row(rng, 64);

  Pose2D gt{Mat(4, 2)};
  gt.coords << 1.5, 2.0, 3.0, 3.0, 4.5, 1.0, 2.0, 4.0;
  Mat oracle = flatten_maps(render_heatmaps(gt, 6, 6).maps);

  Tape tape;
  GenTapeOut t = g_forward_tape(g, tape, batch, &oracle);
  REQUIRE((tape.val(t.maps) - oracle).cwiseAbs().maxCoeff() == 0.0);

  GeneratorOutput plain = g_forward(g, batch, &gt);
  REQUIRE((flatten_maps(plain.heatmaps.maps) - oracle).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((tape.val(t.depths_mm).row(0).transpose() - plain.depths).cwiseAbs().maxCoeff() < 1e-9);

  REQUIRE_THROWS_AS(g_forward(g, batch), MissingLabels);
  Tape t2;
  REQUIRE_THROWS_AS(g_forward_tape(g, t2, batch), MissingLabels);
}

TEST_CASE("discriminator scores stay in (0,1) and ignore disabled sources") {
  auto cfg = tiny_config(44);
  Rng rng(17);
  DiscriminatorInput in = random_input(rng, 4, 6, 6);
  Mat img = random_row(rng, 64);

  for (const char* name : {"Map", "Geo", "Full"}) {
    ModelSet set = make_variant(cfg, name);
    double score = d_forward(*set.d, img, in);
    REQUIRE(score > 0.0);
    REQUIRE(score < 1.0);
  }

  // Geo variant ignores maps entirely.
  ModelSet geo = make_variant(cfg, "Geo");
  double s0 = d_forward(*geo.d, img, in);
  DiscriminatorInput butchered = in;
  butchered.heatmaps.maps.setConstant(0.123);
  butchered.depth_maps.maps.setConstant(-321.0);
  REQUIRE(d_forward(*geo.d, img, butchered) == s0);

  // Map variant ignores the descriptor.
  ModelSet map = make_variant(cfg, "Map");
  double m0 = d_forward(*map.d, img, in);
  butchered = in;
  butchered.descriptor.d.setConstant(777.0);
  REQUIRE(d_forward(*map.d, img, butchered) == m0);

  // A maps+geo discriminator ignores the image.
  DiscriminatorModel mg = build_discriminator(cfg, false, true, true);
  double g0 = d_forward(mg, img, in);
  REQUIRE(d_forward(mg, img.array() + 0.5, in) == g0);

  REQUIRE_THROWS_AS(build_discriminator(cfg, false, false, false), ConfigError);
}

TEST_CASE("tape and plain discriminator forwards agree") {
  auto cfg = tiny_config(123);
  Rng rng(88);
  DiscriminatorInput in = random_input(rng, 4, 6, 6);
  Mat img = random_row(rng, 64);

  for (const char* name : {"Map", "Geo", "Full"}) {
    ModelSet set = make_variant(cfg, name);
    double plain = d_forward(*set.d, img, in);
    Tape tape;
    int image = tape.leaf(img);
    int maps = tape.leaf(flatten_maps(in.heatmaps.maps));
    int dmaps = tape.leaf(flatten_maps(in.depth_maps.maps));
    int desc = tape.leaf(flatten_descriptor(in.descriptor));
    int score = d_forward_tape(*set.d, tape, image, maps, dmaps, desc);
    REQUIRE(tape.val(score)(0, 0) == Catch::Approx(plain).epsilon(1e-12));
  }
}

TEST_CASE("model nets pass gradient checks") {
  auto cfg = tiny_config(202);
  ModelSet set = make_variant(cfg, "Full");
  Rng rng(7);

  auto check_net = [&](DenseNet& net) {
    Mat x = random_row(rng, net.spec.widths.front(), -1.0, 1.0);
    Mat target = random_row(rng, net.spec.widths.back(), 0.1, 0.9);
    double err = grad_check(
        net, x, [&](const Mat& y) { return ((y - target).array().square()).sum(); },
        [&](const Mat& y) { return Mat(2.0 * (y - target)); });
    CAPTURE(net.spec.widths.front());
    REQUIRE(err < 1e-6);
  };
  check_net(set.g.two_d);
  check_net(set.g.depth);
  check_net(*set.d->image_embed);
  check_net(*set.d->map_embed);
  check_net(*set.d->geo_embed);
  check_net(set.d->head);
}

TEST_CASE("end-to-end loss differentiates through the whole fake pathway") {
  auto cfg = tiny_config(305);
  ModelSet set = make_variant(cfg, "Full");
  Rng rng(55);
  const int B = 2;
  Mat batch(B, 64);
  for (long i = 0; i < batch.size(); i++) batch(i) = rng.uniform(0.0, 1.0);
  Mat cams(B, 4);
  for (int b = 0; b < B; b++) {
    cams.row(b) << rng.uniform(20, 30), rng.uniform(20, 30), 3.5, 3.5;
  }

  auto loss_of = [&]() {
    Tape tape;
    GenTapeOut gen = g_forward_tape(set.g, tape, batch);
    EncodeTapeOut enc =
        encode_prediction_tape(tape, gen.maps, gen.depths_mm, cams, 4, 6, 6, 8, 8);
    int img = tape.leaf(batch);
    int score = d_forward_tape(*set.d, tape, img, gen.maps, enc.dmaps, enc.desc_raw);
    Vec ones = Vec::Ones(B);
    int loss = tape.bce_loss(score, ones, Reduce::Sum);
    tape.backward(loss);
    return tape.val(loss)(0, 0);
  };

  double loss0 = loss_of();
  REQUIRE(std::isfinite(loss0));

  // The gradient reaches every tensor in the chain (individual entries may be
  // zero behind dead relu units, so check per-tensor sums).
  std::vector<Tensor*> all = set.g.params();
  for (auto* t : set.d->params()) all.push_back(t);
  for (auto* t : all) {
    CAPTURE(t->name);
    REQUIRE(t->grad.cwiseAbs().sum() > 0.0);
  }

  // Finite-difference one entry from every tensor.
  std::vector<std::pair<Tensor*, long>> probes;
  Rng pick(31);
  for (auto* t : all) probes.push_back({t, static_cast<long>(pick.uniform_index(t->value.size()))});
  std::vector<double> analytic;
  for (auto& [t, idx] : probes) analytic.push_back(t->grad(idx));

  const double eps = 1e-5;
  for (size_t i = 0; i < probes.size(); i++) {
    auto [t, idx] = probes[i];
    double keep = t->value(idx);
    for (auto* p : all) p->grad.setZero();
    t->value(idx) = keep + eps;
    double up = loss_of();
    t->value(idx) = keep - eps;
    for (auto* p : all) p->grad.setZero();
    double dn = loss_of();
    t->value(idx) = keep;
    double fd = (up - dn) / (2 * eps);
    double rel = std::abs(fd - analytic[i]) / std::max({1.0, std::abs(fd), std::abs(analytic[i])});
    CAPTURE(t->name, idx, fd, analytic[i]);
    REQUIRE(rel < 1e-5);
  }
}

TEST_CASE("model sets persist through checkpoints") {
  auto cfg = tiny_config(606);
  ModelSet set = make_variant(cfg, "Full-fix2D");
  Rng rng(14);
  Mat img = random_row(rng, 64);
  DiscriminatorInput in = random_input(rng, 4, 6, 6);
  GeneratorOutput before_g = g_forward(set.g, img);
  double before_d = d_forward(*set.d, img, in);

  TempPath path("ckpt.bin");
  {
    Checkpoint ck;
    save_model_set(ck, cfg, set);
    ck.save(path.path);
  }
  Checkpoint ck = Checkpoint::load(path.path);
  ModelConfig cfg2 = load_model_config(ck);
  REQUIRE(cfg2.p == cfg.p);
  REQUIRE(cfg2.two_d_hidden == cfg.two_d_hidden);
  ModelSet back = load_model_set(ck);
  REQUIRE(back.variant.name == "Full-fix2D");
  REQUIRE(back.g.mode == GenMode::Fix2D);
  REQUIRE(back.d.has_value());

  GeneratorOutput after_g = g_forward(back.g, img);
  REQUIRE(after_g.heatmaps.maps.cwiseEqual(before_g.heatmaps.maps).all());
  REQUIRE(after_g.depths.cwiseEqual(before_g.depths).all());
  REQUIRE(d_forward(*back.d, img, in) == before_d);
}
