#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "advpose/experiment.hpp"

using namespace advpose;

namespace {

// The binary under test; the build passes its location in.
const char* cli_path() { return ADVPOSE_CLI_PATH; }

int run_cli(const std::string& args, const std::string& log_path = "") {
  std::string cmd = std::string(cli_path()) + " " + args;
  cmd += log_path.empty() ? " > /dev/null 2>&1" : " > " + log_path + " 2>&1";
  int st = std::system(cmd.c_str());
  REQUIRE(st != -1);
  return WIFEXITED(st) ? WEXITSTATUS(st) : -2;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Scratch directory per test case, wiped on entry so reruns are clean.
struct Scratch {
  std::string dir;
  explicit Scratch(const std::string& name) : dir("cli_scratch_" + name) {
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
  }
  std::string path(const std::string& rel) const { return dir + "/" + rel; }
};

std::string tiny_cfg_text(const std::string& out, const std::string& extra = "") {
  std::ostringstream o;
  o << "out = " << out << "\n"
    << "data.lab_train = 24\ndata.lab_test = 8\n"
    << "data.wild_train = 24\ndata.wild_test = 8\n"
    << "data.xfer_train = 12\ndata.xfer_test = 8\n"
    << "model.hm_h = 8\nmodel.hm_w = 8\n"
    << "model.two_d_hidden = 32,24\nmodel.depth_hidden = 24,16\n"
    << "model.embed_width = 12\nmodel.head_hidden = 12,8\n"
    << "pretrain.iters_2d = 30\npretrain.iters_joint = 40\n"
    << "pretrain.batch = 6\npretrain.val_every = 20\n"
    << "adv.iterations = 8\nadv.batch = 6\nadv.ratio = 1\nadv.lambda = 0.05\n"
    << "seeds = 1,2\n"
    << extra;
  return o.str();
}

std::string write_cfg(const Scratch& s, const std::string& name, const std::string& text) {
  std::string p = s.path(name);
  std::ofstream f(p);
  f << text;
  REQUIRE(f.good());
  return p;
}

std::map<std::string, std::string> snapshot_dir(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[e.path().string()] = slurp(e.path().string());
  return out;
}

}  // namespace

TEST_CASE("config parsing covers every key and rejects junk") {
  std::string text =
      "# comment\n"
      "out = somewhere/run  # trailing comment\n"
      "data.seed = 5\n"
      "data.lab_train = 10\ndata.lab_test = 4\n"
      "data.wild_train = 11\ndata.wild_test = 5\n"
      "data.xfer_train = 12\ndata.xfer_test = 6\n"
      "model.seed = 3\nmodel.hm_h = 6\nmodel.hm_w = 7\n"
      "model.two_d_hidden = 20,16\nmodel.depth_hidden = 18\n"
      "model.embed_width = 9\nmodel.head_hidden = 8,4\n"
      "pretrain.iters_2d = 15\npretrain.iters_joint = 25\npretrain.batch = 4\n"
      "pretrain.lr = 0.002\npretrain.val_every = 10\npretrain.seed = 21\n"
      "adv.lambda = 0.125\nadv.iterations = 50\nadv.batch = 8\nadv.ratio = 2\n"
      "adv.lr_g = 0.0005\nadv.lr_d = 0.0002\nadv.val_every = 25\nadv.seed = 31\n"
      "variant = Geo\n"
      "seeds = 4,5,6\n";
  std::istringstream in(text);
  ExperimentConfig c = parse_config(in);
  CHECK(c.out_dir == "somewhere/run");
  CHECK(c.data_seed == 5);
  CHECK(c.lab_train == 10);
  CHECK(c.wild_test == 5);
  CHECK(c.xfer_train == 12);
  CHECK(c.model.seed == 3);
  CHECK(c.model.hm_h == 6);
  CHECK(c.model.hm_w == 7);
  CHECK(c.model.two_d_hidden == std::vector<int>{20, 16});
  CHECK(c.model.depth_hidden == std::vector<int>{18});
  CHECK(c.model.embed_width == 9);
  CHECK(c.model.head_hidden == std::vector<int>{8, 4});
  CHECK(c.pretrain.iters_2d == 15);
  CHECK(c.pretrain.iters_joint == 25);
  CHECK(c.pretrain.batch == 4);
  CHECK(c.pretrain.lr == 0.002);
  CHECK(c.pretrain.val_every == 10);
  CHECK(c.pretrain.seed == 21);
  CHECK(c.adv.lambda == 0.125);
  CHECK(c.adv.iterations == 50);
  CHECK(c.adv.batch == 8);
  CHECK(c.adv.ratio == 2);
  CHECK(c.adv.lr_g == 0.0005);
  CHECK(c.adv.lr_d == 0.0002);
  CHECK(c.adv.val_every == 25);
  CHECK(c.adv.seed == 31);
  CHECK(c.variant == "Geo");
  CHECK(c.seeds == std::vector<uint64_t>{4, 5, 6});

  // round trip through the canonical serialization
  std::istringstream again(serialize_config(c));
  ExperimentConfig c2 = parse_config(again);
  CHECK(serialize_config(c2) == serialize_config(c));

  auto parse = [](const std::string& t) {
    std::istringstream is(t);
    return parse_config(is);
  };
  CHECK_THROWS_AS(parse("nonsense line\n"), ConfigError);
  CHECK_THROWS_AS(parse("out =\n"), ConfigError);
  CHECK_THROWS_AS(parse("definitely.not.a.key = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("adv.lambda = banana\n"), ConfigError);
  CHECK_THROWS_AS(parse("adv.iterations = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse("data.seed = -4\n"), ConfigError);
  CHECK_THROWS_AS(parse("model.two_d_hidden = 12,0\n"), ConfigError);
  CHECK_THROWS_AS(parse("seeds = \n"), ConfigError);
}

TEST_CASE("cli rejects bad invocations with usage/io codes") {
  Scratch s("usage");
  CHECK(run_cli("") == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("pretrain --config " + s.path("missing.cfg")) == 2);
  std::string bad = write_cfg(s, "bad.cfg", "bogus.key = 3\n");
  CHECK(run_cli("pretrain --config " + bad) == 1);
  CHECK(run_cli("--help") == 0);
}

TEST_CASE("gen-data writes six deterministic dataset files") {
  Scratch s("gen");
  std::string cfg = write_cfg(s, "t.cfg", tiny_cfg_text(s.path("run")));
  REQUIRE(run_cli("gen-data --config " + cfg) == 0);

  const char* names[] = {"lab_train", "lab_test", "wild_train", "wild_test",
                         "xfer_train", "xfer_test"};
  std::map<std::string, std::string> first;
  for (const char* n : names) {
    std::string p = s.path("run/data/" + std::string(n) + ".ds");
    REQUIRE(std::filesystem::exists(p));
    first[p] = slurp(p);
  }
  CHECK(std::filesystem::exists(s.path("run/config.gen-data.cfg")));

  Dataset lab = load_dataset(s.path("run/data/lab_train.ds"));
  CHECK(lab.samples.size() == 24);
  CHECK(lab.has_3d);
  CHECK(lab.p == default_topology().joint_count);
  Dataset wild = load_dataset(s.path("run/data/wild_test.ds"));
  CHECK(wild.samples.size() == 8);
  CHECK_FALSE(wild.has_3d);

  // Byte-identical on rerun.
  REQUIRE(run_cli("gen-data --config " + cfg) == 0);
  for (const auto& [p, bytes] : first) CHECK(slurp(p) == bytes);
}

TEST_CASE("pretrain gates on data, checkpoints, resumes bit-exactly") {
  Scratch s("pre");
  std::string cfg = write_cfg(s, "t.cfg", tiny_cfg_text(s.path("run")));
  CHECK(run_cli("pretrain --config " + cfg) == 3);  // no datasets yet
  REQUIRE(run_cli("gen-data --config " + cfg) == 0);
  auto data_before = snapshot_dir(s.path("run/data"));

  REQUIRE(run_cli("pretrain --config " + cfg) == 0);
  REQUIRE(std::filesystem::exists(s.path("run/pretrain.ckpt")));
  TrainHistory h = TrainHistory::load_csv(s.path("run/pretrain_history.csv"));
  CHECK(h.records.size() == 70);
  CHECK(h.records.back().iteration == 69);

  // Completed run: a second invocation must leave the artifacts untouched.
  std::string ck1 = slurp(s.path("run/pretrain.ckpt"));
  REQUIRE(run_cli("pretrain --config " + cfg) == 0);
  CHECK(slurp(s.path("run/pretrain.ckpt")) == ck1);

  // Extending the joint phase resumes and matches an unbroken fresh run.
  std::string ext = write_cfg(
      s, "ext.cfg",
      tiny_cfg_text(s.path("run"), "pretrain.iters_joint = 60\n"));
  REQUIRE(run_cli("pretrain --config " + ext) == 0);
  std::string fresh = write_cfg(
      s, "fresh.cfg",
      tiny_cfg_text(s.path("fresh"), "pretrain.iters_joint = 60\n"));
  REQUIRE(run_cli("gen-data --config " + fresh) == 0);
  REQUIRE(run_cli("pretrain --config " + fresh) == 0);
  CHECK(slurp(s.path("run/pretrain.ckpt")) == slurp(s.path("fresh/pretrain.ckpt")));
  CHECK(slurp(s.path("run/pretrain_history.csv")) ==
        slurp(s.path("fresh/pretrain_history.csv")));

  // Changing the phase split after the joint phase ran would renumber the
  // history; the command must refuse.
  std::string bad = write_cfg(
      s, "badresume.cfg",
      tiny_cfg_text(s.path("run"),
                    "pretrain.iters_2d = 50\npretrain.iters_joint = 60\n"));
  CHECK(run_cli("pretrain --config " + bad) == 1);

  // Input datasets are never mutated.
  for (const auto& [p, bytes] : data_before) CHECK(slurp(p) == bytes);
}

TEST_CASE("train-adv gates, artifacts, and determinism") {
  Scratch s("adv");
  std::string cfg = write_cfg(s, "t.cfg", tiny_cfg_text(s.path("run")));
  REQUIRE(run_cli("gen-data --config " + cfg) == 0);

  CHECK(run_cli("train-adv --config " + cfg + " --variant Baseline") == 1);
  CHECK(run_cli("train-adv --config " + cfg + " --variant Full") == 3);  // no pretrain yet
  CHECK(run_cli("train-adv --config " + cfg + " --variant NoSuchThing") == 1);

  // Full-no-pretrain runs from scratch without the pretrain artifact.
  REQUIRE(run_cli("train-adv --config " + cfg + " --variant Full-no-pretrain") == 0);
  std::string fnp = s.path("run/adv_Full-no-pretrain_s1");
  REQUIRE(std::filesystem::exists(fnp + "/g.ckpt"));
  REQUIRE(std::filesystem::exists(fnp + "/d.ckpt"));
  TrainHistory h = TrainHistory::load_csv(fnp + "/history.csv");
  REQUIRE(h.records.size() == 8);
  for (const auto& r : h.records) {
    REQUIRE(r.l_pose.has_value());
    REQUIRE(r.l_d.has_value());
    REQUIRE(r.l_g.has_value());
    CHECK(*r.l_d > 0.0);
    CHECK(*r.l_g > 0.0);
    CHECK(*r.l_g >= *r.l_pose);
  }

  // The --seed flag redirects the run directory and stream.
  REQUIRE(run_cli("train-adv --config " + cfg + " --variant Full-no-pretrain --seed 7") == 0);
  CHECK(std::filesystem::exists(s.path("run/adv_Full-no-pretrain_s7/g.ckpt")));

  // Full after pretraining, deterministic across reruns and thread caps.
  REQUIRE(run_cli("pretrain --config " + cfg) == 0);
  REQUIRE(run_cli("train-adv --config " + cfg + " --variant Full") == 0);
  std::string g1 = slurp(s.path("run/adv_Full_s1/g.ckpt"));
  std::string d1 = slurp(s.path("run/adv_Full_s1/d.ckpt"));
  std::string h1 = slurp(s.path("run/adv_Full_s1/history.csv"));
  int rc = std::system(("ADVPOSE_THREADS=4 " + std::string(cli_path()) + " train-adv --config " +
                        cfg + " --variant Full > /dev/null 2>&1")
                           .c_str());
  REQUIRE(WIFEXITED(rc));
  REQUIRE(WEXITSTATUS(rc) == 0);
  CHECK(slurp(s.path("run/adv_Full_s1/g.ckpt")) == g1);
  CHECK(slurp(s.path("run/adv_Full_s1/d.ckpt")) == d1);
  CHECK(slurp(s.path("run/adv_Full_s1/history.csv")) == h1);

  // Reloading the generator checkpoint reproduces a real model.
  Checkpoint ck = Checkpoint::load(s.path("run/adv_Full_s1/g.ckpt"));
  GeneratorModel g = load_generator(ck);
  CHECK(g.mode == GenMode::EndToEnd);
  CHECK(g.p == default_topology().joint_count);
}

TEST_CASE("eval echo stub, real checkpoints, and refusals") {
  Scratch s("eval");
  std::string cfg = write_cfg(s, "t.cfg", tiny_cfg_text(s.path("run")));
  REQUIRE(run_cli("gen-data --config " + cfg) == 0);

  // Ground truth against itself: zero error, perfect detection rates.
  REQUIRE(run_cli("eval --config " + cfg + " --echo-gt --name echo") == 0);
  MetricsReport echo = MetricsReport::from_text(slurp(s.path("run/eval/echo.txt")));
  CHECK(echo.mpjpe_p1 == 0.0);
  CHECK(echo.mpjpe_p2 < 1e-9);  // rigid alignment leaves SVD-level noise only
  CHECK(echo.pckh05 == 100.0);
  CHECK(echo.pck3d == 100.0);
  CHECK(echo.auc3d == 100.0);
  for (const auto& [name, v] : echo.per_group) CHECK(v == 0.0);
  CHECK(echo.samples == 8);
  CHECK(std::filesystem::exists(s.path("run/eval/echo.csv")));

  // Unlabeled data cannot be scored.
  CHECK(run_cli("eval --config " + cfg + " --echo-gt --name w --data " +
                s.path("run/data/wild_test.ds")) == 1);
  // Missing checkpoint is a missing dependency.
  CHECK(run_cli("eval --config " + cfg + " --name x") == 3);

  // A real (tiny) checkpoint produces a finite report with p2 <= p1.
  REQUIRE(run_cli("train-adv --config " + cfg + " --variant Full-no-pretrain") == 0);
  REQUIRE(run_cli("eval --config " + cfg + " --variant Full-no-pretrain --name real") == 0);
  MetricsReport real = MetricsReport::from_text(slurp(s.path("run/eval/real.txt")));
  CHECK(real.valid());
  CHECK(real.mpjpe_p1 > 0.0);
  CHECK(real.mpjpe_p2 <= real.mpjpe_p1);
  CHECK(real.samples == 8);

  // Scoring a lab split works through --data.
  REQUIRE(run_cli("eval --config " + cfg + " --variant Full-no-pretrain --name lab --data " +
                  s.path("run/data/lab_test.ds")) == 0);
  MetricsReport lab = MetricsReport::from_text(slurp(s.path("run/eval/lab.txt")));
  CHECK(lab.valid());
  CHECK(lab.mpjpe_p2 <= lab.mpjpe_p1);

  // Deterministic rerun: byte-identical CSV.
  std::string csv1 = slurp(s.path("run/eval/real.csv"));
  REQUIRE(run_cli("eval --config " + cfg + " --variant Full-no-pretrain --name real") == 0);
  CHECK(slurp(s.path("run/eval/real.csv")) == csv1);
}

TEST_CASE("ablate writes the matrix with medians, footer, and empty baseline L_D") {
  Scratch s("ablate");
  std::string cfg = write_cfg(s, "t.cfg", tiny_cfg_text(s.path("run")));
  REQUIRE(run_cli("gen-data --config " + cfg) == 0);
  REQUIRE(run_cli("ablate --config " + cfg, s.path("ablate.log")) == 0);

  std::string csv = slurp(s.path("run/ablation.csv"));
  std::istringstream in(csv);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line ==
        "variant,seed,status,xfer_mpjpe_p1,xfer_mpjpe_p2,lab_mpjpe_p1,final_l_pose,final_l_d,"
        "final_l_g");
  int run_rows = 0, median_rows = 0, baseline_rows = 0;
  bool footer = false;
  while (std::getline(in, line)) {
    if (line.rfind("#", 0) == 0) {
      footer = true;
      CHECK(line.find("64.8") != std::string::npos);
      CHECK(line.find("61.3") != std::string::npos);
      CHECK(line.find("60.3") != std::string::npos);
      CHECK(line.find("59.7") != std::string::npos);
      CHECK(line.find("63.1") != std::string::npos);
      CHECK(line.find("63.4") != std::string::npos);
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 9) cells.push_back("");
    REQUIRE(cells.size() == 9);
    CHECK(cells[2] == "ok");
    if (cells[1] == "median") {
      median_rows++;
      continue;
    }
    run_rows++;
    CHECK(std::stod(cells[3]) > 0.0);
    if (cells[0] == "Baseline") {
      baseline_rows++;
      CHECK(cells[7].empty());  // no discriminator loss without a discriminator
      CHECK(cells[8].empty());
      CHECK_FALSE(cells[6].empty());
    } else {
      CHECK_FALSE(cells[7].empty());
      CHECK_FALSE(cells[8].empty());
    }
  }
  CHECK(run_rows == 12);  // 6 variants x 2 seeds
  CHECK(median_rows == 6);
  CHECK(baseline_rows == 2);
  CHECK(footer);

  // Per-run histories land next to the matrix.
  CHECK(std::filesystem::exists(s.path("run/ablate/Full_s1_history.csv")));
  CHECK(std::filesystem::exists(s.path("run/ablate/Baseline_s2_history.csv")));

  // The pretrain artifact was created on demand and reused.
  CHECK(std::filesystem::exists(s.path("run/pretrain.ckpt")));

  // report aggregates everything it finds.
  REQUIRE(run_cli("report --config " + cfg, s.path("report.log")) == 0);
  std::string summary = slurp(s.path("run/summary.txt"));
  CHECK(summary.find("Full-no-pretrain") != std::string::npos);
  CHECK(summary.find("vs Baseline") != std::string::npos);
  CHECK(summary.find("64.8") != std::string::npos);
}

TEST_CASE("report on an empty directory is a missing artifact") {
  Scratch s("report");
  std::string cfg = write_cfg(s, "t.cfg", tiny_cfg_text(s.path("run")));
  CHECK(run_cli("report --config " + cfg) == 3);
}

TEST_CASE("gradcheck passes clean and fails when sabotaged") {
  Scratch s("grad");
  REQUIRE(run_cli("gradcheck", s.path("ok.log")) == 0);
  std::string ok = slurp(s.path("ok.log"));
  CHECK(ok.find("generator/2d") != std::string::npos);
  CHECK(ok.find("generator/depth") != std::string::npos);
  CHECK(ok.find("discriminator/image-embed") != std::string::npos);
  CHECK(ok.find("discriminator/map-embed") != std::string::npos);
  CHECK(ok.find("discriminator/geo-embed") != std::string::npos);
  CHECK(ok.find("discriminator/head-3src") != std::string::npos);
  CHECK(ok.find("discriminator/head-2src") != std::string::npos);
  CHECK(ok.find("chain/generator-encode-discriminator") != std::string::npos);
  CHECK(ok.find("FAIL") == std::string::npos);
  CHECK(ok.find("gradcheck ok") != std::string::npos);

  REQUIRE(run_cli("gradcheck --sabotage", s.path("sab.log")) == 1);
  std::string sab = slurp(s.path("sab.log"));
  CHECK(sab.find("FAIL") != std::string::npos);
}
