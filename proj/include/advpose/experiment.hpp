// Experiment orchestration: run directories, flat key=value config files, and
// the implementations behind the CLI verbs.  Commands are plain functions that
// return process exit codes so tests can drive them without spawning.
#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "encode.hpp"
#include "metrics.hpp"
#include "models.hpp"
#include "skeleton.hpp"
#include "synth.hpp"
#include "train.hpp"

namespace advpose {

// ------ exit codes ------

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;    // bad config, bad arguments, refused run
inline constexpr int kExitIo = 2;       // unreadable or corrupt files
inline constexpr int kExitMissing = 3;  // required upstream artifact absent

// Full-scale reference results the desk-scale ablation is compared against.
inline constexpr const char* kReferenceFooter =
    "# reference MPJPE at full scale (mm): Baseline 64.8, Map 61.3, Geo 60.3, Full 59.7, "
    "Full-fix2D 63.1, Full-no-pretrain 63.4";

// ------ configuration ------

struct ExperimentConfig {
  std::string out_dir = "runs/exp";
  uint64_t data_seed = 1;
  long lab_train = 240, lab_test = 60;
  long wild_train = 240, wild_test = 60;
  long xfer_train = 60, xfer_test = 60;
  ModelConfig model;
  PretrainConfig pretrain;
  AdvConfig adv;
  std::string variant = "Full";
  std::vector<uint64_t> seeds = {1, 2, 3};
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  return out;
}

inline double parse_num(const std::string& key, const std::string& val) {
  try {
    size_t pos = 0;
    double v = std::stod(val, &pos);
    if (pos != val.size() || !std::isfinite(v)) throw std::invalid_argument(val);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": cannot parse number '" + val + "'");
  }
}

inline long parse_count(const std::string& key, const std::string& val) {
  double v = parse_num(key, val);
  long n = static_cast<long>(v);
  if (static_cast<double>(n) != v)
    throw ConfigError("config key " + key + ": expected an integer, got '" + val + "'");
  return n;
}

inline uint64_t parse_seed(const std::string& key, const std::string& val) {
  long n = parse_count(key, val);
  if (n < 0) throw ConfigError("config key " + key + ": seeds cannot be negative");
  return static_cast<uint64_t>(n);
}

inline std::vector<int> parse_widths(const std::string& key, const std::string& val) {
  std::vector<int> out;
  for (const std::string& cell : split(val, ',')) {
    long w = parse_count(key, trim(cell));
    if (w <= 0) throw ConfigError("config key " + key + ": widths must be positive");
    out.push_back(static_cast<int>(w));
  }
  if (out.empty()) throw ConfigError("config key " + key + ": empty width list");
  return out;
}

inline std::vector<uint64_t> parse_seed_list(const std::string& key, const std::string& val) {
  std::vector<uint64_t> out;
  for (const std::string& cell : split(val, ',')) out.push_back(parse_seed(key, trim(cell)));
  if (out.empty()) throw ConfigError("config key " + key + ": empty seed list");
  return out;
}

inline std::string join_widths(const std::vector<int>& w) {
  std::string out;
  for (size_t i = 0; i < w.size(); i++) out += (i ? "," : "") + std::to_string(w[i]);
  return out;
}

inline std::string join_seeds(const std::vector<uint64_t>& w) {
  std::string out;
  for (size_t i = 0; i < w.size(); i++) out += (i ? "," : "") + std::to_string(w[i]);
  return out;
}

inline void apply_config_key(ExperimentConfig& c, const std::string& key, const std::string& val) {
  if (key == "out") c.out_dir = val;
  else if (key == "data.seed") c.data_seed = parse_seed(key, val);
  else if (key == "data.lab_train") c.lab_train = parse_count(key, val);
  else if (key == "data.lab_test") c.lab_test = parse_count(key, val);
  else if (key == "data.wild_train") c.wild_train = parse_count(key, val);
  else if (key == "data.wild_test") c.wild_test = parse_count(key, val);
  else if (key == "data.xfer_train") c.xfer_train = parse_count(key, val);
  else if (key == "data.xfer_test") c.xfer_test = parse_count(key, val);
  else if (key == "model.seed") c.model.seed = parse_seed(key, val);
  else if (key == "model.hm_h") c.model.hm_h = static_cast<int>(parse_count(key, val));
  else if (key == "model.hm_w") c.model.hm_w = static_cast<int>(parse_count(key, val));
  else if (key == "model.two_d_hidden") c.model.two_d_hidden = parse_widths(key, val);
  else if (key == "model.depth_hidden") c.model.depth_hidden = parse_widths(key, val);
  else if (key == "model.embed_width") c.model.embed_width = static_cast<int>(parse_count(key, val));
  else if (key == "model.head_hidden") c.model.head_hidden = parse_widths(key, val);
  else if (key == "pretrain.iters_2d") c.pretrain.iters_2d = static_cast<int>(parse_count(key, val));
  else if (key == "pretrain.iters_joint")
    c.pretrain.iters_joint = static_cast<int>(parse_count(key, val));
  else if (key == "pretrain.batch") c.pretrain.batch = static_cast<int>(parse_count(key, val));
  else if (key == "pretrain.lr") c.pretrain.lr = parse_num(key, val);
  else if (key == "pretrain.val_every")
    c.pretrain.val_every = static_cast<int>(parse_count(key, val));
  else if (key == "pretrain.seed") c.pretrain.seed = parse_seed(key, val);
  else if (key == "adv.lambda") c.adv.lambda = parse_num(key, val);
  else if (key == "adv.iterations") c.adv.iterations = static_cast<int>(parse_count(key, val));
  else if (key == "adv.batch") c.adv.batch = static_cast<int>(parse_count(key, val));
  else if (key == "adv.ratio") c.adv.ratio = static_cast<int>(parse_count(key, val));
  else if (key == "adv.lr_g") c.adv.lr_g = parse_num(key, val);
  else if (key == "adv.lr_d") c.adv.lr_d = parse_num(key, val);
  else if (key == "adv.val_every") c.adv.val_every = static_cast<int>(parse_count(key, val));
  else if (key == "adv.seed") c.adv.seed = parse_seed(key, val);
  else if (key == "variant") c.variant = val;
  else if (key == "seeds") c.seeds = parse_seed_list(key, val);
  else throw ConfigError("unknown config key: " + key);
}

}  // namespace detail

inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
    detail::apply_config_key(cfg, key, val);
  }
  return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  return parse_config(f);
}

// Canonical round-trippable form; written next to every command's outputs.
inline std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream o;
  o << "# resolved experiment configuration\n";
  o << "out = " << c.out_dir << "\n";
  o << "data.seed = " << c.data_seed << "\n";
  o << "data.lab_train = " << c.lab_train << "\n";
  o << "data.lab_test = " << c.lab_test << "\n";
  o << "data.wild_train = " << c.wild_train << "\n";
  o << "data.wild_test = " << c.wild_test << "\n";
  o << "data.xfer_train = " << c.xfer_train << "\n";
  o << "data.xfer_test = " << c.xfer_test << "\n";
  o << "model.seed = " << c.model.seed << "\n";
  o << "model.hm_h = " << c.model.hm_h << "\n";
  o << "model.hm_w = " << c.model.hm_w << "\n";
  o << "model.two_d_hidden = " << detail::join_widths(c.model.two_d_hidden) << "\n";
  o << "model.depth_hidden = " << detail::join_widths(c.model.depth_hidden) << "\n";
  o << "model.embed_width = " << c.model.embed_width << "\n";
  o << "model.head_hidden = " << detail::join_widths(c.model.head_hidden) << "\n";
  o << "pretrain.iters_2d = " << c.pretrain.iters_2d << "\n";
  o << "pretrain.iters_joint = " << c.pretrain.iters_joint << "\n";
  o << "pretrain.batch = " << c.pretrain.batch << "\n";
  o << "pretrain.lr = " << format_double(c.pretrain.lr) << "\n";
  o << "pretrain.val_every = " << c.pretrain.val_every << "\n";
  o << "pretrain.seed = " << c.pretrain.seed << "\n";
  o << "adv.lambda = " << format_double(c.adv.lambda) << "\n";
  o << "adv.iterations = " << c.adv.iterations << "\n";
  o << "adv.batch = " << c.adv.batch << "\n";
  o << "adv.ratio = " << c.adv.ratio << "\n";
  o << "adv.lr_g = " << format_double(c.adv.lr_g) << "\n";
  o << "adv.lr_d = " << format_double(c.adv.lr_d) << "\n";
  o << "adv.val_every = " << c.adv.val_every << "\n";
  o << "adv.seed = " << c.adv.seed << "\n";
  o << "variant = " << c.variant << "\n";
  o << "seeds = " << detail::join_seeds(c.seeds) << "\n";
  return o.str();
}

// ------ run directory layout ------

struct RunPaths {
  std::string root;
  explicit RunPaths(std::string r) : root(std::move(r)) {}
  std::string data_dir() const { return root + "/data"; }
  std::string dataset(const std::string& domain, const std::string& split) const {
    return data_dir() + "/" + domain + "_" + split + ".ds";
  }
  std::string pretrain_ckpt() const { return root + "/pretrain.ckpt"; }
  std::string pretrain_history() const { return root + "/pretrain_history.csv"; }
  std::string adv_dir(const std::string& variant, uint64_t seed) const {
    return root + "/adv_" + variant + "_s" + std::to_string(seed);
  }
  std::string ablate_dir() const { return root + "/ablate"; }
  std::string ablation_csv() const { return root + "/ablation.csv"; }
  std::string eval_dir() const { return root + "/eval"; }
  std::string summary_txt() const { return root + "/summary.txt"; }
  std::string resolved(const std::string& verb) const { return root + "/config." + verb + ".cfg"; }
};

namespace detail {

inline bool file_exists(const std::string& p) { return std::filesystem::exists(p); }

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + path);
  f << text;
  if (!f.good()) throw IoError("write failed: " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline int missing_artifact(std::ostream& log, const std::string& what, const std::string& hint) {
  log << "missing " << what << "; " << hint << "\n";
  return kExitMissing;
}

}  // namespace detail

// ------ shared command plumbing ------

struct LoadedData {
  SkeletonTopology topo;
  Dataset lab_train, wild_train, xfer_train;
};

inline int load_train_data(const ExperimentConfig& cfg, LoadedData& out, std::ostream& log) {
  RunPaths rp(cfg.out_dir);
  for (const char* d : {"lab", "wild", "xfer"})
    if (!detail::file_exists(rp.dataset(d, "train")))
      return detail::missing_artifact(log, "dataset " + rp.dataset(d, "train"),
                                      "run gen-data first");
  out.topo = default_topology();
  out.lab_train = load_dataset(rp.dataset("lab", "train"));
  out.wild_train = load_dataset(rp.dataset("wild", "train"));
  out.xfer_train = load_dataset(rp.dataset("xfer", "train"));
  if (out.lab_train.p != out.topo.joint_count)
    throw ConfigError("dataset joint count does not match the skeleton");
  return kExitOk;
}

// The network sizes come from the config; image size and joint count come
// from the data itself.
inline ModelConfig sized_model(const ExperimentConfig& cfg, const Dataset& ref) {
  ModelConfig m = cfg.model;
  m.p = ref.p;
  m.img_h = ref.img_h;
  m.img_w = ref.img_w;
  return m;
}

inline void check_same_model(const ModelConfig& saved, const ModelConfig& want) {
  bool ok = saved.p == want.p && saved.img_h == want.img_h && saved.img_w == want.img_w &&
            saved.hm_h == want.hm_h && saved.hm_w == want.hm_w &&
            saved.two_d_hidden == want.two_d_hidden && saved.depth_hidden == want.depth_hidden &&
            saved.embed_width == want.embed_width && saved.head_hidden == want.head_hidden;
  if (!ok)
    throw ConfigError(
        "checkpoint was built with different model dimensions than the config; "
        "use a matching config or a fresh out directory");
}

struct ScoreSummary {
  double p1 = 0.0, p2 = 0.0, pckh = 0.0;
};

inline ScoreSummary score_dataset(const GeneratorModel& g, const Dataset& ds,
                                  const SkeletonTopology& topo) {
  std::vector<Pose3D> p3, g3;
  std::vector<Pose2D> p2, g2;
  for (const auto& s : ds.samples) {
    if (!s.pose3d) continue;
    PosePrediction pr = predict_sample(g, s);
    p3.push_back(pr.p3);
    p2.push_back(pr.px);
    g3.push_back(*s.pose3d);
    g2.push_back(s.pose2d);
  }
  if (p3.empty()) throw MissingLabels("dataset has no 3D labels to score against");
  ScoreSummary out;
  out.p1 = mpjpe(p3, g3, topo.root);
  out.p2 = mpjpe_p2(p3, g3);
  out.pckh = pckh_2d(p2, g2, topo);
  return out;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw CountMismatch("median of an empty set");
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::optional<double> last_val_mpjpe(const TrainHistory& h) {
  for (auto it = h.records.rbegin(); it != h.records.rend(); ++it)
    if (it->val_mpjpe) return it->val_mpjpe;
  return std::nullopt;
}

// ------ gen-data ------

inline int cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log) {
  SkeletonTopology topo = default_topology();
  AnthropometricModel model = default_model(topo);
  RunPaths rp(cfg.out_dir);
  detail::ensure_dir(rp.data_dir());
  struct Job {
    DomainSpec spec;
    long train_n, test_n;
  };
  const Job jobs[] = {{lab_domain(), cfg.lab_train, cfg.lab_test},
                      {wild_domain(), cfg.wild_train, cfg.wild_test},
                      {xfer_domain(), cfg.xfer_train, cfg.xfer_test}};
  for (const Job& job : jobs) {
    const std::pair<const char*, long> splits[] = {{"train", job.train_n}, {"test", job.test_n}};
    for (const auto& [split, n] : splits) {
      uint64_t seed = mix_seed(cfg.data_seed, job.spec.name + "-" + split);
      Dataset ds = generate_dataset(job.spec, model, topo, n, seed);
      std::string path = rp.dataset(job.spec.name, split);
      save_dataset(ds, path);
      log << path << ": n=" << n << " labels=" << (ds.has_3d ? "yes" : "no") << "\n";
    }
  }
  detail::write_text(rp.resolved("gen-data"), serialize_config(cfg));
  return kExitOk;
}

// ------ pretrain ------

inline int cmd_pretrain(const ExperimentConfig& cfg, std::ostream& log) {
  validate_config(cfg.pretrain);
  LoadedData data;
  if (int rc = load_train_data(cfg, data, log)) return rc;
  RunPaths rp(cfg.out_dir);
  ModelConfig mc = sized_model(cfg, data.lab_train);

  GeneratorModel g = build_generator(mc, GenMode::EndToEnd);
  TrainHistory hist;
  bool resuming = detail::file_exists(rp.pretrain_ckpt());
  std::optional<Checkpoint> ck;
  if (resuming) {
    ck = Checkpoint::load(rp.pretrain_ckpt());
    check_same_model(load_model_config(*ck), mc);
    load_net(*ck, g.two_d);
    load_net(*ck, g.depth);
  }
  PretrainDriver drv(g, cfg.pretrain);
  if (resuming) {
    drv.done_2d = static_cast<long>(ck->get_scalar("pretrain/done_2d"));
    drv.done_joint = static_cast<long>(ck->get_scalar("pretrain/done_joint"));
    load_adam(*ck, drv.opt_2d, "opt2d");
    load_adam(*ck, drv.opt_joint, "optj");
    if (detail::file_exists(rp.pretrain_history()))
      hist = TrainHistory::load_csv(rp.pretrain_history());
    log << "resuming pretraining at " << drv.done_2d << "+" << drv.done_joint << " iterations\n";
  }

  if (drv.complete()) {
    log << "pretraining already complete (" << drv.done_2d << "+" << drv.done_joint
        << " iterations); leaving checkpoint untouched\n";
  } else {
    // A resumed run keeps the iteration numbering of the recorded history, so
    // configs that would renumber it (changing the 2D phase length after joint
    // training began) are refused rather than silently corrupting the log.
    if (!hist.records.empty() && drv.next_iteration() <= hist.records.back().iteration)
      throw ConfigError(
          "resume would collide with recorded history iterations; "
          "use a fresh out directory for a different phase split");
    auto save_state = [&] {
      Checkpoint out;
      save_generator(out, mc, g);
      out.put_scalar("pretrain/done_2d", static_cast<double>(drv.done_2d));
      out.put_scalar("pretrain/done_joint", static_cast<double>(drv.done_joint));
      save_adam(out, drv.opt_2d, "opt2d");
      save_adam(out, drv.opt_joint, "optj");
      out.save(rp.pretrain_ckpt());
      hist.save_csv(rp.pretrain_history());
    };
    // Checkpoint every validation interval so an interrupted run loses at
    // most one chunk of work.
    const long chunk = cfg.pretrain.val_every > 0 ? cfg.pretrain.val_every : 200;
    while (!drv.complete()) {
      drv.run_chunk(chunk, data.lab_train, data.wild_train, &data.xfer_train, data.topo, hist);
      save_state();
    }
  }
  if (auto v = last_val_mpjpe(hist))
    log << "final validation MPJPE: " << format_double(*v) << " mm\n";
  detail::write_text(rp.resolved("pretrain"), serialize_config(cfg));
  return kExitOk;
}

// ------ train-adv ------

inline int cmd_train_adv(const ExperimentConfig& cfg, std::ostream& log) {
  Variant v = variant_spec(cfg.variant);
  if (!v.discriminator) {
    log << "variant " << v.name
        << " has no adversarial stage; the ablate command covers it as the pose-only arm\n";
    return kExitUsage;
  }
  validate_config(cfg.adv);
  LoadedData data;
  if (int rc = load_train_data(cfg, data, log)) return rc;
  RunPaths rp(cfg.out_dir);
  ModelConfig mc = sized_model(cfg, data.lab_train);

  ModelSet set = make_variant(mc, cfg.variant);
  if (v.pretrain) {
    if (!detail::file_exists(rp.pretrain_ckpt()))
      return detail::missing_artifact(log, "pretrain checkpoint " + rp.pretrain_ckpt(),
                                      "run pretrain first");
    Checkpoint ck = Checkpoint::load(rp.pretrain_ckpt());
    check_same_model(load_model_config(ck), mc);
    load_net(ck, set.g.two_d);
    load_net(ck, set.g.depth);
  }

  AdvResult res = adversarial_train(set.g, *set.d, data.lab_train, data.wild_train,
                                    &data.xfer_train, data.topo, cfg.adv);

  std::string dir = rp.adv_dir(cfg.variant, cfg.adv.seed);
  detail::ensure_dir(dir);
  {
    Checkpoint out;
    save_generator(out, mc, set.g);
    out.save(dir + "/g.ckpt");
  }
  {
    Checkpoint out;
    save_discriminator(out, mc, *set.d);
    out.save(dir + "/d.ckpt");
  }
  res.history.save_csv(dir + "/history.csv");
  detail::write_text(dir + "/config.train-adv.cfg", serialize_config(cfg));
  log << "D steps: " << res.d_steps << ", G steps: " << res.g_steps << "\n";
  if (auto val = last_val_mpjpe(res.history))
    log << "final validation MPJPE: " << format_double(*val) << " mm\n";
  return kExitOk;
}

// ------ eval ------

struct EvalOptions {
  std::string ckpt;  // default: the configured variant/seed's adversarial generator
  std::string data;  // default: the xfer test split
  std::string name = "eval";
  bool echo_gt = false;
};

inline int cmd_eval(const ExperimentConfig& cfg, EvalOptions opt, std::ostream& log) {
  RunPaths rp(cfg.out_dir);
  if (opt.data.empty()) opt.data = rp.dataset("xfer", "test");
  if (opt.ckpt.empty()) opt.ckpt = rp.adv_dir(cfg.variant, cfg.adv.seed) + "/g.ckpt";
  if (opt.name.empty() || opt.name.find('/') != std::string::npos)
    throw ConfigError("eval name must be a bare file stem");
  if (!detail::file_exists(opt.data))
    return detail::missing_artifact(log, "dataset " + opt.data, "run gen-data first");
  Dataset ds = load_dataset(opt.data);
  SkeletonTopology topo = default_topology();
  if (ds.p != topo.joint_count)
    throw ConfigError("dataset joint count does not match the skeleton");
  if (!ds.has_3d) {
    log << "dataset " << opt.data << " carries no 3D labels; nothing to score against\n";
    return kExitUsage;
  }

  std::vector<Pose3D> preds3, gts3;
  std::vector<Pose2D> preds2, gts2;
  std::string label;
  if (opt.echo_gt) {
    // Ground truth scored against itself: exercises the whole metric pipeline
    // and must come out with zero error.
    label = "echo-gt";
    for (const auto& s : ds.samples) {
      preds3.push_back(*s.pose3d);
      preds2.push_back(s.pose2d);
    }
  } else {
    if (!detail::file_exists(opt.ckpt))
      return detail::missing_artifact(log, "generator checkpoint " + opt.ckpt,
                                      "run train-adv or pretrain first");
    Checkpoint ck = Checkpoint::load(opt.ckpt);
    GeneratorModel g = load_generator(ck);
    if (g.img_h != ds.img_h || g.img_w != ds.img_w || g.p != ds.p)
      throw ConfigError("checkpoint image/joint sizes differ from the dataset");
    label = cfg.variant;
    for (const auto& s : ds.samples) {
      PosePrediction pr = predict_sample(g, s);
      preds3.push_back(pr.p3);
      preds2.push_back(pr.px);
    }
  }
  for (const auto& s : ds.samples) {
    gts3.push_back(*s.pose3d);
    gts2.push_back(s.pose2d);
  }

  MetricsReport r = compute_metrics(preds3, gts3, preds2, gts2, topo, label, cfg.adv.seed);
  if (!r.valid()) throw NonFiniteValue("evaluation produced an invalid metrics report");
  detail::ensure_dir(rp.eval_dir());
  detail::write_text(rp.eval_dir() + "/" + opt.name + ".txt", r.to_text());
  detail::write_text(rp.eval_dir() + "/" + opt.name + ".csv",
                     MetricsReport::csv_header() + "\n" + r.csv_row() + "\n");
  detail::write_text(rp.eval_dir() + "/" + opt.name + ".cfg", serialize_config(cfg));
  log << "samples: " << r.samples << "\n";
  log << "MPJPE: " << format_double(r.mpjpe_p1) << " mm (aligned " << format_double(r.mpjpe_p2)
      << " mm), PCKh@0.5: " << format_double(r.pckh05) << "%\n";
  return kExitOk;
}

// ------ ablate ------

struct AblationRow {
  std::string variant;
  uint64_t seed = 0;
  bool ok = false;
  double xfer_p1 = 0.0, xfer_p2 = 0.0, lab_p1 = 0.0, l_pose = 0.0, l_g = 0.0;
  std::optional<double> l_d;
};

inline int cmd_ablate(const ExperimentConfig& cfg, std::ostream& log) {
  validate_config(cfg.pretrain);
  validate_config(cfg.adv);
  if (cfg.seeds.empty()) throw ConfigError("ablation needs a non-empty seed list");
  LoadedData data;
  if (int rc = load_train_data(cfg, data, log)) return rc;
  RunPaths rp(cfg.out_dir);
  for (const char* d : {"lab", "xfer"})
    if (!detail::file_exists(rp.dataset(d, "test")))
      return detail::missing_artifact(log, "dataset " + rp.dataset(d, "test"),
                                      "run gen-data first");
  Dataset lab_test = load_dataset(rp.dataset("lab", "test"));
  Dataset xfer_test = load_dataset(rp.dataset("xfer", "test"));

  // All pretraining-based arms start from one shared artifact.
  if (!detail::file_exists(rp.pretrain_ckpt())) {
    log << "no pretrain checkpoint yet; running pretraining first\n";
    if (int rc = cmd_pretrain(cfg, log)) return rc;
  }
  Checkpoint pre = Checkpoint::load(rp.pretrain_ckpt());
  ModelConfig mc = sized_model(cfg, data.lab_train);
  check_same_model(load_model_config(pre), mc);
  detail::ensure_dir(rp.ablate_dir());

  std::vector<AblationRow> rows;
  for (const std::string& vn : variant_names()) {
    for (uint64_t s : cfg.seeds) {
      AblationRow row;
      row.variant = vn;
      row.seed = s;
      try {
        ModelConfig mcr = mc;
        mcr.seed = mix_seed(cfg.model.seed, "init", s);
        AdvConfig ac = cfg.adv;
        ac.seed = s;
        ModelSet set = make_variant(mcr, vn);
        if (set.variant.pretrain) {
          load_net(pre, set.g.two_d);
          load_net(pre, set.g.depth);
        }
        TrainHistory hist;
        if (!set.variant.discriminator) {
          hist = baseline_train(set.g, data.lab_train, data.wild_train, &data.xfer_train,
                                data.topo, ac);
        } else {
          AdvResult res = adversarial_train(set.g, *set.d, data.lab_train, data.wild_train,
                                            &data.xfer_train, data.topo, ac);
          hist = std::move(res.history);
        }
        hist.save_csv(rp.ablate_dir() + "/" + vn + "_s" + std::to_string(s) + "_history.csv");
        const TrainRecord& last = hist.records.back();
        row.l_pose = last.l_pose.value_or(0.0);
        row.l_g = last.l_g.value_or(0.0);
        row.l_d = last.l_d;
        ScoreSummary xfer = score_dataset(set.g, xfer_test, data.topo);
        ScoreSummary lab = score_dataset(set.g, lab_test, data.topo);
        row.xfer_p1 = xfer.p1;
        row.xfer_p2 = xfer.p2;
        row.lab_p1 = lab.p1;
        row.ok = true;
        log << vn << " seed " << s << ": xfer MPJPE " << format_double(xfer.p1) << " mm, lab "
            << format_double(lab.p1) << " mm\n";
      } catch (const std::exception& e) {
        log << vn << " seed " << s << " failed: " << e.what() << "\n";
      }
      rows.push_back(row);
    }
  }

  std::ostringstream csv;
  csv << "variant,seed,status,xfer_mpjpe_p1,xfer_mpjpe_p2,lab_mpjpe_p1,final_l_pose,final_l_d,"
         "final_l_g\n";
  for (const AblationRow& r : rows) {
    csv << r.variant << "," << r.seed << "," << (r.ok ? "ok" : "failed");
    if (r.ok) {
      csv << "," << format_double(r.xfer_p1) << "," << format_double(r.xfer_p2) << ","
          << format_double(r.lab_p1) << "," << format_double(r.l_pose) << ",";
      if (r.l_d) csv << format_double(*r.l_d);
      csv << ",";
      // The pose-only arm has no adversarial objective, so those cells stay empty.
      if (r.l_d) csv << format_double(r.l_g);
    } else {
      csv << ",,,,,,";
    }
    csv << "\n";
  }
  int ok_variants = 0;
  for (const std::string& vn : variant_names()) {
    std::vector<double> p1s, p2s, labs;
    for (const AblationRow& r : rows)
      if (r.ok && r.variant == vn) {
        p1s.push_back(r.xfer_p1);
        p2s.push_back(r.xfer_p2);
        labs.push_back(r.lab_p1);
      }
    if (p1s.empty()) continue;
    ok_variants++;
    csv << vn << ",median,ok," << format_double(median_of(p1s)) << ","
        << format_double(median_of(p2s)) << "," << format_double(median_of(labs)) << ",,,\n";
  }
  csv << kReferenceFooter << "\n";
  detail::write_text(rp.ablation_csv(), csv.str());
  detail::write_text(rp.resolved("ablate"), serialize_config(cfg));
  log << "wrote " << rp.ablation_csv() << " (" << ok_variants << "/"
      << variant_names().size() << " variants completed)\n";
  return ok_variants > 0 ? kExitOk : kExitUsage;
}

// ------ gradcheck ------

namespace detail {

// Central differences are invalid where a ReLU argument sits within the probe
// radius of its kink, so probe inputs are redrawn until every pre-activation
// clears a safety margin.
inline bool relu_preacts_clear(const DenseNet& net, const Mat& x, double margin) {
  Mat h = x;
  for (int l = 0; l < net.layers(); l++) {
    Mat z = (h * net.ws[l].value.transpose()).rowwise() + net.bs[l].value.row(0);
    if (net.spec.acts[l] == Act::Relu) {
      if (z.cwiseAbs().minCoeff() < margin) return false;
      h = z.cwiseMax(0.0);
    } else if (net.spec.acts[l] == Act::Sigmoid) {
      h = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    } else {
      h = z;
    }
  }
  return true;
}

}  // namespace detail

// Finite differences over every parameter entry need thousands of forward
// passes, so the audit runs on a miniature proxy of each architecture; the
// math being checked is size-independent.
inline int cmd_gradcheck(bool sabotage, std::ostream& log) {
  ModelConfig mc;
  mc.p = 4;
  mc.img_h = 8;
  mc.img_w = 8;
  mc.hm_h = 4;
  mc.hm_w = 4;
  mc.two_d_hidden = {16, 12};
  mc.depth_hidden = {14, 8};
  mc.embed_width = 8;
  mc.head_hidden = {8, 6};
  mc.seed = 9;
  const int img = mc.img_h * mc.img_w;
  const int phw = mc.p * mc.hm_h * mc.hm_w;

  Rng rng(mix_seed(17, "gradcheck"));
  double worst = 0.0;
  bool all_ok = true;
  auto report = [&](const std::string& label, double rel) {
    bool ok = rel < 1e-6;
    all_ok = all_ok && ok;
    worst = std::max(worst, rel);
    log << label << " rel_err=" << format_double(rel) << (ok ? " ok" : " FAIL") << "\n";
  };
  const double kKinkMargin = 1e-2;  // 100x the probe radius
  auto check_net = [&](const std::string& label, DenseNet& net, int in_width, bool corrupt) {
    Mat x(3, in_width);
    for (int tries = 0;; tries++) {
      for (long i = 0; i < x.size(); i++) x(i) = rng.uniform(-1.0, 1.0);
      if (detail::relu_preacts_clear(net, x, kKinkMargin)) break;
      if (tries > 1000) throw DegenerateConfiguration("no kink-free probe point found");
    }
    Mat target(3, net.spec.widths.back());
    for (long i = 0; i < target.size(); i++) target(i) = rng.uniform(0.1, 0.9);
    auto loss = [&](const Mat& y) { return (y - target).squaredNorm(); };
    auto dloss = [&](const Mat& y) {
      Mat gr = 2.0 * (y - target);
      if (corrupt) gr(0, 0) += 0.05;  // deliberate analytic-gradient bug
      return gr;
    };
    report(label, grad_check(net, x, loss, dloss));
  };

  GeneratorModel g = build_generator(mc, GenMode::EndToEnd);
  check_net("generator/2d", g.two_d, img, sabotage);
  check_net("generator/depth", g.depth, phw + g.tap_width, false);
  DiscriminatorModel full = build_discriminator(mc, true, true, true);
  check_net("discriminator/image-embed", *full.image_embed, img, false);
  check_net("discriminator/map-embed", *full.map_embed, 2 * phw, false);
  check_net("discriminator/geo-embed", *full.geo_embed, 6 * mc.p * mc.p, false);
  check_net("discriminator/head-3src", full.head, 3 * mc.embed_width, false);
  DiscriminatorModel two = build_discriminator(mc, true, true, false);
  check_net("discriminator/head-2src", two.head, 2 * mc.embed_width, false);

  // Whole fake pathway: generator -> prediction encoding -> discriminator,
  // plus the pose terms, differentiated through one tape.
  {
    GeneratorModel cg = build_generator(mc, GenMode::EndToEnd);
    DiscriminatorModel cd = build_discriminator(mc, true, true, true);
    const int B = 2;
    TrainBatch b;
    b.images = Mat(B, img);
    for (int tries = 0;; tries++) {
      for (long i = 0; i < b.images.size(); i++) b.images(i) = rng.uniform(0.0, 1.0);
      Mat tap;
      Mat maps = cg.two_d.infer(b.images, &tap);
      Mat din(B, maps.cols() + tap.cols());
      din << maps, tap;
      if (detail::relu_preacts_clear(cg.two_d, b.images, kKinkMargin) &&
          detail::relu_preacts_clear(cg.depth, din, kKinkMargin))
        break;
      if (tries > 1000) throw DegenerateConfiguration("no kink-free probe point found");
    }
    b.gt_maps = Mat(B, phw);
    for (long i = 0; i < b.gt_maps.size(); i++) b.gt_maps(i) = rng.uniform(0.05, 0.95);
    b.gt_depths = Mat(B, mc.p);
    for (long i = 0; i < b.gt_depths.size(); i++) b.gt_depths(i) = rng.uniform(-200.0, 200.0);
    b.labeled = Vec::Ones(B);
    b.labeled(1) = 0.0;
    b.gt_depths.row(1).setZero();
    b.cams = Mat(B, 4);
    for (int i = 0; i < B; i++) {
      b.cams(i, 0) = 24.0;
      b.cams(i, 1) = 24.0;
      b.cams(i, 2) = (mc.img_w - 1) / 2.0;
      b.cams(i, 3) = (mc.img_h - 1) / 2.0;
    }
    const double lambda = 0.5;
    std::vector<Tensor*> all = cg.params();
    for (Tensor* t : cd.params()) all.push_back(t);
    auto compute = [&] {
      for (Tensor* t : all) t->grad.setZero();
      Tape tape;
      GLossNodes n = g_loss_tape(cg, cd, tape, b, lambda);
      tape.backward(n.loss);
    };
    auto value = [&] { return loss_g_value(cg, cd, b, lambda); };
    report("chain/generator-encode-discriminator", grad_check(all, compute, value));
  }

  log << "max rel_err " << format_double(worst) << (all_ok ? "; gradcheck ok" : "; gradcheck FAILED")
      << "\n";
  return all_ok ? kExitOk : kExitUsage;
}

// ------ report ------

inline int cmd_report(const ExperimentConfig& cfg, std::ostream& log) {
  RunPaths rp(cfg.out_dir);
  std::ostringstream body;
  bool any = false;
  body << "run directory: " << cfg.out_dir << "\n";

  if (detail::file_exists(rp.pretrain_history())) {
    any = true;
    TrainHistory h = TrainHistory::load_csv(rp.pretrain_history());
    body << "\npretraining: " << h.records.size() << " recorded iterations";
    if (auto v = last_val_mpjpe(h)) body << ", final validation MPJPE " << format_double(*v) << " mm";
    body << "\n";
  }

  if (detail::file_exists(rp.ablation_csv())) {
    any = true;
    std::map<std::string, double> med;
    for (const std::string& line : detail::split(detail::read_text(rp.ablation_csv()), '\n')) {
      if (line.empty() || line[0] == '#') continue;
      auto cells = detail::split(line, ',');
      if (cells.size() >= 4 && cells[1] == "median" && !cells[3].empty())
        med[cells[0]] = std::stod(cells[3]);
    }
    body << "\nablation medians (transfer-domain MPJPE, mm):\n";
    double base = med.count("Baseline") ? med.at("Baseline") : 0.0;
    for (const std::string& vn : variant_names()) {
      auto it = med.find(vn);
      if (it == med.end()) continue;
      body << "  " << vn << " " << format_double(it->second);
      if (base > 0.0 && vn != "Baseline") {
        double pct = std::round(1000.0 * (it->second - base) / base) / 10.0;
        body << " (" << (pct >= 0 ? "+" : "") << format_double(pct) << "% vs Baseline)";
      }
      body << "\n";
    }
    body << kReferenceFooter << "\n";
  }

  if (std::filesystem::exists(rp.eval_dir())) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(rp.eval_dir()))
      if (e.path().extension() == ".txt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (!files.empty()) {
      any = true;
      body << "\nevaluations:\n";
      for (const auto& p : files) {
        MetricsReport r = MetricsReport::from_text(detail::read_text(p.string()));
        body << "  " << p.stem().string() << ": MPJPE " << format_double(r.mpjpe_p1)
             << " mm (aligned " << format_double(r.mpjpe_p2) << " mm), PCKh@0.5 "
             << format_double(r.pckh05) << "%\n";
      }
    }
  }

  if (!any) {
    log << "nothing to report in " << cfg.out_dir
        << "; run gen-data/pretrain/train-adv/eval/ablate first\n";
    return kExitMissing;
  }
  detail::write_text(rp.summary_txt(), body.str());
  log << body.str();
  return kExitOk;
}

// ------ process-level glue ------

// Worker-thread cap for the linear algebra backend; single-threaded unless
// ADVPOSE_THREADS raises it.
inline void apply_thread_cap() {
  int n = 1;
  if (const char* env = std::getenv("ADVPOSE_THREADS"); env && *env) {
    n = std::atoi(env);
    if (n < 1) n = 1;
  }
  Eigen::setNbThreads(n);
}

inline int run_command(std::ostream& err, const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const BadMagic& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const VersionMismatch& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CountMismatch& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace advpose
