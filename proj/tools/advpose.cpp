// Command-line front end. Subcommands are implemented in the experiment header;
// this file only does argument parsing and exit-code mapping.
#include <CLI11.hpp>
#include <advpose/experiment.hpp>

#include <iostream>
#include <string>

using namespace advpose;

int main(int argc, char** argv) {
  CLI::App app{"adversarial 3D pose estimation workbench"};
  app.require_subcommand(1);

  std::string config_path, variant, out_dir;
  long long seed = -1;
  EvalOptions eopt;
  bool sabotage = false;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "config file with key = value lines");
    c->add_option("--seed", seed, "override the pretraining/adversarial run seed");
    c->add_option("--variant", variant,
                  "model variant: Baseline, Map, Geo, Full, Full-fix2D, Full-no-pretrain");
    c->add_option("--out", out_dir, "run directory (default runs/exp)");
  };

  CLI::App* c_gen = app.add_subcommand("gen-data", "generate the lab/wild/xfer datasets");
  CLI::App* c_pre = app.add_subcommand("pretrain", "two-phase generator pretraining (resumable)");
  CLI::App* c_adv = app.add_subcommand("train-adv", "adversarial training for one variant");
  CLI::App* c_eval = app.add_subcommand("eval", "score a generator checkpoint on a dataset");
  CLI::App* c_abl = app.add_subcommand("ablate", "train every variant over the seed list");
  CLI::App* c_grad = app.add_subcommand("gradcheck", "finite-difference audit of every architecture");
  CLI::App* c_rep = app.add_subcommand("report", "summarize the artifacts in a run directory");
  for (CLI::App* c : {c_gen, c_pre, c_adv, c_eval, c_abl, c_grad, c_rep}) add_common(c);
  c_eval->add_option("--ckpt", eopt.ckpt,
                     "generator checkpoint (default: the configured variant's adversarial run)");
  c_eval->add_option("--data", eopt.data, "dataset file (default: the xfer test split)");
  c_eval->add_option("--name", eopt.name, "output name under <out>/eval/");
  c_eval->add_flag("--echo-gt", eopt.echo_gt,
                   "score the ground truth against itself (pipeline self-test)");
  c_grad->add_flag("--sabotage", sabotage,
                   "corrupt one analytic gradient to prove the checker can fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  apply_thread_cap();
  return run_command(std::cerr, [&]() -> int {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path);
    if (seed >= 0) {
      cfg.pretrain.seed = static_cast<uint64_t>(seed);
      cfg.adv.seed = static_cast<uint64_t>(seed);
    }
    if (!variant.empty()) cfg.variant = variant;
    if (!out_dir.empty()) cfg.out_dir = out_dir;

    if (app.got_subcommand(c_gen)) return cmd_gen_data(cfg, std::cout);
    if (app.got_subcommand(c_pre)) return cmd_pretrain(cfg, std::cout);
    if (app.got_subcommand(c_adv)) return cmd_train_adv(cfg, std::cout);
    if (app.got_subcommand(c_eval)) return cmd_eval(cfg, eopt, std::cout);
    if (app.got_subcommand(c_abl)) return cmd_ablate(cfg, std::cout);
    if (app.got_subcommand(c_grad)) return cmd_gradcheck(sabotage, std::cout);
    if (app.got_subcommand(c_rep)) return cmd_report(cfg, std::cout);
    return kExitUsage;
  });
}
