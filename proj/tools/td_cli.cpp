// td: pretrain a teacher, distill students, sweep configurations, analyze representations.

#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "td/td.hpp"

namespace {

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_force = true) {
  cmd->add_option("--config", c.config, "JSON config file with flat dotted keys");
  cmd->add_option("--out", c.out, "output directory")->required();
  cmd->add_option("--set", c.sets, "override a config key, e.g. --set train.k=2");
  cmd->add_option("--seed", c.seed, "seed for this run (train.seed; teacher.seed for pretrain)");
  if (with_force) cmd->add_flag("--force", c.force, "overwrite existing outputs");
}

td::ExperimentConfig resolve(const Common& c, const std::string& seed_key) {
  td::ExperimentConfig cfg = c.config.empty() ? td::ExperimentConfig{} : td::ExperimentConfig::from_file(c.config);
  for (const auto& s : c.sets) cfg.set_from_string(s);
  if (c.seed) cfg.set(seed_key, *c.seed);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Talking-model distillation experiments"};
  app.require_subcommand(1);

  Common pre, dis, swp, ana, gen;
  std::string teacher_ckpt, student_ckpt;
  std::size_t jobs = 1;

  auto* c_pre = app.add_subcommand("pretrain", "train the teacher on the all-population task");
  add_common(c_pre, pre);

  auto* c_dis = app.add_subcommand("distill", "train a student with scratch, LD, FD, FitNet, Hybrid or TD");
  add_common(c_dis, dis);
  c_dis->add_option("--teacher", teacher_ckpt, "teacher checkpoint (defaults to teacher.checkpoint)");

  auto* c_swp = app.add_subcommand("sweep", "run a grid of cells over seeds and aggregate");
  add_common(c_swp, swp);
  c_swp->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);

  auto* c_ana = app.add_subcommand("analyze", "CKA grids between teacher, student and message space");
  add_common(c_ana, ana, false);
  c_ana->add_option("--teacher", teacher_ckpt, "teacher checkpoint")->required();
  c_ana->add_option("--student", student_ckpt, "student checkpoint written by distill")->required();

  auto* c_gen = app.add_subcommand("gen-data", "write task splits as tab-separated columns");
  add_common(c_gen, gen);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*c_pre) {
      auto cfg = resolve(pre, "teacher.seed");
      auto r = td::experiment::cmd_pretrain(cfg, pre.out, pre.force);
      std::cout << "teacher eval " << r.eval_metric << " -> " << r.checkpoint.string() << '\n';
    } else if (*c_dis) {
      auto cfg = resolve(dis, "train.seed");
      if (teacher_ckpt.empty()) teacher_ckpt = cfg.get<std::string>("teacher.checkpoint");
      if (teacher_ckpt.empty()) throw td::ConfigError("no teacher checkpoint (--teacher or teacher.checkpoint)");
      cfg.set("teacher.checkpoint", teacher_ckpt);
      auto r = td::experiment::cmd_distill(cfg, teacher_ckpt, dis.out, dis.force);
      std::cout << r.metric_name << " final " << r.final_metric << " best " << r.best_metric << '\n';
    } else if (*c_swp) {
      auto cfg = resolve(swp, "train.seed");
      auto r = td::experiment::cmd_sweep(cfg, swp.out, jobs, swp.force);
      td::experiment::write_aggregate(std::cout, r.cells, r.metric);
    } else if (*c_ana) {
      auto cfg = resolve(ana, "train.seed");
      auto grids = td::experiment::cmd_analyze(cfg, teacher_ckpt, student_ckpt, ana.out);
      td::analysis::write_summary(std::cout, grids);
    } else if (*c_gen) {
      auto cfg = resolve(gen, "synthetic.seed");
      for (const auto& p : td::experiment::cmd_gen_data(cfg, gen.out, gen.force)) std::cout << p.string() << '\n';
    }
  } catch (const td::Error& e) {
    std::cerr << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
