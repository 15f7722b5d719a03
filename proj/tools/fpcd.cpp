// fpcd command-line driver: dataset generation, training, distillation,
// evaluation, and the spectrum/parameter analysis commands.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fpcd/data.hpp"
#include "fpcd/harness.hpp"

namespace {

using fpcd::harness::Mode;
using fpcd::harness::RunConfig;

struct CommonTrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string dataset;
  std::string out;
  std::string teacher;
  uint64_t seed = 0;
};

void add_train_options(CLI::App* cmd, CommonTrainArgs& a, bool needs_teacher) {
  cmd->add_option("--config", a.config, "JSON run configuration");
  cmd->add_option("--set", a.sets, "override a config key, e.g. --set optim.lr=0.02");
  cmd->add_option("--dataset", a.dataset, "dataset directory (overrides config)");
  cmd->add_option("--out", a.out, "output directory (overrides config)");
  if (needs_teacher)
    cmd->add_option("--teacher", a.teacher, "teacher checkpoint directory (overrides config)");
  cmd->add_option("--seed", a.seed, "run seed")->required();
}

RunConfig build_config(const CommonTrainArgs& a) {
  RunConfig c = fpcd::harness::load_config(a.config, a.sets, a.seed);
  if (!a.dataset.empty()) c.dataset = a.dataset;
  if (!a.out.empty()) c.out_dir = a.out;
  if (!a.teacher.empty()) c.teacher_checkpoint = a.teacher;
  return c;
}

void report(const fpcd::harness::TrainResult& r) {
  std::printf("final val top1: %.4f\n", r.final_val_top1);
  std::printf("checkpoint: %s\n", r.checkpoint_dir.c_str());
  std::printf("metrics: %s\n", r.metrics_path.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"frequency-domain knowledge distillation for synthetic video"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic video dataset");
  fpcd::data::DatasetConfig dcfg;
  std::string gen_out, regime = "temporal";
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--regime", regime, "temporal | scene");
  gen->add_option("--classes", dcfg.num_classes, "number of classes");
  gen->add_option("--clips-per-class", dcfg.clips_per_class, "clips per class");
  gen->add_option("--frames", dcfg.t, "frames per clip");
  gen->add_option("--height", dcfg.h, "frame height");
  gen->add_option("--width", dcfg.w, "frame width");
  gen->add_option("--sigma", dcfg.sigma, "pixel noise std");
  gen->add_option("--seed", dcfg.master_seed, "dataset master seed")->required();

  CommonTrainArgs teacher_args, baseline_args, distill_args;
  auto* tt = app.add_subcommand("train-teacher", "train the teacher network");
  add_train_options(tt, teacher_args, false);
  auto* tb = app.add_subcommand("train-baseline", "train the student without distillation");
  add_train_options(tb, baseline_args, false);
  auto* td = app.add_subcommand("distill", "train the student with distillation");
  add_train_options(td, distill_args, true);
  std::string method = "fpcd";
  td->add_option("--method", method, "fpcd | simple-kd");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string ev_ckpt, ev_dataset, ev_split = "test", ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--dataset", ev_dataset, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train | val | test");
  ev->add_option("--out", ev_out, "optional CSV output path");

  // analyze-spectrum
  auto* as = app.add_subcommand("analyze-spectrum", "per-stage temporal band energy for a clip");
  std::string as_ckpt, as_clip, as_out;
  as->add_option("--checkpoint", as_ckpt, "checkpoint directory")->required();
  as->add_option("--clip", as_clip, "clip tensor file")->required();
  as->add_option("--out", as_out, "output directory")->required();

  // analyze-params
  auto* ap = app.add_subcommand("analyze-params", "kernel frequency distributions and KL gaps");
  std::string ap_teacher, ap_student, ap_baseline, ap_out;
  int64_t ap_bins = 32;
  uint64_t ap_seed = 0;
  ap->add_option("--teacher", ap_teacher, "teacher checkpoint")->required();
  ap->add_option("--student", ap_student, "student checkpoint")->required();
  ap->add_option("--baseline", ap_baseline, "optional baseline student checkpoint");
  ap->add_option("--out", ap_out, "output directory")->required();
  ap->add_option("--bins", ap_bins, "frequency bins");
  ap->add_option("--seed", ap_seed, "kernel sampling seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      dcfg.regime = fpcd::data::regime_from_string(regime);
      fpcd::data::generate_dataset(dcfg, gen_out);
      std::printf("wrote dataset to %s\n", gen_out.c_str());
    } else if (tt->parsed()) {
      report(fpcd::harness::train_teacher(build_config(teacher_args)));
    } else if (tb->parsed()) {
      report(fpcd::harness::train_student(build_config(baseline_args),
                                          Mode::train_student_baseline));
    } else if (td->parsed()) {
      if (method != "fpcd" && method != "simple-kd")
        throw fpcd::ConfigError("distill: method must be fpcd or simple-kd");
      Mode m = method == "fpcd" ? Mode::distill_fpcd : Mode::distill_simple_kd;
      report(fpcd::harness::train_student(build_config(distill_args), m));
    } else if (ev->parsed()) {
      auto model = fpcd::harness::load_checkpoint(ev_ckpt);
      auto clips = fpcd::data::load_split(ev_dataset, fpcd::data::split_from_string(ev_split));
      auto r = fpcd::harness::evaluate(model, clips);
      std::printf("top1: %.4f\ntop5: %.4f\ncount: %lld\n", r.top1, r.top5,
                  static_cast<long long>(r.count));
      if (!ev_out.empty()) fpcd::harness::write_eval_csv(ev_out, r);
    } else if (as->parsed()) {
      fpcd::harness::analyze_spectrum(as_ckpt, as_clip, as_out);
      std::printf("wrote band energy and band reconstructions to %s\n", as_out.c_str());
    } else if (ap->parsed()) {
      auto r = fpcd::harness::analyze_params(ap_teacher, ap_student, ap_baseline, ap_out, ap_bins,
                                             ap_seed);
      std::printf("mean KL(student || teacher): %.6f\n", r.mean_kl_student);
      if (r.has_baseline)
        std::printf("mean KL(baseline || teacher): %.6f\n", r.mean_kl_baseline);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
