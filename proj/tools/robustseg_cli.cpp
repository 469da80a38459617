// SPDX-License-Identifier: Apache-2.0
//
// robustseg: gen-data | train-teacher | train-student | evaluate | report
// Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O or format error,
// 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "robustseg/robustseg.hpp"

namespace fs = std::filesystem;
using namespace robustseg;

namespace {

struct ConfigArgs {
  std::string config_file;
  std::vector<std::string> overrides;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("-c,--config", a.config_file, "flat key = value config file");
  cmd->add_option("--set", a.overrides, "override, key=value (repeatable)");
}

RunConfig resolve_config(const ConfigArgs& a) {
  RunConfig cfg;
  if (!a.config_file.empty()) cfg = load_config_file(a.config_file);
  for (const auto& o : a.overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"robust multi-modal segmentation distillation"};
  app.require_subcommand(1);

  ConfigArgs gen_cfg, teacher_cfg, student_cfg, eval_cfg;
  std::string run_dir, teacher_ckpt, resume, checkpoint, split = "val", out_dir, out_file;
  std::size_t stop_after = 0;
  std::vector<std::string> report_files, report_names;
  bool renormalize = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic train/val splits");
  add_config_args(gen, gen_cfg);

  auto* tt = app.add_subcommand("train-teacher", "train the teacher on all modalities (CE only)");
  add_config_args(tt, teacher_cfg);
  tt->add_option("--run-dir", run_dir, "run directory (default <run.root>/<timestamp>-<confighash>)");
  tt->add_option("--resume", resume, "continue from a teacher_last.rsck checkpoint");
  tt->add_option("--stop-after", stop_after, "stop after this many steps");

  auto* ts = app.add_subcommand("train-student", "distill a student under modality dropout");
  add_config_args(ts, student_cfg);
  ts->add_option("--teacher", teacher_ckpt, "teacher checkpoint")->required();
  ts->add_option("--run-dir", run_dir, "run directory (default <run.root>/<timestamp>-<confighash>)");
  ts->add_option("--resume", resume, "continue from a student_last.rsck checkpoint");
  ts->add_option("--stop-after", stop_after, "stop after this many steps");

  auto* ev = app.add_subcommand("evaluate", "EMM / RMM / NM evaluation of a checkpoint");
  add_config_args(ev, eval_cfg);
  ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  ev->add_option("--split", split, "dataset split");
  ev->add_option("--out", out_dir, "output directory (default: checkpoint directory)");
  ev->add_flag("--renormalize", renormalize, "divide subset weights by 1 - p^M");

  auto* rp = app.add_subcommand("report", "side-by-side comparison of evaluation reports");
  rp->add_option("reports", report_files, "report files")->required();
  rp->add_option("--names", report_names, "column names, one per report");
  rp->add_option("--out", out_file, "write the table here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (gen->parsed()) {
    const RunConfig cfg = resolve_config(gen_cfg);
    generate_dataset(cfg.scene, cfg.train_count, cfg.train_split, cfg.data_root);
    generate_dataset(cfg.scene, cfg.val_count, cfg.val_split, cfg.data_root);
    std::cout << "wrote " << cfg.train_count << " " << cfg.train_split << " and " << cfg.val_count << " "
              << cfg.val_split << " samples to " << cfg.data_root << "\n";
    return 0;
  }
  if (tt->parsed() || ts->parsed()) {
    const RunConfig cfg = resolve_config(tt->parsed() ? teacher_cfg : student_cfg);
    const fs::path dir = make_run_dir(cfg, run_dir);
    TrainOptions opts;
    opts.resume = resume;
    opts.stop_after = stop_after;
    opts.progress = &std::cerr;
    const TrainOutcome out =
        tt->parsed() ? train_teacher(cfg, dir, opts) : train_student(cfg, teacher_ckpt, dir, opts);
    std::cout << "run_dir\t" << dir.string() << "\n"
              << "steps\t" << out.steps << "\n"
              << "checkpoint\t" << (out.stopped_early ? out.last_checkpoint : out.final_checkpoint).string() << "\n"
              << "best\t" << out.best_checkpoint.string() << "\n"
              << "best_score\t" << format_value(out.best_score) << "\n"
              << "checksum\t" << hex64(out.checksum) << "\n";
    return 0;
  }
  if (ev->parsed()) {
    RunConfig cfg = resolve_config(eval_cfg);
    if (renormalize) cfg.eval.renormalize = true;
    const Dataset ds = load_dataset_split(cfg, split);
    const fs::path dir = out_dir.empty() ? fs::path(checkpoint).parent_path() : fs::path(out_dir);
    const auto out = evaluate_checkpoint(checkpoint, ds, cfg.eval, dir);
    std::cout << report_text(out.drop);
    std::cout << "wrote\t" << out.drop_path.string() << "\nwrote\t" << out.zero_fill_path.string() << "\n";
    return 0;
  }
  if (rp->parsed()) {
    std::vector<EvalReport> reports;
    for (const auto& f : report_files) reports.push_back(read_report(f));
    const std::string table = report_compare(reports, report_names).to_text();
    if (out_file.empty()) {
      std::cout << table;
    } else {
      std::ofstream os(out_file, std::ios::binary | std::ios::trunc);
      if (!os) throw IoError("cannot open " + out_file);
      os << table;
    }
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CompatibilityError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
