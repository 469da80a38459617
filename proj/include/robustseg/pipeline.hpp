// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-stage workflow: teacher trained with CE on all modalities, student
// trained under modality dropout with the distillation terms, evaluation of
// checkpoints into reports.
//
// Run directory contents for stage S (teacher or student):
//   S.rsck / S_best.rsck / S_last.rsck   checkpoints (+ .meta, + .optim for _last)
//   S_train.log   one row per step: step ce kl proto reg total subset (tabs)
//   S_val.log     epoch score
//   student_plan.log   step seed subset plan rrm_seed sigmas
//   config.cfg    canonical config snapshot

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "robustseg/checkpoint.hpp"
#include "robustseg/config.hpp"
#include "robustseg/distill_core.hpp"
#include "robustseg/errors.hpp"
#include "robustseg/hpdm.hpp"
#include "robustseg/metrics.hpp"
#include "robustseg/optimizer.hpp"
#include "robustseg/robustness_eval.hpp"
#include "robustseg/rrm.hpp"
#include "robustseg/seg_model.hpp"
#include "robustseg/subsets.hpp"
#include "robustseg/synth_data.hpp"

namespace robustseg {

namespace fs = std::filesystem;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline fs::path make_run_dir(const RunConfig& cfg, const fs::path& override_dir = {}) {
  fs::path dir = override_dir;
  if (dir.empty()) {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    dir = fs::path(cfg.run_root) / (std::string(stamp) + "-" + config_hash(cfg));
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

// --- checkpoint sidecar -------------------------------------------------------

struct CheckpointMeta {
  std::string stage;  // teacher | student
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string checksum;
  std::string teacher_id;  // student only
  double best_score = -1.0;
  std::string config_hash;
  std::string config;  // canonical text snapshot
};

inline void write_meta(const fs::path& path, const CheckpointMeta& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "stage\t" << m.stage << '\n'
     << "step\t" << m.step << '\n'
     << "epoch\t" << m.epoch << '\n'
     << "checksum\t" << m.checksum << '\n'
     << "teacher\t" << (m.teacher_id.empty() ? "-" : m.teacher_id) << '\n'
     << "best_score\t" << format_value(m.best_score) << '\n'
     << "config_hash\t" << m.config_hash << '\n'
     << "config\n"
     << m.config;
  if (!os) throw IoError("write failed: " + path.string());
}

inline CheckpointMeta read_meta(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  CheckpointMeta m;
  std::string line;
  bool in_config = false;
  while (std::getline(is, line)) {
    if (in_config) {
      m.config += line + "\n";
      continue;
    }
    if (line == "config") {
      in_config = true;
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path.string() + ": bad metadata line '" + line + "'");
    const std::string k = line.substr(0, tab), v = line.substr(tab + 1);
    try {
      if (k == "stage") m.stage = v;
      else if (k == "step") m.step = std::stoull(v);
      else if (k == "epoch") m.epoch = std::stoull(v);
      else if (k == "checksum") m.checksum = v;
      else if (k == "teacher") m.teacher_id = v == "-" ? "" : v;
      else if (k == "best_score") m.best_score = std::stod(v);
      else if (k == "config_hash") m.config_hash = v;
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad value for '" + k + "'");
    }
  }
  return m;
}

inline fs::path meta_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".meta"); }
inline fs::path optim_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".optim"); }

// --- data ---------------------------------------------------------------------

inline Dataset load_dataset_split(const RunConfig& cfg, const std::string& split) {
  if (!fs::exists(cfg.data_root)) throw IoError("dataset root not found: " + cfg.data_root);
  Dataset ds = load_split(cfg.data_root, split);
  if (ds.spec.num_classes != cfg.scene.num_classes || ds.spec.modalities != cfg.scene.modalities) {
    throw ConfigError("dataset " + cfg.data_root + " does not match data.num_classes / data.modalities");
  }
  return ds;
}

inline std::vector<const FeatureMap<float>*> input_ptrs(const ModalitySample& s, ModalityMask mask) {
  std::vector<const FeatureMap<float>*> in(s.modalities.size(), nullptr);
  for (std::size_t m = 0; m < s.modalities.size(); ++m) {
    if (has(mask, m)) in[m] = &s.modalities[m];
  }
  return in;
}

// Per-subset drop-semantics mIoU with each modality encoded once per sample.
inline std::vector<double> fast_emm(const SegModel<float>& model, const Dataset& ds,
                                    std::size_t limit = 0) {
  const std::size_t M = ds.num_modalities();
  const auto subsets = enumerate_subsets(M);
  std::vector<ConfusionMatrix> cms(subsets.size(), ConfusionMatrix(ds.spec.num_classes));
  const std::size_t n = limit ? std::min(limit, ds.size()) : ds.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ds.samples[i];
    std::vector<Pyramid<float>> pyr;
    for (std::size_t m = 0; m < M; ++m) pyr.push_back(model.encode(s.modalities[m], m));
    for (std::size_t k = 0; k < subsets.size(); ++k) {
      std::vector<const Pyramid<float>*> present;
      for (auto m : members(subsets[k])) present.push_back(&pyr[m]);
      const auto logits = model.decode(SegModel<float>::fuse(present), s.label.height, s.label.width);
      cms[k].add(argmax_labels(logits), s.label);
    }
  }
  std::vector<double> out;
  for (const auto& cm : cms) out.push_back(miou(cm).miou);
  return out;
}

inline double full_modality_miou(const SegModel<float>& model, const Dataset& ds, std::size_t limit = 0) {
  ConfusionMatrix cm(ds.spec.num_classes);
  const std::size_t n = limit ? std::min(limit, ds.size()) : ds.size();
  const ModalityMask full = full_mask(ds.num_modalities());
  for (std::size_t i = 0; i < n; ++i) {
    cm.add(argmax_labels(model.forward(input_ptrs(ds.samples[i], full)).logits), ds.samples[i].label);
  }
  return miou(cm).miou;
}

// --- logs -----------------------------------------------------------------------

inline std::string log_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Keeps header lines (non-numeric first column) and rows whose first column
// is <= `max_key`.
inline void truncate_log(const fs::path& path, std::size_t max_key) {
  if (!fs::exists(path)) return;
  std::ifstream is(path, std::ios::binary);
  std::string line, kept;
  while (std::getline(is, line)) {
    const std::string first = line.substr(0, line.find('\t'));
    if (first.empty() || first.find_first_not_of("0123456789") != std::string::npos) {
      kept += line + "\n";
      continue;
    }
    if (std::stoull(first) <= max_key) kept += line + "\n";
  }
  is.close();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot rewrite log " + path.string());
  os << kept;
}

class LogFile {
 public:
  LogFile(const fs::path& path, const std::string& header, bool append) {
    const bool exists = append && fs::exists(path);
    os_.open(path, std::ios::binary | (exists ? std::ios::app : std::ios::trunc));
    if (!os_) throw IoError("cannot open log " + path.string());
    if (!exists && !header.empty()) os_ << header << '\n';
  }
  void row(const std::vector<std::string>& cols) {
    for (std::size_t i = 0; i < cols.size(); ++i) os_ << (i ? "\t" : "") << cols[i];
    os_ << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

// --- training ---------------------------------------------------------------------

struct TrainOptions {
  fs::path resume;            // a *_last.rsck checkpoint to continue from
  std::size_t stop_after = 0; // stop once this many steps are done (0: run to the end)
  std::ostream* progress = nullptr;
};

struct TrainOutcome {
  fs::path final_checkpoint;  // empty when stopped early
  fs::path best_checkpoint;
  fs::path last_checkpoint;
  std::size_t steps = 0;
  double best_score = -1.0;
  double final_score = -1.0;
  std::uint64_t checksum = 0;
  bool stopped_early = false;
};

struct StepResult {
  double ce = 0, kl = 0, proto = 0, reg = 0, total = 0;
  std::string subset;
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, const std::string& stage,
                                            std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, stage + ".shuffle", {epoch}));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

inline bool all_finite(const Gradients<float>& g) {
  for (const auto& v : g) {
    for (float x : v) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

using StepFn = std::function<StepResult(const std::vector<std::size_t>& batch, std::size_t step,
                                        Gradients<float>& grads)>;
using ScoreFn = std::function<double()>;

struct LoopSpec {
  std::string stage;
  std::size_t epochs = 1;
  std::string teacher_id;
};

inline void save_with_meta(const SegModel<float>& model, const fs::path& path, const CheckpointMeta& meta) {
  save_model(model, path);
  CheckpointMeta m = meta;
  m.checksum = hex64(model.checksum());
  write_meta(meta_path(path), m);
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
}

inline TrainOutcome run_loop(const RunConfig& cfg, const LoopSpec& spec, SegModel<float>& model,
                             std::size_t dataset_size, const StepFn& step_fn,
                             const ScoreFn& score_fn, const fs::path& run_dir,
                             const TrainOptions& opts) {
  const std::size_t bs = cfg.batch_size;
  const std::size_t spe = (dataset_size + bs - 1) / bs;
  const std::size_t total = spe * spec.epochs;
  const auto warmup = static_cast<std::size_t>(std::llround(cfg.optim.warmup_epochs * static_cast<double>(spe)));
  AdamW opt(cfg.optim, model);
  ensure_dir(run_dir);

  const fs::path final_path = run_dir / (spec.stage + ".rsck");
  const fs::path best_path = run_dir / (spec.stage + "_best.rsck");
  const fs::path last_path = run_dir / (spec.stage + "_last.rsck");
  const fs::path train_log = run_dir / (spec.stage + "_train.log");
  const fs::path val_log = run_dir / (spec.stage + "_val.log");

  CheckpointMeta meta;
  meta.stage = spec.stage;
  meta.teacher_id = spec.teacher_id;
  meta.config_hash = config_hash(cfg);
  meta.config = config_text(cfg);

  TrainOutcome out;
  std::size_t step = 0;
  bool append = false;
  if (!opts.resume.empty()) {
    const CheckpointMeta rm = read_meta(meta_path(opts.resume));
    if (rm.stage != spec.stage) {
      throw ConfigError("resume: checkpoint stage '" + rm.stage + "' does not match '" + spec.stage + "'");
    }
    if (rm.config_hash != meta.config_hash) {
      throw ConfigError("resume: checkpoint was trained with config " + rm.config_hash +
                        ", current config is " + meta.config_hash);
    }
    const CheckpointContents c = read_checkpoint_file(opts.resume);
    check_compatible(c.config, model.config());
    assign_blocks(model, c.blocks);
    opt.load(optim_path(opts.resume));
    step = rm.step;
    out.best_score = rm.best_score;
    if (opt.step() != step) throw FormatError("resume: optimizer step does not match checkpoint step");
    truncate_log(train_log, step);
    truncate_log(val_log, step / spe);
    append = true;
  }
  {
    std::ofstream cf(run_dir / "config.cfg", std::ios::binary | std::ios::trunc);
    cf << meta.config;
  }
  LogFile tlog(train_log, "", append);
  LogFile vlog(val_log, "epoch\tscore", append);

  auto save_last = [&](std::size_t done) {
    meta.step = done;
    meta.epoch = done / spe;
    meta.best_score = out.best_score;
    save_with_meta(model, last_path, meta);
    opt.save(optim_path(last_path));
    out.last_checkpoint = last_path;
  };

  while (step < total) {
    const std::size_t epoch = step / spe;
    const auto order = epoch_order(dataset_size, cfg.seed, spec.stage, epoch);
    const std::size_t b = step % spe;
    std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b * bs),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(dataset_size, (b + 1) * bs)));
    Gradients<float> grads = model.zero_gradients();
    const StepResult r = step_fn(batch, step, grads);
    if (!std::isfinite(r.total) || !all_finite(grads)) {
      throw DivergenceError(spec.stage + ": non-finite loss or gradient at step " + std::to_string(step + 1) +
                            "; last good checkpoint: " + (fs::exists(last_path) ? last_path.string() : "none"));
    }
    opt.update(model, grads, scheduled_lr(cfg.optim.lr, step, warmup, total, cfg.optim.power));
    ++step;
    tlog.row({std::to_string(step), log_number(r.ce), log_number(r.kl), log_number(r.proto),
              log_number(r.reg), log_number(r.total), r.subset});
    if (step % spe == 0) {
      const std::size_t ep = step / spe;
      const double score = score_fn();
      vlog.row({std::to_string(ep), log_number(score)});
      if (opts.progress) {
        *opts.progress << spec.stage << " epoch " << ep << "/" << spec.epochs << " loss " << log_number(r.total)
                       << " val " << log_number(score) << std::endl;
      }
      out.final_score = score;
      if (score > out.best_score) {
        out.best_score = score;
        meta.step = step;
        meta.epoch = ep;
        meta.best_score = score;
        save_with_meta(model, best_path, meta);
      }
      save_last(step);
    }
    if (opts.stop_after && step >= opts.stop_after && step < total) {
      save_last(step);
      out.steps = step;
      out.stopped_early = true;
      out.best_checkpoint = fs::exists(best_path) ? best_path : fs::path();
      out.checksum = model.checksum();
      return out;
    }
  }
  meta.step = step;
  meta.epoch = step / spe;
  meta.best_score = out.best_score;
  save_with_meta(model, final_path, meta);
  out.final_checkpoint = final_path;
  out.best_checkpoint = best_path;
  out.steps = step;
  out.checksum = model.checksum();
  return out;
}

}  // namespace detail

inline TrainOutcome train_teacher(const RunConfig& cfg, const fs::path& run_dir, const TrainOptions& opts = {}) {
  cfg.validate();
  const Dataset train = load_dataset_split(cfg, cfg.train_split);
  const Dataset val = load_dataset_split(cfg, cfg.val_split);
  SegModel<float> model(cfg.model_config(), derive_seed(cfg.seed, "init.teacher"));
  const ModalityMask full = full_mask(train.num_modalities());
  const std::string full_name = subset_name(full, train.spec.modalities);

  auto step_fn = [&](const std::vector<std::size_t>& batch, std::size_t, Gradients<float>& grads) {
    std::vector<ForwardResult<float>> frs;
    std::vector<const FeatureMap<float>*> logits;
    std::vector<const LabelGrid*> labels;
    frs.reserve(batch.size());
    for (auto i : batch) {
      frs.push_back(model.forward(input_ptrs(train.samples[i], full), true));
      labels.push_back(&train.samples[i].label);
    }
    for (const auto& f : frs) logits.push_back(&f.logits);
    const CeLoss<float> ce = ce_loss<float>(logits, labels, true);
    for (std::size_t n = 0; n < frs.size(); ++n) {
      if (!ce.grad.empty()) model.backward(frs[n], ce.grad[n], nullptr, grads);
    }
    StepResult r;
    r.ce = ce.value;
    r.total = ce.value;
    r.subset = full_name;
    return r;
  };
  auto score_fn = [&] { return full_modality_miou(model, val, cfg.val_samples); };
  detail::LoopSpec spec{"teacher", cfg.effective_teacher_epochs(), ""};
  return detail::run_loop(cfg, spec, model, train.size(), step_fn, score_fn, run_dir, opts);
}

// Teacher outputs on full modalities; the teacher is frozen so they are
// computed once.
struct TeacherCache {
  std::vector<FeatureMap<float>> logits;
  std::vector<std::vector<Pyramid<float>>> pyramids;  // [sample][modality]
};

inline TeacherCache cache_teacher(const SegModel<float>& teacher, const Dataset& ds) {
  TeacherCache c;
  const ModalityMask full = full_mask(ds.num_modalities());
  for (const auto& s : ds.samples) {
    auto fr = teacher.forward(input_ptrs(s, full));
    c.logits.push_back(std::move(fr.logits));
    c.pyramids.push_back(std::move(fr.pyramids));
  }
  return c;
}

inline TrainOutcome train_student(const RunConfig& cfg, const fs::path& teacher_ckpt, const fs::path& run_dir,
                                  const TrainOptions& opts = {}) {
  cfg.validate();
  const ModelConfig mc = cfg.model_config();
  const SegModel<float> teacher = load_model(teacher_ckpt, &mc);
  const std::uint64_t teacher_sum = teacher.checksum();
  const Dataset train = load_dataset_split(cfg, cfg.train_split);
  const Dataset val = load_dataset_split(cfg, cfg.val_split);
  const TeacherCache tc = cache_teacher(teacher, train);
  SegModel<float> model(mc, derive_seed(cfg.seed, "init.student"));
  const std::size_t M = train.num_modalities();
  const std::size_t stages = mc.num_stages();
  const auto& names = train.spec.modalities;
  const LossWeights& w = cfg.loss;

  const bool append = !opts.resume.empty();
  detail::ensure_dir(run_dir);
  if (append) truncate_log(run_dir / "student_plan.log", read_meta(meta_path(opts.resume)).step);
  LogFile plan_log(run_dir / "student_plan.log", "step\tseed\tsubset\tplan\trrm_seed\tsigma", append);

  auto step_fn = [&](const std::vector<std::size_t>& batch, std::size_t step, Gradients<float>& grads) {
    const std::size_t N = batch.size();
    std::vector<ModalityMask> masks(N);
    std::vector<PermutationPlan> plans(N);
    const std::uint64_t perm_seed = derive_seed(cfg.seed, "perm", {step});
    {
      Rng rng(derive_seed(cfg.seed, "dropout", {step}));
      const ModalityMask shared = sample_dropout_subset(cfg.dropout, M, rng);
      for (std::size_t n = 0; n < N; ++n) {
        masks[n] = cfg.dropout.per_sample ? sample_dropout_subset(cfg.dropout, M, rng) : shared;
        const std::uint64_t ps = cfg.dropout.per_sample ? derive_seed(perm_seed, {n}) : perm_seed;
        plans[n] = sample_permutation(masks[n], M, ps, cfg.plan_granularity, cfg.plan_with_replacement, stages);
      }
    }
    std::vector<ForwardResult<float>> frs;
    frs.reserve(N);
    std::vector<const FeatureMap<float>*> s_logits, t_logits;
    std::vector<const LabelGrid*> labels;
    PyramidSet<float> st(N), te(N);
    for (std::size_t n = 0; n < N; ++n) {
      const auto i = batch[n];
      frs.push_back(model.forward(input_ptrs(train.samples[i], masks[n]), true));
      t_logits.push_back(&tc.logits[i]);
      labels.push_back(&train.samples[i].label);
    }
    for (std::size_t n = 0; n < N; ++n) {
      s_logits.push_back(&frs[n].logits);
      for (std::size_t m = 0; m < M; ++m) {
        st[n].push_back(frs[n].present[m] ? &frs[n].pyramids[m] : nullptr);
        te[n].push_back(&tc.pyramids[batch[n]][m]);
      }
    }
    const OriginLoss<float> origin = l_origin<float>(s_logits, t_logits, labels, w.lambda, w.kl_direction, true);
    LossParts parts;
    parts.origin = origin.total;
    PyramidGrads<float> fgrad(N);
    for (std::size_t n = 0; n < N; ++n) fgrad[n].resize(M);
    auto add_grad = [&](const PyramidGrads<float>& g, double scale) {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t m = 0; m < M; ++m) {
          if (g[n][m].empty()) continue;
          if (fgrad[n][m].empty()) {
            for (const auto& f : g[n][m]) fgrad[n][m].emplace_back(f.height, f.width, f.channels);
          }
          for (std::size_t s = 0; s < g[n][m].size(); ++s) {
            auto& dst = fgrad[n][m][s].data;
            const auto& src = g[n][m][s].data;
            for (std::size_t k = 0; k < src.size(); ++k) dst[k] += static_cast<float>(scale) * src[k];
          }
        }
      }
    };
    if (w.prototype_mode != PrototypeMode::kOff) {
      const auto proto = hpdm_loss<float>(st, te, labels, plans, w.prototype_mode, mc.num_classes,
                                          w.kl_direction, w.alpha != 0.0);
      parts.proto = proto.value;
      if (w.alpha != 0.0) add_grad(proto.grad, w.alpha);
    }
    const std::uint64_t rrm_seed = derive_seed(cfg.seed, "rrm", {step});
    std::string sigma_text = "-";
    if (w.regularizer_mode != RegularizerMode::kOff) {
      const auto reg = rrm_loss<float>(st, te, cfg.rrm, w.regularizer_mode, plans, rrm_seed, w.kl_direction,
                                       w.beta != 0.0);
      parts.reg = reg.value;
      if (w.beta != 0.0) add_grad(reg.grad, w.beta);
      sigma_text.clear();
      for (const auto& row : reg.sigma) {
        for (double s : row) sigma_text += (sigma_text.empty() ? "" : ",") + log_number(s);
      }
    }
    const LossBreakdown b = total_loss(parts, w);
    for (std::size_t n = 0; n < N; ++n) {
      if (!origin.grad.empty()) model.backward(frs[n], origin.grad[n], &fgrad[n], grads);
    }
    StepResult r;
    r.ce = origin.ce;
    r.kl = origin.kl;
    r.proto = b.proto;
    r.reg = b.reg;
    r.total = b.total;
    std::string subsets, plan_text;
    for (std::size_t n = 0; n < N; ++n) {
      if (n > 0 && !cfg.dropout.per_sample) break;
      subsets += (n ? "," : "") + subset_name(masks[n], names);
      plan_text += (n ? "," : "") + plans[n].describe(names);
    }
    r.subset = subsets;
    plan_log.row({std::to_string(step + 1), hex64(perm_seed), subsets, plan_text, hex64(rrm_seed), sigma_text});
    return r;
  };
  auto score_fn = [&] { return average_over_subsets(fast_emm(model, val, cfg.val_samples)); };
  detail::LoopSpec spec{"student", cfg.epochs, hex64(teacher_sum)};
  TrainOutcome out = detail::run_loop(cfg, spec, model, train.size(), step_fn, score_fn, run_dir, opts);
  if (teacher.checksum() != teacher_sum) throw ContractError("train_student: teacher parameters changed");
  return out;
}

// --- evaluation -----------------------------------------------------------------

struct EvaluationOutputs {
  EvalReport drop;
  EvalReport zero_fill;
  fs::path drop_path;
  fs::path zero_fill_path;
};

// Evaluates under both missing-modality semantics and writes
// report_drop.txt and report_zero-fill.txt into `out_dir`.
inline EvaluationOutputs evaluate_checkpoint(const fs::path& ckpt, const Dataset& ds, const EvalSpec& base,
                                             const fs::path& out_dir) {
  const SegModel<float> model = load_model(ckpt);
  if (model.config().num_classes != ds.spec.num_classes || model.config().num_modalities != ds.num_modalities()) {
    throw CompatibilityError("evaluate: checkpoint does not match dataset classes/modalities");
  }
  const std::string id = hex64(model.checksum());
  const Predictor predict = model_predictor(model);
  EvaluationOutputs out;
  EvalSpec spec = base;
  spec.semantics = MissingSemantics::kDrop;
  out.drop = evaluate_report(predict, ds, spec, id);
  spec.semantics = MissingSemantics::kZeroFill;
  out.zero_fill = evaluate_report(predict, ds, spec, id);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  out.drop_path = out_dir / "report_drop.txt";
  out.zero_fill_path = out_dir / "report_zero-fill.txt";
  write_report(out.drop, out.drop_path);
  write_report(out.zero_fill, out.zero_fill_path);
  return out;
}

}  // namespace robustseg
