// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any
// criterion fails. Tolerances are pinned below.
//
//   robustseg_acceptance [--work-dir DIR] [--only NAME]... [--reuse]

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "../oracles/oracles.hpp"
#include "robustseg/robustseg.hpp"

using namespace robustseg;
namespace fs = std::filesystem;
using Map = FeatureMap<double>;

namespace {

constexpr double kOracleTol = 1e-6;
constexpr double kOracleTolRrm = 1e-5;
constexpr double kGradTol = 1e-4;
constexpr double kGradTolRrm = 1e-3;
constexpr double kProbTol = 1e-12;
constexpr double kSaltPepperTol = 0.002;  // 0.2 percentage points
constexpr double kDegenerateTol = 1e-7;
constexpr double kFusionTol = 1e-6;
constexpr double kFastBudgetSec = 120.0;
constexpr double kTrainingBudgetSec = 45.0 * 60.0;
constexpr double kOriginGain = 3.0;
constexpr double kFullGain = 1.0;
constexpr double kChanceBand = 5.0;
constexpr double kRescueMargin = 10.0;
constexpr std::size_t kInstances = 50;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

double vec_rel_err(const std::vector<double>& g, const std::vector<double>& fd) {
  double d = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    d += (g[i] - fd[i]) * (g[i] - fd[i]);
    a += g[i] * g[i];
    b += fd[i] * fd[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(a), std::sqrt(b), 1e-12});
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

struct Line {
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Line> g_lines;

void report(const std::string& name, bool pass, const std::string& detail) {
  g_lines.push_back({name, pass, detail});
  std::cout << (pass ? "PASS  " : "FAIL  ") << name << "  " << detail << std::endl;
}

Map random_map(std::size_t h, std::size_t w, std::size_t c, Rng& rng, double scale = 1.0) {
  Map m(h, w, c);
  for (auto& v : m.data) v = scale * rng.normal();
  return m;
}

LabelGrid random_labels(std::size_t h, std::size_t w, std::size_t C, Rng& rng, double ignore = 0.0) {
  LabelGrid g(h, w);
  for (auto& v : g.data) v = rng.bernoulli(ignore) ? kIgnoreLabel : static_cast<std::uint8_t>(rng.below(C));
  return g;
}

ModalityMask random_mask(std::size_t M, Rng& rng) {
  return static_cast<ModalityMask>(1 + rng.below((std::size_t{1} << M) - 1));
}

// Per-sample student/teacher pyramids for the auxiliary losses.
struct AuxBatch {
  std::vector<std::vector<Pyramid<double>>> s, t;  // [n][m]
  std::vector<LabelGrid> labels;
  std::vector<ModalityMask> present;

  PyramidSet<double> sset() const {
    PyramidSet<double> r(s.size());
    for (std::size_t n = 0; n < s.size(); ++n) {
      for (std::size_t m = 0; m < s[n].size(); ++m) r[n].push_back(has(present[n], m) ? &s[n][m] : nullptr);
    }
    return r;
  }
  PyramidSet<double> tset() const {
    PyramidSet<double> r(t.size());
    for (std::size_t n = 0; n < t.size(); ++n) {
      for (const auto& p : t[n]) r[n].push_back(&p);
    }
    return r;
  }
  std::vector<const LabelGrid*> lptrs() const {
    std::vector<const LabelGrid*> r;
    for (const auto& l : labels) r.push_back(&l);
    return r;
  }
  std::vector<std::vector<oracle::Pyr>> ostudent() const {
    std::vector<std::vector<oracle::Pyr>> r(s.size());
    for (std::size_t n = 0; n < s.size(); ++n) {
      for (std::size_t m = 0; m < s[n].size(); ++m) r[n].push_back(has(present[n], m) ? s[n][m] : oracle::Pyr{});
    }
    return r;
  }
};

AuxBatch aux_batch(std::size_t N, std::size_t M, const std::vector<std::size_t>& sides,
                   const std::vector<std::size_t>& chans, std::size_t label_side, std::size_t C, Rng& rng) {
  AuxBatch b;
  for (std::size_t n = 0; n < N; ++n) {
    b.present.push_back(random_mask(M, rng));
    b.s.emplace_back();
    b.t.emplace_back();
    for (std::size_t m = 0; m < M; ++m) {
      Pyramid<double> ps, pt;
      for (std::size_t i = 0; i < sides.size(); ++i) {
        ps.push_back(random_map(sides[i], sides[i], chans[i], rng));
        pt.push_back(random_map(sides[i], sides[i], chans[i], rng));
      }
      b.s[n].push_back(std::move(ps));
      b.t[n].push_back(std::move(pt));
    }
    b.labels.push_back(random_labels(label_side, label_side, C, rng, 0.1));
  }
  return b;
}

std::vector<PermutationPlan> random_plans(const AuxBatch& b, std::size_t M, Rng& rng) {
  std::vector<PermutationPlan> plans;
  const auto gran = rng.bernoulli(0.5) ? PlanGranularity::kPerStage : PlanGranularity::kPerBatch;
  for (std::size_t n = 0; n < b.present.size(); ++n) {
    plans.push_back(sample_permutation(b.present[n], M, rng.bits(), gran));
  }
  return plans;
}

// --- oracle equivalence --------------------------------------------------------

void check_oracle_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(101);
  std::size_t instances = 0;
  std::map<std::string, double> worst;
  bool ok = true;
  auto note = [&](const std::string& what, double err, double tol) {
    worst[what] = std::max(worst[what], err);
    if (!(err <= tol)) ok = false;
  };

  for (std::size_t k = 0; k < kInstances; ++k, ++instances) {
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8), ch = 1 + rng.below(6), C = 2 + rng.below(3);
    const Map f = random_map(h, w, ch, rng);
    const LabelGrid l = random_labels(h, w, C, rng, 0.2);
    const auto ps = compute_prototypes(f, l, C);
    const auto ref = oracle::prototypes(f, l, static_cast<int>(C));
    double err = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const auto it = ref.by_class.find(static_cast<int>(c));
      if ((ps.valid[c] != 0) != (it != ref.by_class.end())) err = 1.0;
      if (it == ref.by_class.end()) continue;
      for (std::size_t j = 0; j < ch; ++j) err = std::max(err, rel_err(ps.prototype(c)[j], it->second[j], 1e-9));
    }
    note("prototypes", err, kOracleTol);
  }

  for (std::size_t k = 0; k < kInstances; ++k, ++instances) {
    const std::size_t N = 1 + rng.below(2), M = 2 + rng.below(2), C = 2 + rng.below(3);
    std::vector<std::size_t> chans;
    for (int i = 0; i < 4; ++i) chans.push_back(2 + rng.below(4));
    const AuxBatch b = aux_batch(N, M, {8, 4, 2, 1}, chans, 8, C, rng);
    const auto plans = random_plans(b, M, rng);
    const auto mode = rng.bernoulli(0.5) ? PrototypeMode::kHybrid : PrototypeMode::kSingle;
    const auto dir = rng.bernoulli(0.5) ? KlDirection::kTeacherStudent : KlDirection::kStudentTeacher;
    const auto r = hpdm_loss(b.sset(), b.tset(), b.lptrs(), plans, mode, C, dir, false);
    const double ref = oracle::hpdm(
        b.ostudent(), b.t, b.labels, static_cast<int>(C),
        [&](std::size_t n, std::size_t i, std::size_t m) {
          return mode == PrototypeMode::kHybrid ? plans[n].source(i, m)
                                                : PermutationPlan::identity(b.present[n], M).source(i, m);
        },
        dir == KlDirection::kTeacherStudent);
    note("hpdm_loss", rel_err(r.value, ref), kOracleTol);
  }

  for (std::size_t k = 0; k < kInstances; ++k, ++instances) {
    const std::size_t N = 1 + rng.below(2), M = 2 + rng.below(2);
    const AuxBatch b = aux_batch(N, M, {2, 2, 1, 1}, {2, 3, 3, 2}, 2, 2, rng);
    const auto plans = random_plans(b, M, rng);
    PerturbationSpec spec;
    spec.samples = 1 + rng.below(2);
    spec.paired_noise = rng.bernoulli(0.5);
    const auto mode = rng.bernoulli(0.5) ? RegularizerMode::kHybrid : RegularizerMode::kSingle;
    const auto dir = rng.bernoulli(0.5) ? KlDirection::kTeacherStudent : KlDirection::kStudentTeacher;
    const std::uint64_t seed = rng.bits();
    const auto r = rrm_loss(b.sset(), b.tset(), spec, mode, plans, seed, dir, false);
    double ref = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const PermutationPlan plan =
          mode == RegularizerMode::kHybrid ? plans[n] : PermutationPlan::identity(b.present[n], M);
      for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t m = 0; m < M; ++m) {
          std::vector<const Map*> ref_maps;
          for (std::size_t q = 0; q < N; ++q) ref_maps.push_back(&b.t[q][m][i]);
          const double sigma = spec.sigma * oracle::std_of(ref_maps);
          Rng g(rrm_term_seed(seed, n, i, m));
          ref += oracle::fisher_inverse(b.s[n][plan.source(i, m)][i], b.t[n][m][i], sigma, spec.samples,
                                        spec.epsilon, spec.paired_noise, g, dir == KlDirection::kTeacherStudent);
        }
      }
    }
    note("rrm_loss", rel_err(r.value, ref / static_cast<double>(N)), kOracleTolRrm);
  }

  for (std::size_t k = 0; k < kInstances; ++k, ++instances) {
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8), C = 2 + rng.below(3);
    LabelGrid gt = random_labels(h, w, C, rng, 0.1);
    gt.data[0] = static_cast<std::uint8_t>(rng.below(C));
    const LabelGrid pred = random_labels(h, w, C, rng);
    const double lib = miou({pred}, {gt}, C).miou;
    const double ref = oracle::miou({pred.data.begin(), pred.data.end()}, {gt.data.begin(), gt.data.end()},
                                    static_cast<int>(C));
    note("miou", rel_err(lib, ref), kOracleTol);
  }

  const std::vector<std::string> all_names = {"rgb", "depth", "event"};
  for (std::size_t k = 0; k < kInstances; ++k, ++instances) {
    const std::size_t N = 1 + rng.below(3), M = 2 + rng.below(2), C = 2 + rng.below(3);
    const std::size_t side = 2 + rng.below(7);
    Dataset ds;
    ds.spec.num_classes = C;
    ds.spec.modalities.assign(all_names.begin(), all_names.begin() + static_cast<std::ptrdiff_t>(M));
    for (std::size_t n = 0; n < N; ++n) {
      ModalitySample s;
      s.modality_names = ds.spec.modalities;
      for (std::size_t m = 0; m < M; ++m) {
        FeatureMap<float> x(side, side, 3);
        for (auto& v : x.data) v = static_cast<float>(rng.uniform());
        s.modalities.push_back(std::move(x));
      }
      s.label = random_labels(side, side, C, rng);
      ds.samples.push_back(std::move(s));
      ds.sample_ids.push_back(sample_id("val", n));
    }
    // Reads the first passed slot; zero-filled slots count as passed.
    const Predictor predict = [C](const std::vector<const FeatureMap<float>*>& in) {
      std::size_t first = 0;
      while (in[first] == nullptr) ++first;
      const auto& x = *in[first];
      LabelGrid out(x.height, x.width);
      for (std::size_t p = 0; p < x.pixels(); ++p) {
        double s = 0;
        for (float v : x.row(p)) s += v;
        out.data[p] = static_cast<std::uint8_t>(std::min<std::size_t>(C - 1, static_cast<std::size_t>(s) + first));
      }
      return out;
    };
    EvalSpec spec;
    const double ps[3] = {0.0, 0.2, 0.5};
    spec.p = ps[rng.below(3)];
    spec.semantics = rng.bernoulli(0.5) ? MissingSemantics::kDrop : MissingSemantics::kZeroFill;
    spec.seed = rng.bits();
    const auto emm = emm_scores(predict, ds, spec);
    const auto rmm = rmm_scores(predict, ds, spec);
    const auto subs = oracle::subsets(M);
    std::vector<double> emm_ref, rmm_ref;
    for (const auto& sub : subs) {
      ModalityMask mask = 0;
      for (auto m : sub) mask |= static_cast<ModalityMask>(1u << m);
      std::vector<int> pe, pr, gt;
      for (std::size_t n = 0; n < N; ++n) {
        const auto& s = ds.samples[n];
        std::vector<FeatureMap<float>> zeros(M, FeatureMap<float>(side, side, 3)), masked;
        masked.reserve(M);
        std::vector<const FeatureMap<float>*> in_e(M, nullptr), in_r(M, nullptr);
        for (std::size_t m = 0; m < M; ++m) {
          const bool kept = std::find(sub.begin(), sub.end(), m) != sub.end();
          if (kept) {
            in_e[m] = in_r[m] = &s.modalities[m];
            continue;
          }
          if (spec.semantics == MissingSemantics::kZeroFill) in_e[m] = &zeros[m];
          Rng r(derive_seed(spec.seed, "rmm", {mask, n, m}));
          FeatureMap<float> y = s.modalities[m];
          for (std::size_t p = 0; p < y.pixels(); ++p) {
            if (r.uniform() < spec.p) {
              for (auto& v : y.row(p)) v = 0.0f;
            }
          }
          masked.push_back(std::move(y));
          in_r[m] = &masked.back();
        }
        const auto a = predict(in_e), b = predict(in_r);
        pe.insert(pe.end(), a.data.begin(), a.data.end());
        pr.insert(pr.end(), b.data.begin(), b.data.end());
        gt.insert(gt.end(), s.label.data.begin(), s.label.data.end());
      }
      emm_ref.push_back(oracle::miou(pe, gt, static_cast<int>(C)));
      rmm_ref.push_back(oracle::miou(pr, gt, static_cast<int>(C)));
    }
    double err = 0;
    for (std::size_t i = 0; i < subs.size(); ++i) {
      err = std::max({err, rel_err(emm.rows[i].miou, emm_ref[i]), rel_err(rmm.rows[i].miou, rmm_ref[i])});
    }
    double avg_e = 0, avg_r = 0;
    for (std::size_t i = 0; i < subs.size(); ++i) {
      avg_e += emm_ref[i] / static_cast<double>(subs.size());
      avg_r += rmm_ref[i] / static_cast<double>(subs.size());
    }
    err = std::max({err, rel_err(emm.avg, avg_e), rel_err(rmm.avg, avg_r),
                    rel_err(emm.expected, oracle::expected(emm_ref, M, spec.p)),
                    rel_err(rmm.expected, oracle::expected(rmm_ref, M, spec.p))});
    note("emm/rmm", err, kOracleTol);
  }

  const double secs = seconds_since(t0);
  std::string detail = "instances=" + std::to_string(instances) + " worst_rel:";
  for (const auto& [k, v] : worst) detail += " " + k + "=" + fmt(v, 2);
  detail += " tol=" + fmt(kOracleTol) + "/" + fmt(kOracleTolRrm) + "(rrm) time=" + fmt(secs) + "s";
  report("oracle-equivalence", ok && secs < kFastBudgetSec, detail);
}

// --- gradient checks -------------------------------------------------------------

template <typename F>
std::vector<double> central_fd(std::vector<double*> xs, F f, double h) {
  std::vector<double> out;
  for (double* x : xs) {
    const double o = *x;
    *x = o + h;
    const double a = f();
    *x = o - h;
    const double b = f();
    *x = o;
    out.push_back((a - b) / (2 * h));
  }
  return out;
}

template <typename Maps>
std::vector<double*> coords(Maps& maps) {
  std::vector<double*> xs;
  for (auto& m : maps) {
    for (auto& v : m.data) xs.push_back(&v);
  }
  return xs;
}

void check_gradients() {
  const auto t0 = Clock::now();
  Rng rng(202);
  std::map<std::string, double> worst;
  bool ok = true;
  auto note = [&](const std::string& what, double err, double tol) {
    worst[what] = std::max(worst[what], err);
    if (!(err <= tol)) ok = false;
  };

  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Map> x = {random_map(3, 3, 4, rng), random_map(2, 4, 4, rng)};
    std::vector<Map> t = {random_map(3, 3, 4, rng), random_map(2, 4, 4, rng)};
    std::vector<LabelGrid> y = {random_labels(3, 3, 4, rng, 0.2), random_labels(2, 4, 4, rng, 0.2)};
    y[0].data[0] = 1;
    auto ptr = [](const std::vector<Map>& v) {
      std::vector<const Map*> p;
      for (const auto& m : v) p.push_back(&m);
      return p;
    };
    std::vector<const LabelGrid*> yp = {&y[0], &y[1]};

    const auto ce = ce_loss<double>(ptr(x), yp);
    std::vector<double> g;
    for (const auto& m : ce.grad) g.insert(g.end(), m.data.begin(), m.data.end());
    note("ce_loss", vec_rel_err(g, central_fd(coords(x), [&] { return ce_loss<double>(ptr(x), yp, false).value; }, 1e-6)),
         kGradTol);

    for (auto dir : {KlDirection::kTeacherStudent, KlDirection::kStudentTeacher}) {
      const auto kl = kl_div<double>(ptr(x), ptr(t), dir, &yp);
      g.clear();
      for (const auto& m : kl.grad) g.insert(g.end(), m.data.begin(), m.data.end());
      const auto fd =
          central_fd(coords(x), [&] { return kl_div<double>(ptr(x), ptr(t), dir, &yp, false).value; }, 1e-6);
      note("kl_div", vec_rel_err(g, fd), kGradTol);
    }
  }

  auto aux_coords = [](AuxBatch& b) {
    std::vector<double*> xs;
    for (std::size_t n = 0; n < b.s.size(); ++n) {
      for (std::size_t m = 0; m < b.s[n].size(); ++m) {
        if (!has(b.present[n], m)) continue;
        for (auto& map : b.s[n][m]) {
          for (auto& v : map.data) xs.push_back(&v);
        }
      }
    }
    return xs;
  };
  auto aux_grad = [](const AuxBatch& b, const PyramidGrads<double>& grad) {
    std::vector<double> g;
    for (std::size_t n = 0; n < b.s.size(); ++n) {
      for (std::size_t m = 0; m < b.s[n].size(); ++m) {
        if (!has(b.present[n], m)) continue;
        for (const auto& map : grad[n][m]) g.insert(g.end(), map.data.begin(), map.data.end());
      }
    }
    return g;
  };

  for (int trial = 0; trial < 4; ++trial) {
    AuxBatch b = aux_batch(2, 3, {4, 2, 2, 1}, {3, 4, 3, 5}, 8, 3, rng);
    const auto plans = random_plans(b, 3, rng);
    for (auto dir : {KlDirection::kTeacherStudent, KlDirection::kStudentTeacher}) {
      const auto r = hpdm_loss(b.sset(), b.tset(), b.lptrs(), plans, PrototypeMode::kHybrid, 3, dir);
      const auto fd = central_fd(aux_coords(b), [&] {
        return hpdm_loss(b.sset(), b.tset(), b.lptrs(), plans, PrototypeMode::kHybrid, 3, dir, false).value;
      }, 1e-6);
      note("hpdm_loss", vec_rel_err(aux_grad(b, r.grad), fd), kGradTol);
    }
  }

  for (int trial = 0; trial < 4; ++trial) {
    AuxBatch b = aux_batch(2, 2, {2, 1, 1, 1}, {2, 3, 2, 3}, 2, 2, rng);
    const auto plans = random_plans(b, 2, rng);
    PerturbationSpec spec;
    spec.samples = 2;
    spec.paired_noise = trial % 2 == 0;
    const auto dir = trial < 2 ? KlDirection::kTeacherStudent : KlDirection::kStudentTeacher;
    const auto r = rrm_loss(b.sset(), b.tset(), spec, RegularizerMode::kHybrid, plans, 31 + trial, dir);
    const auto fd = central_fd(aux_coords(b), [&] {
      return rrm_loss(b.sset(), b.tset(), spec, RegularizerMode::kHybrid, plans, 31 + trial, dir, false).value;
    }, 1e-5);
    note("rrm_loss", vec_rel_err(aux_grad(b, r.grad), fd), kGradTolRrm);
  }

  const double secs = seconds_since(t0);
  std::string detail = "worst_rel:";
  for (const auto& [k, v] : worst) detail += " " + k + "=" + fmt(v, 2);
  detail += " tol=" + fmt(kGradTol) + "/" + fmt(kGradTolRrm) + "(rrm) time=" + fmt(secs) + "s";
  report("gradient-checks", ok && secs < kFastBudgetSec, detail);
}

// --- metric formulas ----------------------------------------------------------------

void check_metric_formulas() {
  bool ok = true;
  double worst_sum = 0, worst_lin = 0, worst_sp = 0;
  for (double p : {0.0, 0.2, 0.5}) {
    for (std::size_t M : {2u, 3u, 4u}) {
      double s = 0;
      for (ModalityMask sub : enumerate_subsets(M)) s += subset_probability(M - popcount(sub), M, p);
      const double err = std::abs(s - (1.0 - std::pow(p, static_cast<double>(M))));
      worst_sum = std::max(worst_sum, err);
      ok = ok && err <= kProbTol;
    }
  }
  Rng rng(303);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t M = 2 + rng.below(3);
    const std::size_t n = enumerate_subsets(M).size();
    std::vector<double> x(n), y(n), z(n);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2), p = rng.uniform(0, 0.9);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = 100 * rng.uniform();
      y[i] = 100 * rng.uniform();
      z[i] = a * x[i] + b * y[i];
    }
    const double lhs = expected_over_subsets(z, M, p);
    const double rhs = a * expected_over_subsets(x, M, p) + b * expected_over_subsets(y, M, p);
    const double err = std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs));
    worst_lin = std::max(worst_lin, err);
    ok = ok && err <= kProbTol;
  }
  for (const char* level : {"low", "mid", "high"}) {
    const NoiseSpec spec = noise_level(level);
    FeatureMap<float> img(1000, 1000, 3);
    for (auto& v : img.data) v = 0.5f;
    Rng r(derive_seed(404, level));
    std::size_t hit = 0;
    inject_noise(img, spec, r, &hit);
    const double err = std::abs(static_cast<double>(hit) / 1e6 - spec.density);
    worst_sp = std::max(worst_sp, err);
    ok = ok && err <= kSaltPepperTol;
  }
  report("metric-formulas", ok,
         "subset_sum_err=" + fmt(worst_sum, 2) + " linearity_err=" + fmt(worst_lin, 2) +
             " salt_pepper_frac_err=" + fmt(worst_sp, 2) + " tol=" + fmt(kProbTol) + "/" + fmt(kSaltPepperTol));
}

// --- degenerate cases ------------------------------------------------------------------

void check_degenerate() {
  bool ok = true;
  Rng rng(505);
  AuxBatch b = aux_batch(2, 3, {8, 4, 2, 1}, {3, 4, 5, 6}, 8, 4, rng);
  b.present = {0b111, 0b111};
  b.s = b.t;
  std::vector<PermutationPlan> id = {PermutationPlan::identity(0b111, 3), PermutationPlan::identity(0b111, 3)};
  const double hp = hpdm_loss(b.sset(), b.tset(), b.lptrs(), id, PrototypeMode::kSingle, 4).value;
  ok = ok && std::abs(hp) <= kDegenerateTol;

  PerturbationSpec spec;
  const auto rr = rrm_loss(b.sset(), b.tset(), spec, RegularizerMode::kSingle, id, 7);
  const double inv_eps = 1.0 / spec.epsilon;
  ok = ok && rr.min_inverse == inv_eps && rr.max_inverse == inv_eps;
  Rng fr(8);
  const auto ft = fisher_term(b.t[0][0][1], b.t[0][0][1], spec, 0.3, fr);
  ok = ok && ft.inverse == inv_eps;

  double kl_worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Map x = random_map(8, 8, 6, rng, 3.0);
    kl_worst = std::max({kl_worst, std::abs(kl_div(x, x)), std::abs(kl_div(x, x, KlDirection::kStudentTeacher))});
    FeatureMap<float> xf(8, 8, 6);
    for (std::size_t k = 0; k < x.data.size(); ++k) xf.data[k] = static_cast<float>(x.data[k]);
    kl_worst = std::max(kl_worst, static_cast<double>(std::abs(kl_div(xf, xf))));
  }
  ok = ok && kl_worst <= kDegenerateTol;

  ModelConfig mc;
  mc.num_classes = 6;
  mc.num_modalities = 4;
  const SegModel<float> model(mc, 9);
  std::vector<FeatureMap<float>> xs;
  for (int m = 0; m < 4; ++m) {
    FeatureMap<float> x(64, 64, 3);
    for (auto& v : x.data) v = static_cast<float>(rng.uniform());
    xs.push_back(std::move(x));
  }
  double fusion_worst = 0;
  for (std::size_t m = 0; m < 4; ++m) {
    std::vector<const FeatureMap<float>*> in(4, nullptr);
    in[m] = &xs[m];
    const auto dropped = model.forward(in).logits;
    const auto single = model.decode(model.encode(xs[m], m), 64, 64);
    for (std::size_t k = 0; k < single.data.size(); ++k) {
      fusion_worst = std::max(fusion_worst, static_cast<double>(std::abs(dropped.data[k] - single.data[k])));
    }
  }
  ok = ok && fusion_worst <= kFusionTol;
  report("degenerate-cases", ok,
         "hpdm_identical=" + fmt(hp, 2) + " rrm_inverse=" + fmt(rr.min_inverse, 6) + ".." + fmt(rr.max_inverse, 6) +
             " (1/eps=" + fmt(inv_eps, 6) + ") kl_self=" + fmt(kl_worst, 2) + " fusion_diff=" +
             fmt(fusion_worst, 2));
}

// --- determinism --------------------------------------------------------------------

#ifndef ROBUSTSEG_DESK_CFG
#define ROBUSTSEG_DESK_CFG "configs/desk.cfg"
#endif

#ifndef ROBUSTSEG_CLI
#define ROBUSTSEG_CLI "robustseg"
#endif

int run_in(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + ROBUSTSEG_CLI + "' " + args + " > cli.out 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

void check_determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  const std::string small = " --set data.train_count=8 --set data.val_count=4 --set data.height=32"
                            " --set data.width=32 --set model.stage_channels=4,8,8,8 --set model.embed_dim=8"
                            " --set model.blocks_per_stage=1 --set train.epochs=2 --set train.batch_size=4"
                            " --set rrm.samples=2";
  const std::vector<std::string> commands = {
      "gen-data" + small,
      "train-teacher" + small + " --run-dir t",
      "train-student" + small + " --teacher t/teacher.rsck --run-dir s",
      "evaluate" + small + " --checkpoint s/student.rsck",
      "report s/report_drop.txt s/report_zero-fill.txt --names drop zero-fill --out cmp.txt",
  };
  std::vector<std::map<std::string, std::string>> trees;
  bool ok = true;
  std::string failure;
  for (const char* rep : {"a", "b"}) {
    const fs::path dir = work / "determinism" / rep;
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (const auto& c : commands) {
      const int rc = run_in(dir, c);
      if (rc != 0) {
        ok = false;
        failure = "'" + c.substr(0, c.find(' ')) + "' exited " + std::to_string(rc);
      }
    }
    trees.push_back(tree_bytes(dir));
  }
  std::size_t compared = 0;
  if (trees[0].size() != trees[1].size()) {
    ok = false;
    failure = "file sets differ";
  }
  for (const auto& [name, bytes] : trees[0]) {
    const auto it = trees[1].find(name);
    if (it == trees[1].end() || it->second != bytes) {
      ok = false;
      failure = "differs: " + name;
    }
    ++compared;
  }
  report("determinism", ok,
         "files_compared=" + std::to_string(compared) + (failure.empty() ? "" : " " + failure) +
             " time=" + fmt(seconds_since(t0)) + "s");
}

// --- loss-term ablation at desk scale -------------------------------------------------------

struct Variant {
  std::string name;
  double lambda_scale;  // 0 disables the logit KL
  bool proto, reg;
};

const std::vector<Variant>& variants() {
  static const std::vector<Variant> v = {
      {"ce-only", 0.0, false, false},
      {"origin", 1.0, false, false},
      {"origin+hp", 1.0, true, false},
      {"full", 1.0, true, true},
  };
  return v;
}

RunConfig variant_config(RunConfig cfg, const Variant& v) {
  cfg.loss.lambda *= v.lambda_scale;
  if (!v.proto) cfg.loss.prototype_mode = PrototypeMode::kOff;
  if (!v.reg) cfg.loss.regularizer_mode = RegularizerMode::kOff;
  return cfg;
}

// mIoU of predicting the most frequent training class everywhere.
double chance_miou(const Dataset& train, const Dataset& val) {
  std::vector<std::size_t> hist(train.spec.num_classes, 0);
  for (const auto& s : train.samples) {
    for (auto v : s.label.data) {
      if (v != kIgnoreLabel) ++hist[v];
    }
  }
  const auto majority = static_cast<std::uint8_t>(std::max_element(hist.begin(), hist.end()) - hist.begin());
  ConfusionMatrix cm(val.spec.num_classes);
  for (const auto& s : val.samples) cm.add(LabelGrid(s.label.height, s.label.width, majority), s.label);
  return miou(cm).miou;
}

void check_ablation(const fs::path& work, bool reuse) {
  const auto t0 = Clock::now();
  const fs::path root = work / "ablation";
  if (!reuse) fs::remove_all(root);
  fs::create_directories(root);
  RunConfig base = load_config_file(ROBUSTSEG_DESK_CFG);
  base.data_root = (root / "data").string();
  if (!fs::exists(root / "data" / "val" / "manifest.txt")) {
    generate_dataset(base.scene, base.train_count, base.train_split, base.data_root);
    generate_dataset(base.scene, base.val_count, base.val_split, base.data_root);
  }
  const Dataset train = load_dataset_split(base, base.train_split);
  const Dataset val = load_dataset_split(base, base.val_split);
  const double chance = chance_miou(train, val);
  const auto subsets = enumerate_subsets(val.num_modalities());
  std::vector<std::size_t> sparse_rows;
  for (std::size_t i = 0; i < subsets.size(); ++i) {
    bool sparse_only = true;
    for (std::size_t m = 0; m < val.num_modalities(); ++m) {
      if (has(subsets[i], m) && !is_sparse(modality_kind(val.spec.modalities[m]))) sparse_only = false;
    }
    if (sparse_only) sparse_rows.push_back(i);
  }

  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::map<std::string, std::vector<std::vector<double>>> rows;  // variant -> seed -> per-subset
  for (auto seed : seeds) {
    RunConfig cfg = base;
    cfg.seed = seed;
    const fs::path tdir = root / ("teacher-s" + std::to_string(seed));
    fs::path tckpt = tdir / "teacher.rsck";
    if (!(reuse && fs::exists(tckpt))) tckpt = train_teacher(cfg, tdir).final_checkpoint;
    for (const auto& v : variants()) {
      const RunConfig vc = variant_config(cfg, v);
      const fs::path sdir = root / (v.name + "-s" + std::to_string(seed));
      fs::path sckpt = sdir / "student.rsck";
      if (!(reuse && fs::exists(sckpt))) sckpt = train_student(vc, tckpt, sdir).final_checkpoint;
      const SegModel<float> model = load_model(sckpt);
      const auto sc = emm_scores(model_predictor(model), val, vc.eval);
      std::vector<double> r;
      for (const auto& row : sc.rows) r.push_back(row.miou);
      rows[v.name].push_back(r);
      std::cout << "  " << std::left << std::setw(10) << v.name << " seed " << seed << "  emm_avg "
                << std::fixed << std::setprecision(2) << sc.avg << "  (" << fmt(seconds_since(t0), 4) << " s)"
                << std::defaultfloat << std::endl;
    }
  }
  const double secs = seconds_since(t0);

  // Seed means.
  std::map<std::string, std::vector<double>> mean;
  for (const auto& [name, per_seed] : rows) {
    std::vector<double> m(subsets.size(), 0.0);
    for (const auto& r : per_seed) {
      for (std::size_t i = 0; i < r.size(); ++i) m[i] += r[i] / static_cast<double>(per_seed.size());
    }
    mean[name] = m;
  }
  std::cout << "  per-subset seed-mean mIoU (chance " << fmt(chance, 4) << ")\n  " << std::setw(10) << "subset";
  for (const auto& v : variants()) std::cout << std::setw(11) << v.name;
  std::cout << "\n";
  for (std::size_t i = 0; i < subsets.size(); ++i) {
    std::cout << "  " << std::setw(10) << subset_name(subsets[i], val.spec.modalities);
    for (const auto& v : variants()) std::cout << std::setw(11) << std::fixed << std::setprecision(2) << mean[v.name][i];
    std::cout << std::defaultfloat << "\n";
  }
  auto avg = [&](const std::string& n) { return average_over_subsets(mean[n]); };
  auto sparse = [&](const std::string& n) {
    double s = 0;
    for (auto i : sparse_rows) s += mean[n][i];
    return s / static_cast<double>(sparse_rows.size());
  };
  const double ce = avg("ce-only"), origin = avg("origin"), hp = avg("origin+hp"), full = avg("full");
  const bool order = ce < origin && origin < hp && hp <= full && origin - ce >= kOriginGain &&
                     full - origin >= kFullGain && secs < kTrainingBudgetSec;
  report("loss-ablation-ordering", order,
         "emm_avg ce-only=" + fmt(ce, 4) + " origin=" + fmt(origin, 4) + " origin+hp=" + fmt(hp, 4) +
             " full=" + fmt(full, 4) + " (lambda=" + fmt(base.loss.lambda) + " alpha=" + fmt(base.loss.alpha) +
             " beta=" + fmt(base.loss.beta) + ") need origin-ce>=" + fmt(kOriginGain) + " full-origin>=" + fmt(kFullGain) +
             " seeds=3 time=" + fmt(secs / 60.0) + "min (<45)");
  const double ce_sp = sparse("ce-only"), full_sp = sparse("full");
  const bool rescue = std::abs(ce_sp - chance) <= kChanceBand && full_sp - chance >= kRescueMargin;
  report("sparse-modality-rescue", rescue,
         "sparse-only subsets mean mIoU: chance=" + fmt(chance, 4) + " ce-only=" + fmt(ce_sp, 4) +
             " full=" + fmt(full_sp, 4) + " need |ce-chance|<=" + fmt(kChanceBand) + " full-chance>=" +
             fmt(kRescueMargin));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "robustseg-acceptance";
  std::vector<std::string> only;
  bool reuse = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work-dir" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      only.push_back(argv[++i]);
    } else if (a == "--reuse") {
      reuse = true;
    } else {
      std::cerr << "usage: robustseg_acceptance [--work-dir DIR] [--only NAME]... [--reuse]\n";
      return 2;
    }
  }
  auto wanted = [&](const std::string& n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  fs::create_directories(work);
  try {
    if (wanted("oracle")) check_oracle_equivalence();
    if (wanted("gradients")) check_gradients();
    if (wanted("metrics")) check_metric_formulas();
    if (wanted("degenerate")) check_degenerate();
    if (wanted("determinism")) check_determinism(work);
    if (wanted("ablation")) check_ablation(work, reuse);
  } catch (const std::exception& e) {
    report("acceptance-harness", false, std::string("exception: ") + e.what());
  }
  std::size_t failed = 0;
  for (const auto& l : g_lines) failed += !l.pass;
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << (g_lines.size() - failed) << "/" << g_lines.size() << std::endl;
  return failed ? 1 : 0;
}
