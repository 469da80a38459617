// SPDX-License-Identifier: Apache-2.0
#pragma once

// Representation regularization. For each (sample, stage, teacher modality)
// the student stage feature and the teacher stage feature are perturbed by
// Gaussian noise; the Monte-Carlo mean of the squared gradient norm of the
// pixel-averaged feature KL (a functional Fisher information estimate) is
// inverted with an epsilon stabilizer and summed.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "robustseg/distill_core.hpp"
#include "robustseg/errors.hpp"
#include "robustseg/hpdm.hpp"
#include "robustseg/rng.hpp"
#include "robustseg/tensor.hpp"

namespace robustseg {

struct PerturbationSpec {
  enum class SigmaPolicy { kAbsolute, kRelative };
  SigmaPolicy sigma_policy = SigmaPolicy::kRelative;
  double sigma = 0.5;  // absolute value, or multiplier of the feature std
  std::size_t samples = 4;
  double epsilon = 1e-3;
  bool paired_noise = true;

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("rrm: sigma must be > 0");
    if (samples < 1) throw ConfigError("rrm: sample count must be >= 1");
    if (!(epsilon > 0.0)) throw ConfigError("rrm: epsilon must be > 0");
  }
};

// Floor applied to the reference std so a constant feature map still gets a
// positive sigma.
inline constexpr double kMinReferenceStd = 1e-6;

template <typename T>
double feature_std(const std::vector<const FeatureMap<T>*>& maps) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto* f : maps) {
    for (T v : f->data) {
      sum += static_cast<double>(v);
      sq += static_cast<double>(v) * static_cast<double>(v);
      ++n;
    }
  }
  require(n > 0, "feature_std: empty input");
  const double mean = sum / static_cast<double>(n);
  return std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
}

template <typename T>
double resolve_sigma(const PerturbationSpec& spec, const std::vector<const FeatureMap<T>*>& reference) {
  if (spec.sigma_policy == PerturbationSpec::SigmaPolicy::kAbsolute) return spec.sigma;
  return spec.sigma * std::max(feature_std(reference), kMinReferenceStd);
}

template <typename T>
struct NoisePair {
  FeatureMap<T> zx;
  FeatureMap<T> zt;
};

namespace detail {

template <typename T>
void require_finite(const FeatureMap<T>& f, const char* what) {
  for (T v : f.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw ContractError(std::string(what) + ": non-finite feature value");
    }
  }
}

}  // namespace detail

// S noisy copies. Under paired noise the teacher copy receives the same draw;
// otherwise a second draw follows the first for each sample.
template <typename T>
std::vector<NoisePair<T>> perturb_features(const FeatureMap<T>& f, const FeatureMap<T>& t,
                                           const PerturbationSpec& spec, double sigma, Rng& rng) {
  require_same_shape(f, t, "perturb_features");
  require(spec.samples >= 1, "perturb_features: sample count must be >= 1");
  detail::require_finite(f, "perturb_features");
  detail::require_finite(t, "perturb_features");
  std::vector<NoisePair<T>> out;
  out.reserve(spec.samples);
  for (std::size_t s = 0; s < spec.samples; ++s) {
    NoisePair<T> np{f, t};
    for (std::size_t k = 0; k < f.data.size(); ++k) {
      const T e = static_cast<T>(sigma * rng.normal());
      np.zx.data[k] += e;
      if (spec.paired_noise) np.zt.data[k] += e;
    }
    if (!spec.paired_noise) {
      for (auto& v : np.zt.data) v += static_cast<T>(sigma * rng.normal());
    }
    out.push_back(std::move(np));
  }
  return out;
}

// Gradient r = d kl / d z for one row and the product H r of the row Hessian
// with that gradient.
template <typename T>
void kl_row_grad_hvp(std::span<const T> z, std::span<const T> zt, KlDirection dir,
                     std::vector<T>& ls, std::vector<T>& lt, std::vector<T>& r,
                     std::vector<T>& hr) {
  const std::size_t C = z.size();
  ls.resize(C);
  lt.resize(C);
  r.resize(C);
  hr.resize(C);
  log_softmax<T>(z, ls);
  log_softmax<T>(zt, lt);
  if (dir == KlDirection::kTeacherStudent) {
    T pr{0};
    for (std::size_t c = 0; c < C; ++c) {
      r[c] = std::exp(ls[c]) - std::exp(lt[c]);
      pr += std::exp(ls[c]) * r[c];
    }
    for (std::size_t c = 0; c < C; ++c) hr[c] = std::exp(ls[c]) * (r[c] - pr);
    return;
  }
  // r = p * (a - p.a), a = log p - log q.
  T pa{0};
  for (std::size_t c = 0; c < C; ++c) pa += std::exp(ls[c]) * (ls[c] - lt[c]);
  for (std::size_t c = 0; c < C; ++c) r[c] = std::exp(ls[c]) * ((ls[c] - lt[c]) - pa);
  // Differentiate r along v = r: dp = p*(v - p.v), da = v - p.v.
  T pv{0};
  for (std::size_t c = 0; c < C; ++c) pv += std::exp(ls[c]) * r[c];
  T dpa{0}, pda{0};
  for (std::size_t c = 0; c < C; ++c) {
    const T p = std::exp(ls[c]);
    const T dp = p * (r[c] - pv);
    const T da = r[c] - pv;
    dpa += dp * (ls[c] - lt[c]);
    pda += p * da;
  }
  for (std::size_t c = 0; c < C; ++c) {
    const T p = std::exp(ls[c]);
    const T a = ls[c] - lt[c];
    const T dp = p * (r[c] - pv);
    const T da = r[c] - pv;
    hr[c] = dp * a + p * da - dp * pa - p * (dpa + pda);
  }
}

template <typename T>
struct FisherTerm {
  T estimate{0};         // mean over samples of ||grad_z KL||^2
  T sample_variance{0};  // unbiased variance of the per-sample values (0 when S = 1)
  T inverse{0};          // 1 / (estimate + epsilon)
  FeatureMap<T> grad;    // d inverse / d f, empty unless requested
};

// KL(z^x, z^t) here is the channel-axis divergence averaged over pixels.
template <typename T>
FisherTerm<T> fisher_term(const FeatureMap<T>& f, const FeatureMap<T>& t,
                          const PerturbationSpec& spec, double sigma, Rng& rng,
                          KlDirection dir = KlDirection::kTeacherStudent, bool want_grad = true) {
  if (spec.samples == 0) throw ContractError("fisher_term: sample count must be >= 1");
  const auto pairs = perturb_features(f, t, spec, sigma, rng);
  const std::size_t P = f.pixels();
  const T invP = T{1} / static_cast<T>(P);
  FisherTerm<T> ft;
  FeatureMap<T> dF;
  if (want_grad) dF = FeatureMap<T>(f.height, f.width, f.channels);
  std::vector<T> ls, lt, r, hr, per_sample;
  for (const auto& np : pairs) {
    T norm{0};
    for (std::size_t p = 0; p < P; ++p) {
      kl_row_grad_hvp<T>(np.zx.row(p), np.zt.row(p), dir, ls, lt, r, hr);
      for (T v : r) norm += v * v;
      if (want_grad) {
        // d ||g||^2 / d f at this pixel: 2 H g with g = r / P and H = H_row / P.
        auto d = dF.row(p);
        for (std::size_t c = 0; c < r.size(); ++c) d[c] += T{2} * hr[c];
      }
    }
    per_sample.push_back(norm * invP * invP);
  }
  const T S = static_cast<T>(pairs.size());
  for (T v : per_sample) ft.estimate += v;
  ft.estimate /= S;
  if (pairs.size() > 1) {
    for (T v : per_sample) ft.sample_variance += (v - ft.estimate) * (v - ft.estimate);
    ft.sample_variance /= (S - T{1});
  }
  const T denom = ft.estimate + static_cast<T>(spec.epsilon);
  ft.inverse = T{1} / denom;
  if (want_grad) {
    const T scale = -ft.inverse * ft.inverse * invP * invP / S;
    for (auto& v : dF.data) v *= scale;
    ft.grad = std::move(dF);
  }
  return ft;
}

template <typename T>
struct RrmLoss : AuxLoss<T> {
  std::vector<std::vector<double>> sigma;  // [stage][teacher modality]
  T min_inverse{0};
  T max_inverse{0};
};

// Seed of the noise stream of one (sample, stage, teacher modality) term.
inline std::uint64_t rrm_term_seed(std::uint64_t base, std::size_t n, std::size_t stage,
                                   std::size_t modality) {
  return derive_seed(base, "rrm", {n, stage, modality});
}

// (1/N) sum_n sum_stage sum_m 1 / (F(student[source(m)], teacher[m]) + eps).
// Single mode pairs m with m (round-robin fallback to a present modality when
// m is absent); hybrid mode follows the permutation plan. Sigma under the
// relative policy is resolved per (stage, teacher modality) from the teacher
// features of the batch, so it is constant with respect to the student.
template <typename T>
RrmLoss<T> rrm_loss(const PyramidSet<T>& student, const PyramidSet<T>& teacher,
                    const PerturbationSpec& spec, RegularizerMode mode,
                    const std::vector<PermutationPlan>& plans, std::uint64_t seed,
                    KlDirection dir = KlDirection::kTeacherStudent, bool want_grad = true) {
  require(mode != RegularizerMode::kOff, "rrm_loss: mode must be single or hybrid");
  spec.validate();
  const std::size_t N = student.size();
  require(N > 0 && teacher.size() == N, "rrm_loss: batch size mismatch");
  require(plans.size() == 1 || plans.size() == N, "rrm_loss: need one plan or one per sample");
  const std::size_t M = teacher[0].size();
  detail::check_teacher_full(teacher, M);
  const std::size_t stages = teacher[0][0]->size();

  RrmLoss<T> r;
  if (want_grad) r.grad = zero_pyramid_grads(student);
  r.sigma.assign(stages, std::vector<double>(M, 0.0));
  for (std::size_t i = 0; i < stages; ++i) {
    for (std::size_t m = 0; m < M; ++m) {
      std::vector<const FeatureMap<T>*> ref;
      for (std::size_t n = 0; n < N; ++n) ref.push_back(&(*teacher[n][m])[i]);
      r.sigma[i][m] = resolve_sigma(spec, ref);
    }
  }
  const T invN = T{1} / static_cast<T>(N);
  bool first = true;
  T total{0};
  for (std::size_t n = 0; n < N; ++n) {
    ModalityMask present = 0;
    for (std::size_t m = 0; m < student[n].size(); ++m) {
      if (student[n][m]) present |= 1u << m;
    }
    require(present != 0, "rrm_loss: student has no modality");
    const PermutationPlan& drawn = detail::plan_for(plans, n);
    require(drawn.present == present, "rrm_loss: plan does not match student presence");
    const PermutationPlan plan = mode == RegularizerMode::kSingle
                                     ? PermutationPlan::identity(present, M, stages)
                                     : drawn;
    for (std::size_t i = 0; i < stages; ++i) {
      for (std::size_t m = 0; m < M; ++m) {
        const std::size_t src = plan.source(i, m);
        require(student[n][src] != nullptr, "rrm_loss: plan selects an absent student modality");
        Rng rng(rrm_term_seed(seed, n, i, m));
        const auto ft = fisher_term<T>((*student[n][src])[i], (*teacher[n][m])[i], spec,
                                       r.sigma[i][m], rng, dir, want_grad);
        total += ft.inverse;
        ++r.terms;
        if (first || ft.inverse < r.min_inverse) r.min_inverse = ft.inverse;
        if (first || ft.inverse > r.max_inverse) r.max_inverse = ft.inverse;
        first = false;
        if (want_grad) {
          auto& g = r.grad[n][src][i].data;
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += invN * ft.grad.data[k];
        }
      }
    }
  }
  r.value = total * invN;
  return r;
}

// Gaussian Poincare check on a toy input: for z ~ N(f, sigma^2 I) and fixed t,
// Var(KL(z, t)) <= sigma^2 E ||grad_z KL||^2. `printed_bound` omits sigma^2.
struct VarianceBound {
  double variance = 0.0;
  double bound = 0.0;
  double printed_bound = 0.0;
  bool holds = false;
};

template <typename T>
VarianceBound variance_bound_diagnostic(const FeatureMap<T>& f, const FeatureMap<T>& t,
                                        double sigma, std::size_t draws, std::uint64_t seed,
                                        KlDirection dir = KlDirection::kTeacherStudent) {
  require_same_shape(f, t, "variance_bound_diagnostic");
  require(draws >= 2, "variance_bound_diagnostic: need at least 2 draws");
  Rng rng(seed);
  const std::size_t P = f.pixels();
  std::vector<T> ls, lt, r, hr;
  double sum = 0.0, sq = 0.0, grad_sq = 0.0;
  FeatureMap<T> z = f;
  for (std::size_t d = 0; d < draws; ++d) {
    for (std::size_t k = 0; k < z.data.size(); ++k) {
      z.data[k] = f.data[k] + static_cast<T>(sigma * rng.normal());
    }
    double kl = 0.0, g2 = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      kl += static_cast<double>(kl_row<T>(z.row(p), t.row(p), dir));
      kl_row_grad_hvp<T>(z.row(p), t.row(p), dir, ls, lt, r, hr);
      for (T v : r) g2 += static_cast<double>(v) * static_cast<double>(v);
    }
    kl /= static_cast<double>(P);
    g2 /= static_cast<double>(P) * static_cast<double>(P);
    sum += kl;
    sq += kl * kl;
    grad_sq += g2;
  }
  const double D = static_cast<double>(draws);
  VarianceBound vb;
  vb.variance = (sq - sum * sum / D) / (D - 1.0);
  vb.printed_bound = grad_sq / D;
  vb.bound = sigma * sigma * vb.printed_bound;
  vb.holds = vb.variance <= vb.bound;
  return vb;
}

}  // namespace robustseg
