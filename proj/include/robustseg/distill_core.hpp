// SPDX-License-Identifier: Apache-2.0
#pragma once

// Softmax normalisation, cross-entropy and KL losses, the base distillation
// objective (CE + lambda * KL on logits), total-loss composition and the
// random modality-dropout sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robustseg/errors.hpp"
#include "robustseg/rng.hpp"
#include "robustseg/subsets.hpp"
#include "robustseg/tensor.hpp"

namespace robustseg {

enum class KlDirection {
  kTeacherStudent,  // sum_c P(t) log(P(t) / P(s)), the default
  kStudentTeacher,  // sum_c P(s) log(P(s) / P(t))
};

template <typename T>
void prob_normalize(std::span<const T> x, std::span<T> out) {
  require(!x.empty() && x.size() == out.size(), "prob_normalize: size mismatch");
  T mx = x[0];
  for (T v : x) {
    if (std::isnan(static_cast<double>(v))) throw ContractError("prob_normalize: NaN input");
    mx = std::max(mx, v);
  }
  T sum{0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
}

template <typename T>
std::vector<T> prob_normalize(const std::vector<T>& x) {
  std::vector<T> out(x.size());
  prob_normalize<T>(std::span<const T>(x), std::span<T>(out));
  return out;
}

template <typename T>
void log_softmax(std::span<const T> x, std::span<T> out) {
  T mx = x[0];
  for (T v : x) mx = std::max(mx, v);
  T sum{0};
  for (T v : x) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
}

// KL of one pair of unnormalised rows; grad (if non-empty) receives
// d KL / d student_row.
template <typename T>
T kl_row(std::span<const T> student, std::span<const T> teacher, KlDirection dir,
         std::span<T> grad = {}) {
  const std::size_t C = student.size();
  T ls_buf[64], lt_buf[64];
  std::vector<T> heap;
  T* ls = ls_buf;
  T* lt = lt_buf;
  if (C > 64) {
    heap.resize(2 * C);
    ls = heap.data();
    lt = heap.data() + C;
  }
  log_softmax<T>(student, {ls, C});
  log_softmax<T>(teacher, {lt, C});
  T kl{0};
  if (dir == KlDirection::kTeacherStudent) {
    for (std::size_t c = 0; c < C; ++c) {
      const T q = std::exp(lt[c]);
      kl += q * (lt[c] - ls[c]);
      if (!grad.empty()) grad[c] = std::exp(ls[c]) - q;
    }
  } else {
    T pa{0};
    for (std::size_t c = 0; c < C; ++c) {
      const T p = std::exp(ls[c]);
      kl += p * (ls[c] - lt[c]);
      pa += p * (ls[c] - lt[c]);
    }
    if (!grad.empty()) {
      for (std::size_t c = 0; c < C; ++c) grad[c] = std::exp(ls[c]) * ((ls[c] - lt[c]) - pa);
    }
  }
  return kl;
}

template <typename T>
struct MapLoss {
  T value{0};
  std::size_t counted = 0;
  std::vector<FeatureMap<T>> grad;  // one per batch element, d value / d input
};

// Mean over every row (pixel) of every batch element of the channel-axis KL.
// Rows whose label is `kIgnoreLabel` are excluded when labels are given.
template <typename T>
MapLoss<T> kl_div(const std::vector<const FeatureMap<T>*>& student,
                  const std::vector<const FeatureMap<T>*>& teacher,
                  KlDirection dir = KlDirection::kTeacherStudent,
                  const std::vector<const LabelGrid*>* labels = nullptr, bool want_grad = true) {
  require(student.size() == teacher.size(), "kl_div: batch size mismatch");
  MapLoss<T> r;
  for (std::size_t n = 0; n < student.size(); ++n) {
    require_same_shape(*student[n], *teacher[n], "kl_div");
    if (labels) {
      require((*labels)[n]->pixels() == student[n]->pixels(), "kl_div: label grid size mismatch");
    }
  }
  T total{0};
  for (std::size_t n = 0; n < student.size(); ++n) {
    const auto& s = *student[n];
    const auto& t = *teacher[n];
    if (want_grad) r.grad.emplace_back(s.height, s.width, s.channels);
    for (std::size_t p = 0; p < s.pixels(); ++p) {
      if (labels && (*labels)[n]->data[p] == kIgnoreLabel) continue;
      std::span<T> g = want_grad ? r.grad.back().row(p) : std::span<T>{};
      total += kl_row<T>(s.row(p), t.row(p), dir, g);
      ++r.counted;
    }
  }
  if (r.counted == 0) return r;
  r.value = total / static_cast<T>(r.counted);
  if (want_grad) {
    const T inv = T{1} / static_cast<T>(r.counted);
    for (auto& g : r.grad) {
      for (auto& v : g.data) v *= inv;
    }
  }
  return r;
}

template <typename T>
T kl_div(const FeatureMap<T>& student, const FeatureMap<T>& teacher,
         KlDirection dir = KlDirection::kTeacherStudent) {
  return kl_div<T>(std::vector<const FeatureMap<T>*>{&student},
                   std::vector<const FeatureMap<T>*>{&teacher}, dir, nullptr, false)
      .value;
}

template <typename T>
struct CeLoss {
  T value{0};
  std::size_t counted = 0;
  bool all_ignored = false;  // warning flag: value defined as 0
  std::vector<FeatureMap<T>> grad;
};

// Mean over all non-ignored pixels of the batch of -log softmax(logits)[label].
template <typename T>
CeLoss<T> ce_loss(const std::vector<const FeatureMap<T>*>& logits,
                  const std::vector<const LabelGrid*>& labels, bool want_grad = true) {
  require(logits.size() == labels.size(), "ce_loss: batch size mismatch");
  CeLoss<T> r;
  T total{0};
  std::vector<T> lsm;
  for (std::size_t n = 0; n < logits.size(); ++n) {
    const auto& x = *logits[n];
    const auto& y = *labels[n];
    require(x.pixels() == y.pixels(), "ce_loss: label grid size mismatch");
    const std::size_t C = x.channels;
    lsm.resize(C);
    if (want_grad) r.grad.emplace_back(x.height, x.width, C);
    for (std::size_t p = 0; p < x.pixels(); ++p) {
      const std::uint8_t lab = y.data[p];
      if (lab == kIgnoreLabel) continue;
      if (lab >= C) {
        throw ContractError("ce_loss: label " + std::to_string(lab) + " outside [0, " +
                            std::to_string(C) + ")");
      }
      log_softmax<T>(x.row(p), lsm);
      total -= lsm[lab];
      ++r.counted;
      if (want_grad) {
        auto g = r.grad.back().row(p);
        for (std::size_t c = 0; c < C; ++c) g[c] = std::exp(lsm[c]);
        g[lab] -= T{1};
      }
    }
  }
  if (r.counted == 0) {
    r.all_ignored = true;
    return r;
  }
  r.value = total / static_cast<T>(r.counted);
  if (want_grad) {
    const T inv = T{1} / static_cast<T>(r.counted);
    for (auto& g : r.grad) {
      for (auto& v : g.data) v *= inv;
    }
  }
  return r;
}

template <typename T>
struct OriginLoss {
  T total{0};
  T ce{0};
  T kl{0};
  bool all_ignored = false;
  std::vector<FeatureMap<T>> grad;  // d total / d student logits
};

// CE + lambda * KL(teacher || student) on logits. Ignore pixels are excluded
// from both terms.
template <typename T>
OriginLoss<T> l_origin(const std::vector<const FeatureMap<T>*>& student_logits,
                       const std::vector<const FeatureMap<T>*>& teacher_logits,
                       const std::vector<const LabelGrid*>& labels, double lambda,
                       KlDirection dir = KlDirection::kTeacherStudent, bool want_grad = true) {
  require(lambda >= 0.0, "l_origin: lambda must be >= 0");
  OriginLoss<T> r;
  CeLoss<T> ce = ce_loss<T>(student_logits, labels, want_grad);
  r.ce = ce.value;
  r.all_ignored = ce.all_ignored;
  r.grad = std::move(ce.grad);
  if (lambda != 0.0) {
    MapLoss<T> kl = kl_div<T>(student_logits, teacher_logits, dir, &labels, want_grad);
    r.kl = kl.value;
    if (want_grad && kl.counted > 0) {
      const T lam = static_cast<T>(lambda);
      for (std::size_t n = 0; n < r.grad.size(); ++n) {
        for (std::size_t i = 0; i < r.grad[n].data.size(); ++i) {
          r.grad[n].data[i] += lam * kl.grad[n].data[i];
        }
      }
    }
  } else {
    require(student_logits.size() == teacher_logits.size(), "l_origin: batch size mismatch");
  }
  r.total = r.ce + static_cast<T>(lambda) * r.kl;
  return r;
}

// --- composition ------------------------------------------------------------

enum class PrototypeMode { kHybrid, kSingle, kOff };
enum class RegularizerMode { kSingle, kHybrid, kOff };

struct LossWeights {
  double lambda = 50.0;
  double alpha = 100.0;
  double beta = 12.0;
  PrototypeMode prototype_mode = PrototypeMode::kHybrid;
  RegularizerMode regularizer_mode = RegularizerMode::kSingle;
  KlDirection kl_direction = KlDirection::kTeacherStudent;

  void validate() const {
    if (!(lambda >= 0) || !(alpha >= 0) || !(beta >= 0)) {
      throw ConfigError("loss weights must be non-negative");
    }
  }
};

struct LossParts {
  double origin = 0.0;
  std::optional<double> proto;
  std::optional<double> reg;
};

struct LossBreakdown {
  double origin = 0.0;
  double proto = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

inline LossBreakdown total_loss(const LossParts& parts, const LossWeights& w) {
  LossBreakdown b;
  b.origin = parts.origin;
  if (w.prototype_mode != PrototypeMode::kOff) {
    if (!parts.proto) throw CompositionError("total_loss: prototype term required but missing");
    b.proto = *parts.proto;
  }
  if (w.regularizer_mode != RegularizerMode::kOff) {
    if (!parts.reg) throw CompositionError("total_loss: regularizer term required but missing");
    b.reg = *parts.reg;
  }
  b.total = b.origin + w.alpha * b.proto + w.beta * b.reg;
  return b;
}

// --- modality dropout --------------------------------------------------------

struct DropoutPolicy {
  enum class Kind { kUniformSubsets, kBernoulli, kWeighted };
  Kind kind = Kind::kUniformSubsets;
  double keep_prob = 0.5;       // kBernoulli; empty draws are rejected
  std::vector<double> weights;  // kWeighted; indexed by mask, weights[0] must be 0
  bool per_sample = false;      // resample per sample instead of per batch

  void validate(std::size_t num_modalities) const {
    if (num_modalities < 1 || num_modalities > kMaxModalities) {
      throw ConfigError("dropout: modality count out of range");
    }
    if (kind == Kind::kBernoulli && !(keep_prob > 0.0 && keep_prob <= 1.0)) {
      throw ConfigError("dropout: keep_prob must be in (0, 1]");
    }
    if (kind == Kind::kWeighted) {
      if (weights.size() != (std::size_t{1} << num_modalities)) {
        throw ConfigError("dropout: weights must have 2^M entries");
      }
      if (weights[0] != 0.0) throw ConfigError("dropout: empty subset must have probability 0");
      double sum = 0.0;
      for (double w : weights) {
        if (w < 0.0) throw ConfigError("dropout: negative subset probability");
        sum += w;
      }
      if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("dropout: subset probabilities must sum to 1");
    }
  }
};

inline ModalityMask sample_dropout_subset(const DropoutPolicy& policy, std::size_t num_modalities,
                                          Rng& rng) {
  const ModalityMask full = full_mask(num_modalities);
  if (num_modalities == 1) return full;
  switch (policy.kind) {
    case DropoutPolicy::Kind::kUniformSubsets:
      return static_cast<ModalityMask>(1 + rng.below(full));
    case DropoutPolicy::Kind::kBernoulli:
      while (true) {
        ModalityMask m = 0;
        for (std::size_t i = 0; i < num_modalities; ++i) {
          if (rng.bernoulli(policy.keep_prob)) m |= 1u << i;
        }
        if (m != 0) return m;
      }
    case DropoutPolicy::Kind::kWeighted: {
      const double u = rng.uniform();
      double acc = 0.0;
      ModalityMask last = full;
      for (ModalityMask m = 1; m <= full; ++m) {
        if (policy.weights[m] <= 0.0) continue;
        acc += policy.weights[m];
        last = m;
        if (u < acc) return m;
      }
      return last;
    }
  }
  return full;
}

}  // namespace robustseg
