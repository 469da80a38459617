// SPDX-License-Identifier: Apache-2.0
#pragma once

// Hybrid prototype distillation. Stage features are compressed into per-class
// mean vectors (prototypes) using labels resized to the stage grid; student
// prototypes of a randomly permuted modality are matched to teacher
// prototypes by a channel-axis KL divergence.

#include <cstdint>
#include <string>
#include <vector>

#include "robustseg/distill_core.hpp"
#include "robustseg/errors.hpp"
#include "robustseg/rng.hpp"
#include "robustseg/seg_model.hpp"
#include "robustseg/subsets.hpp"
#include "robustseg/tensor.hpp"

namespace robustseg {

// Nearest-neighbour resize anchored at the top-left corner: output cell
// (y, x) copies source (floor(y * H / h), floor(x * W / w)).
inline LabelGrid downsample_labels(const LabelGrid& labels, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0 || h > labels.height || w > labels.width) {
    throw ContractError("downsample_labels: target " + std::to_string(h) + "x" + std::to_string(w) +
                        " must be non-empty and no larger than source " +
                        std::to_string(labels.height) + "x" + std::to_string(labels.width));
  }
  LabelGrid out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = y * labels.height / h;
    for (std::size_t x = 0; x < w; ++x) {
      out.at(y, x) = labels.at(sy, x * labels.width / w);
    }
  }
  return out;
}

template <typename T>
struct PrototypeSet {
  std::size_t num_classes = 0;
  std::size_t channels = 0;
  std::vector<T> prototypes;            // num_classes x channels, zero where invalid
  std::vector<std::uint8_t> valid;      // class has at least one pixel
  std::vector<std::size_t> counts;      // pixels per class
  std::size_t modality = 0;
  std::size_t stage = 0;

  std::span<const T> prototype(std::size_t c) const {
    return {prototypes.data() + c * channels, channels};
  }
};

template <typename T>
PrototypeSet<T> compute_prototypes(const FeatureMap<T>& features, const LabelGrid& labels,
                                   std::size_t num_classes, std::size_t modality = 0,
                                   std::size_t stage = 0) {
  if (labels.height != features.height || labels.width != features.width) {
    throw ContractError("compute_prototypes: label grid does not match feature grid");
  }
  PrototypeSet<T> ps;
  ps.num_classes = num_classes;
  ps.channels = features.channels;
  ps.modality = modality;
  ps.stage = stage;
  ps.prototypes.assign(num_classes * features.channels, T{0});
  ps.valid.assign(num_classes, 0);
  ps.counts.assign(num_classes, 0);
  for (std::size_t p = 0; p < features.pixels(); ++p) {
    const std::uint8_t c = labels.data[p];
    if (c == kIgnoreLabel) continue;
    if (c >= num_classes) {
      throw ContractError("compute_prototypes: label " + std::to_string(c) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
    ++ps.counts[c];
    const auto f = features.row(p);
    T* dst = ps.prototypes.data() + c * ps.channels;
    for (std::size_t k = 0; k < ps.channels; ++k) dst[k] += f[k];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (ps.counts[c] == 0) continue;
    ps.valid[c] = 1;
    const T inv = T{1} / static_cast<T>(ps.counts[c]);
    for (std::size_t k = 0; k < ps.channels; ++k) ps.prototypes[c * ps.channels + k] *= inv;
  }
  return ps;
}

enum class PlanGranularity { kPerBatch, kPerStage };

// Maps each teacher modality m to the student modality whose features it is
// distilled against, for every stage. Over present student modalities the
// map is the drawn bijection; an absent teacher modality m is paired with
// order[m mod |present|] (round-robin over the permuted present list).
struct PermutationPlan {
  std::uint64_t seed = 0;
  std::size_t num_modalities = 0;
  ModalityMask present = 0;
  std::vector<std::vector<std::size_t>> order;  // per stage, permuted present list

  std::size_t source(std::size_t stage, std::size_t teacher_modality) const {
    const auto pres = members(present);
    const auto& q = order[stage];
    for (std::size_t j = 0; j < pres.size(); ++j) {
      if (pres[j] == teacher_modality) return q[j];
    }
    return q[teacher_modality % q.size()];
  }

  bool is_identity() const {
    const auto pres = members(present);
    for (const auto& q : order) {
      if (q != pres) return false;
    }
    return true;
  }

  std::string describe(const std::vector<std::string>& modality_names) const {
    std::string s;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (i) s += '|';
      for (auto m : order[i]) s.push_back(modality_initial(modality_names[m]));
    }
    return s;
  }

  static PermutationPlan identity(ModalityMask present, std::size_t num_modalities,
                                  std::size_t num_stages = 4) {
    require(present != 0, "PermutationPlan: no present modality");
    PermutationPlan p;
    p.num_modalities = num_modalities;
    p.present = present;
    p.order.assign(num_stages, members(present));
    return p;
  }
};

inline PermutationPlan sample_permutation(ModalityMask present, std::size_t num_modalities,
                                          std::uint64_t seed,
                                          PlanGranularity granularity = PlanGranularity::kPerBatch,
                                          bool with_replacement = false,
                                          std::size_t num_stages = 4) {
  require(present != 0, "sample_permutation: at least one present modality required");
  PermutationPlan plan = PermutationPlan::identity(present, num_modalities, num_stages);
  plan.seed = seed;
  Rng rng(seed);
  const auto pres = members(present);
  auto draw = [&] {
    std::vector<std::size_t> q = pres;
    if (with_replacement) {
      for (auto& v : q) v = pres[rng.below(pres.size())];
    } else {
      for (std::size_t i = q.size(); i > 1; --i) std::swap(q[i - 1], q[rng.below(i)]);
    }
    return q;
  };
  if (granularity == PlanGranularity::kPerBatch) {
    const auto q = draw();
    for (auto& o : plan.order) o = q;
  } else {
    for (auto& o : plan.order) o = draw();
  }
  return plan;
}

// Per sample, per modality: nullptr when the modality is absent.
template <typename T>
using PyramidSet = std::vector<std::vector<const Pyramid<T>*>>;

// Gradient buffers matching a PyramidSet: [sample][modality][stage], empty
// pyramid for absent modalities.
template <typename T>
using PyramidGrads = std::vector<std::vector<Pyramid<T>>>;

template <typename T>
PyramidGrads<T> zero_pyramid_grads(const PyramidSet<T>& student) {
  PyramidGrads<T> g(student.size());
  for (std::size_t n = 0; n < student.size(); ++n) {
    g[n].resize(student[n].size());
    for (std::size_t m = 0; m < student[n].size(); ++m) {
      if (!student[n][m]) continue;
      for (const auto& f : *student[n][m]) g[n][m].emplace_back(f.height, f.width, f.channels);
    }
  }
  return g;
}

template <typename T>
struct AuxLoss {
  T value{0};
  std::size_t terms = 0;  // counted (sample, stage, teacher modality) terms
  PyramidGrads<T> grad;
};

namespace detail {

inline const PermutationPlan& plan_for(const std::vector<PermutationPlan>& plans, std::size_t n) {
  return plans.size() == 1 ? plans[0] : plans.at(n);
}

template <typename T>
void check_teacher_full(const PyramidSet<T>& teacher, std::size_t num_modalities) {
  for (const auto& row : teacher) {
    require(row.size() == num_modalities, "teacher pyramids: wrong modality count");
    for (std::size_t m = 0; m < row.size(); ++m) {
      if (!row[m]) {
        throw ContractError("teacher pyramid missing modality " + std::to_string(m) +
                            " (teacher must see full modalities)");
      }
    }
  }
}

}  // namespace detail

// (1/N) sum_n sum_stage sum_m KL(proto(student[source(m)]), proto(teacher[m])).
// Each KL is the channel-axis divergence averaged over classes valid on both
// sides; a term with no such class is skipped.
template <typename T>
AuxLoss<T> hpdm_loss(const PyramidSet<T>& student, const PyramidSet<T>& teacher,
                     const std::vector<const LabelGrid*>& labels,
                     const std::vector<PermutationPlan>& plans, PrototypeMode mode,
                     std::size_t num_classes, KlDirection dir = KlDirection::kTeacherStudent,
                     bool want_grad = true) {
  require(mode != PrototypeMode::kOff, "hpdm_loss: mode must be hybrid or single");
  const std::size_t N = student.size();
  require(N > 0 && teacher.size() == N && labels.size() == N, "hpdm_loss: batch size mismatch");
  require(plans.size() == 1 || plans.size() == N, "hpdm_loss: need one plan or one per sample");
  const std::size_t M = teacher[0].size();
  detail::check_teacher_full(teacher, M);

  AuxLoss<T> r;
  if (want_grad) r.grad = zero_pyramid_grads(student);
  T total{0};
  std::vector<T> g(64);
  for (std::size_t n = 0; n < N; ++n) {
    const PermutationPlan& drawn = detail::plan_for(plans, n);
    ModalityMask present = 0;
    for (std::size_t m = 0; m < student[n].size(); ++m) {
      if (student[n][m]) present |= 1u << m;
    }
    require(present != 0, "hpdm_loss: student has no modality");
    require(drawn.present == present, "hpdm_loss: plan does not match student presence");
    const PermutationPlan plan =
        mode == PrototypeMode::kSingle
            ? PermutationPlan::identity(present, M, teacher[n][0]->size())
            : drawn;
    const std::size_t S = teacher[n][0]->size();
    for (std::size_t i = 0; i < S; ++i) {
      const auto& tf0 = (*teacher[n][0])[i];
      const LabelGrid lab = downsample_labels(*labels[n], tf0.height, tf0.width);
      std::vector<PrototypeSet<T>> sp(M);
      std::vector<bool> have(M, false);
      for (std::size_t m = 0; m < M; ++m) {
        const std::size_t src = plan.source(i, m);
        require(student[n][src] != nullptr, "hpdm_loss: plan selects an absent student modality");
        if (!have[src]) {
          sp[src] = compute_prototypes((*student[n][src])[i], lab, num_classes, src, i);
          have[src] = true;
        }
        const auto tp = compute_prototypes((*teacher[n][m])[i], lab, num_classes, m, i);
        const auto& spp = sp[src];
        require(spp.channels == tp.channels, "hpdm_loss: student/teacher channel mismatch");
        std::size_t nvalid = 0;
        for (std::size_t c = 0; c < num_classes; ++c) nvalid += (spp.valid[c] && tp.valid[c]) ? 1 : 0;
        if (nvalid == 0) continue;
        ++r.terms;
        const T w = T{1} / static_cast<T>(nvalid);
        const T scale = w / static_cast<T>(N);
        g.resize(spp.channels);
        T term{0};
        for (std::size_t c = 0; c < num_classes; ++c) {
          if (!(spp.valid[c] && tp.valid[c])) continue;
          term += kl_row<T>(spp.prototype(c), tp.prototype(c), dir,
                            want_grad ? std::span<T>(g) : std::span<T>{});
          if (!want_grad) continue;
          // d proto_c / d f_j = 1 / count_c for each pixel j of class c.
          const T pix = scale / static_cast<T>(spp.counts[c]);
          auto& gf = r.grad[n][src][i];
          for (std::size_t p = 0; p < lab.pixels(); ++p) {
            if (lab.data[p] != c) continue;
            auto row = gf.row(p);
            for (std::size_t k = 0; k < row.size(); ++k) row[k] += pix * g[k];
          }
        }
        total += term * w;
      }
    }
  }
  r.value = total / static_cast<T>(N);
  return r;
}

}  // namespace robustseg
