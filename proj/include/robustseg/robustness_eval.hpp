// SPDX-License-Identifier: Apache-2.0
#pragma once

// Missing-modality (EMM, RMM) and noisy-modality (NM) evaluation, the text
// report format and the side-by-side report comparison.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "robustseg/errors.hpp"
#include "robustseg/metrics.hpp"
#include "robustseg/rng.hpp"
#include "robustseg/seg_model.hpp"
#include "robustseg/subsets.hpp"
#include "robustseg/synth_data.hpp"
#include "robustseg/tensor.hpp"

namespace robustseg {

enum class MissingSemantics { kDrop, kZeroFill };

inline std::string semantics_name(MissingSemantics s) {
  return s == MissingSemantics::kDrop ? "drop" : "zero-fill";
}

inline MissingSemantics parse_semantics(const std::string& s) {
  if (s == "drop") return MissingSemantics::kDrop;
  if (s == "zero-fill" || s == "zero") return MissingSemantics::kZeroFill;
  throw ConfigError("unknown missing-modality semantics '" + s + "' (drop | zero-fill)");
}

struct NoiseSpec {
  std::string level = "low";
  double mu = 0.0;
  double sigma = 0.05;
  double density = 0.01;

  void validate() const {
    if (!(density >= 0.0 && density <= 1.0)) {
      throw SpecError("noise: salt-and-pepper density " + std::to_string(density) +
                      " outside [0, 1]");
    }
    if (!(sigma >= 0.0)) throw SpecError("noise: sigma must be >= 0");
  }
};

inline NoiseSpec noise_level(const std::string& name) {
  if (name == "none") return {"none", 0.0, 0.0, 0.0};
  if (name == "low") return {"low", 0.0, 0.05, 0.01};
  if (name == "mid") return {"mid", 0.0, 0.1, 0.05};
  if (name == "high") return {"high", 0.0, 0.2, 0.1};
  throw ConfigError("unknown noise level '" + name + "' (none | low | mid | high)");
}

// clamp(x + N(mu, sigma), 0, 1), then a fraction `density` of pixels is set
// to 0 or 1 (all channels) with equal probability.
inline FeatureMap<float> inject_noise(const FeatureMap<float>& x, const NoiseSpec& noise, Rng& rng,
                                      std::size_t* corrupted = nullptr) {
  noise.validate();
  FeatureMap<float> out = x;
  if (noise.sigma > 0.0 || noise.mu != 0.0) {
    for (auto& v : out.data) {
      v = static_cast<float>(std::clamp(static_cast<double>(v) + noise.mu + noise.sigma * rng.normal(), 0.0, 1.0));
    }
  }
  std::size_t hit = 0;
  if (noise.density > 0.0) {
    for (std::size_t p = 0; p < out.pixels(); ++p) {
      if (!rng.bernoulli(noise.density)) continue;
      const float v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
      for (auto& c : out.row(p)) c = v;
      ++hit;
    }
  }
  if (corrupted) *corrupted = hit;
  return out;
}

enum class MaskGranularity { kPixel, kBlock };

// Zeroes each pixel (or block of pixels) independently with probability `rate`.
inline FeatureMap<float> partial_zero(const FeatureMap<float>& x, double rate, Rng& rng,
                                      MaskGranularity granularity = MaskGranularity::kPixel,
                                      std::size_t block = 8, std::size_t* zeroed = nullptr) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw SpecError("partial_zero: rate outside [0, 1]");
  FeatureMap<float> out = x;
  std::size_t hit = 0;
  auto zero = [&](std::size_t p) {
    for (auto& c : out.row(p)) c = 0.0f;
    ++hit;
  };
  if (granularity == MaskGranularity::kPixel) {
    for (std::size_t p = 0; p < out.pixels(); ++p) {
      if (rng.bernoulli(rate)) zero(p);
    }
  } else {
    require(block > 0, "partial_zero: block size must be > 0");
    for (std::size_t by = 0; by < out.height; by += block) {
      for (std::size_t bx = 0; bx < out.width; bx += block) {
        if (!rng.bernoulli(rate)) continue;
        for (std::size_t y = by; y < std::min(out.height, by + block); ++y) {
          for (std::size_t x = bx; x < std::min(out.width, bx + block); ++x) zero(y * out.width + x);
        }
      }
    }
  }
  if (zeroed) *zeroed = hit;
  return out;
}

struct EvalSpec {
  double p = 0.2;              // missing ratio used for the expected aggregates
  double rmm_rate = -1.0;      // pixel zeroing rate for RMM; negative means p
  MissingSemantics semantics = MissingSemantics::kDrop;
  NoiseSpec noise = noise_level("low");
  std::vector<ModalityMask> subsets;  // empty: every non-empty subset
  bool renormalize = false;
  MaskGranularity rmm_granularity = MaskGranularity::kPixel;
  std::size_t rmm_block = 8;
  std::uint64_t seed = 0;

  double effective_rmm_rate() const { return rmm_rate < 0.0 ? p : rmm_rate; }

  void validate() const {
    if (!(p >= 0.0 && p < 1.0)) throw SpecError("eval: missing ratio p must be in [0, 1)");
    if (rmm_rate > 1.0) throw SpecError("eval: rmm rate must be <= 1");
    noise.validate();
  }
};

// Maps one forward input set (nullptr = modality not passed) to a prediction.
using Predictor = std::function<LabelGrid(const std::vector<const FeatureMap<float>*>&)>;

inline LabelGrid argmax_labels(const FeatureMap<float>& logits) {
  LabelGrid out(logits.height, logits.width);
  for (std::size_t p = 0; p < logits.pixels(); ++p) {
    const auto row = logits.row(p);
    out.data[p] = static_cast<std::uint8_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

inline Predictor model_predictor(const SegModel<float>& model) {
  return [&model](const std::vector<const FeatureMap<float>*>& inputs) {
    return argmax_labels(model.forward(inputs).logits);
  };
}

inline std::uint64_t eval_stream_seed(std::uint64_t base, const std::string& tag, ModalityMask subset,
                                      std::size_t sample, std::size_t modality) {
  return derive_seed(base, tag, {subset, sample, modality});
}

// mIoU of one subset: present modalities pass through, missing ones are
// dropped or zero-filled.
inline double subset_miou(const Predictor& predict, const Dataset& ds, ModalityMask subset,
                          MissingSemantics semantics) {
  ConfusionMatrix cm(ds.spec.num_classes);
  for (const auto& s : ds.samples) {
    std::vector<FeatureMap<float>> zeros;
    zeros.reserve(s.modalities.size());
    std::vector<const FeatureMap<float>*> in(s.modalities.size(), nullptr);
    for (std::size_t m = 0; m < s.modalities.size(); ++m) {
      if (has(subset, m)) {
        in[m] = &s.modalities[m];
      } else if (semantics == MissingSemantics::kZeroFill) {
        const auto& x = s.modalities[m];
        zeros.emplace_back(x.height, x.width, x.channels);
        in[m] = &zeros.back();
      }
    }
    cm.add(predict(in), s.label);
  }
  return miou(cm).miou;
}

// Intact modalities in `subset`; the rest are partially zeroed at `rate`.
inline double rmm_subset_miou(const Predictor& predict, const Dataset& ds, ModalityMask subset,
                              const EvalSpec& spec) {
  ConfusionMatrix cm(ds.spec.num_classes);
  const double rate = spec.effective_rmm_rate();
  for (std::size_t n = 0; n < ds.samples.size(); ++n) {
    const auto& s = ds.samples[n];
    std::vector<FeatureMap<float>> masked;
    masked.reserve(s.modalities.size());
    std::vector<const FeatureMap<float>*> in(s.modalities.size(), nullptr);
    for (std::size_t m = 0; m < s.modalities.size(); ++m) {
      if (has(subset, m)) {
        in[m] = &s.modalities[m];
        continue;
      }
      Rng rng(eval_stream_seed(spec.seed, "rmm", subset, n, m));
      masked.push_back(partial_zero(s.modalities[m], rate, rng, spec.rmm_granularity, spec.rmm_block));
      in[m] = &masked.back();
    }
    cm.add(predict(in), s.label);
  }
  return miou(cm).miou;
}

inline double nm_score(const Predictor& predict, const Dataset& ds, const NoiseSpec& noise,
                       std::uint64_t seed) {
  noise.validate();
  ConfusionMatrix cm(ds.spec.num_classes);
  for (std::size_t n = 0; n < ds.samples.size(); ++n) {
    const auto& s = ds.samples[n];
    std::vector<FeatureMap<float>> noisy;
    noisy.reserve(s.modalities.size());
    std::vector<const FeatureMap<float>*> in;
    for (std::size_t m = 0; m < s.modalities.size(); ++m) {
      Rng rng(eval_stream_seed(seed, "nm", full_mask(s.modalities.size()), n, m));
      noisy.push_back(inject_noise(s.modalities[m], noise, rng));
      in.push_back(&noisy.back());
    }
    cm.add(predict(in), s.label);
  }
  return miou(cm).miou;
}

struct SubsetScore {
  std::string subset;
  ModalityMask mask = 0;
  double miou = 0.0;
};

struct SubsetScores {
  std::vector<SubsetScore> rows;
  double avg = 0.0;
  double expected = 0.0;
};

inline std::vector<ModalityMask> eval_subsets(const EvalSpec& spec, std::size_t M) {
  return spec.subsets.empty() ? enumerate_subsets(M) : spec.subsets;
}

namespace detail {

inline SubsetScores aggregate(std::vector<SubsetScore> rows, std::size_t M, const EvalSpec& spec) {
  SubsetScores out;
  out.rows = std::move(rows);
  std::vector<double> v;
  for (const auto& r : out.rows) v.push_back(r.miou);
  out.avg = average_over_subsets(v);
  if (out.rows.size() == enumerate_subsets(M).size()) {
    out.expected = expected_over_subsets(v, M, spec.p, spec.renormalize);
  } else {
    double s = 0.0;
    for (const auto& r : out.rows) s += subset_probability(M - popcount(r.mask), M, spec.p) * r.miou;
    out.expected = s;
  }
  return out;
}

}  // namespace detail

inline SubsetScores emm_scores(const Predictor& predict, const Dataset& ds, const EvalSpec& spec) {
  spec.validate();
  const std::size_t M = ds.num_modalities();
  std::vector<SubsetScore> rows;
  for (ModalityMask s : eval_subsets(spec, M)) {
    rows.push_back({subset_name(s, ds.spec.modalities), s, subset_miou(predict, ds, s, spec.semantics)});
  }
  return detail::aggregate(std::move(rows), M, spec);
}

inline SubsetScores rmm_scores(const Predictor& predict, const Dataset& ds, const EvalSpec& spec) {
  spec.validate();
  const std::size_t M = ds.num_modalities();
  std::vector<SubsetScore> rows;
  for (ModalityMask s : eval_subsets(spec, M)) {
    rows.push_back({subset_name(s, ds.spec.modalities), s, rmm_subset_miou(predict, ds, s, spec)});
  }
  return detail::aggregate(std::move(rows), M, spec);
}

// --- report ------------------------------------------------------------------

struct EvalReport {
  std::vector<std::pair<std::string, std::string>> meta;  // written in order
  std::vector<SubsetScore> emm;
  std::vector<SubsetScore> rmm;
  double emm_avg = 0.0, emm_expected = 0.0;
  double rmm_avg = 0.0, rmm_expected = 0.0;
  double nm = 0.0;

  const std::string* find_meta(const std::string& key) const {
    for (const auto& kv : meta) {
      if (kv.first == key) return &kv.second;
    }
    return nullptr;
  }

  double emm_row(const std::string& subset) const {
    for (const auto& r : emm) {
      if (r.subset == subset) return r.miou;
    }
    throw LookupError("report has no subset row '" + subset + "'");
  }
};

inline std::string format_value(double v, int decimals = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline EvalReport evaluate_report(const Predictor& predict, const Dataset& ds, const EvalSpec& spec,
                                  const std::string& checkpoint_id) {
  spec.validate();
  EvalReport r;
  const auto emm = emm_scores(predict, ds, spec);
  const auto rmm = rmm_scores(predict, ds, spec);
  r.emm = emm.rows;
  r.rmm = rmm.rows;
  r.emm_avg = emm.avg;
  r.emm_expected = emm.expected;
  r.rmm_avg = rmm.avg;
  r.rmm_expected = rmm.expected;
  r.nm = nm_score(predict, ds, spec.noise, spec.seed);
  r.meta = {
      {"checkpoint", checkpoint_id},
      {"dataset", ds.id},
      {"split", ds.split},
      {"samples", std::to_string(ds.size())},
      {"semantics", semantics_name(spec.semantics)},
      {"p", format_value(spec.p)},
      {"rmm_rate", format_value(spec.effective_rmm_rate())},
      {"rmm_mask", spec.rmm_granularity == MaskGranularity::kPixel ? "pixel" : "block"},
      {"renormalize", spec.renormalize ? "true" : "false"},
      {"noise_level", spec.noise.level},
      {"noise_mu", format_value(spec.noise.mu)},
      {"noise_sigma", format_value(spec.noise.sigma)},
      {"noise_density", format_value(spec.noise.density)},
      {"seed", std::to_string(spec.seed)},
  };
  return r;
}

inline std::string report_text(const EvalReport& r) {
  std::ostringstream os;
  for (const auto& [k, v] : r.meta) os << k << '\t' << v << '\n';
  os << "emm_avg\t" << format_value(r.emm_avg) << '\n';
  os << "emm_expected\t" << format_value(r.emm_expected) << '\n';
  os << "rmm_avg\t" << format_value(r.rmm_avg) << '\n';
  os << "rmm_expected\t" << format_value(r.rmm_expected) << '\n';
  os << "nm\t" << format_value(r.nm) << '\n';
  os << "subset\tmiou\n";
  for (const auto& row : r.emm) os << row.subset << '\t' << format_value(row.miou) << '\n';
  os << "rmm_subset\tmiou\n";
  for (const auto& row : r.rmm) os << row.subset << '\t' << format_value(row.miou) << '\n';
  return os.str();
}

inline void write_report(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << report_text(r);
  if (!os) throw IoError("write failed: " + path.string());
}

inline EvalReport parse_report(const std::string& text, const std::string& origin = "report") {
  EvalReport r;
  std::istringstream is(text);
  std::string line;
  int section = 0;  // 0 header, 1 emm rows, 2 rmm rows
  std::size_t lineno = 0;
  auto number = [&](const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": bad number '" + v + "'");
    }
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key<TAB>value");
    }
    const std::string k = line.substr(0, tab), v = line.substr(tab + 1);
    if (k == "subset" && v == "miou") {
      section = 1;
      continue;
    }
    if (k == "rmm_subset" && v == "miou") {
      section = 2;
      continue;
    }
    if (section == 1) {
      r.emm.push_back({k, 0, number(v)});
    } else if (section == 2) {
      r.rmm.push_back({k, 0, number(v)});
    } else if (k == "emm_avg") {
      r.emm_avg = number(v);
    } else if (k == "emm_expected") {
      r.emm_expected = number(v);
    } else if (k == "rmm_avg") {
      r.rmm_avg = number(v);
    } else if (k == "rmm_expected") {
      r.rmm_expected = number(v);
    } else if (k == "nm") {
      r.nm = number(v);
    } else {
      r.meta.emplace_back(k, v);
    }
  }
  if (section == 0) throw FormatError(origin + ": missing 'subset<TAB>miou' table");
  return r;
}

inline EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_report(ss.str(), path.string());
}

// --- comparison --------------------------------------------------------------

struct ComparisonTable {
  std::vector<std::string> names;
  std::vector<std::string> subsets;
  std::vector<std::vector<double>> values;  // [report][subset]
  std::vector<double> means;
  std::vector<std::vector<double>> deltas;  // [report][subset] relative to the first report

  std::string to_text() const {
    std::ostringstream os;
    os << "report";
    for (const auto& s : subsets) os << '\t' << s;
    os << "\tMean\n";
    for (std::size_t r = 0; r < names.size(); ++r) {
      os << names[r];
      for (double v : values[r]) os << '\t' << format_value(v, 2);
      os << '\t' << format_value(means[r], 2) << '\n';
    }
    for (std::size_t r = 1; r < names.size(); ++r) {
      os << "delta:" << names[r];
      for (double v : deltas[r]) os << '\t' << format_value(v, 2);
      os << '\t' << format_value(means[r] - means[0], 2) << '\n';
    }
    return os.str();
  }
};

inline ComparisonTable report_compare(const std::vector<EvalReport>& reports,
                                      std::vector<std::string> names = {}) {
  if (reports.empty()) throw ComparisonError("report_compare: no reports");
  if (names.empty()) {
    for (std::size_t i = 0; i < reports.size(); ++i) names.push_back("r" + std::to_string(i));
  }
  require(names.size() == reports.size(), "report_compare: one name per report");
  const std::string* ds0 = reports[0].find_meta("dataset");
  ComparisonTable t;
  t.names = names;
  for (const auto& row : reports[0].emm) t.subsets.push_back(row.subset);
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const std::string* ds = reports[r].find_meta("dataset");
    if ((ds0 == nullptr) != (ds == nullptr) || (ds && *ds != *ds0)) {
      throw ComparisonError("report_compare: " + names[r] + " was evaluated on dataset " +
                            (ds ? *ds : "?") + ", expected " + (ds0 ? *ds0 : "?"));
    }
    if (reports[r].emm.size() != t.subsets.size()) {
      for (const auto& s : reports[r].emm) {
        if (std::find(t.subsets.begin(), t.subsets.end(), s.subset) == t.subsets.end()) {
          throw ComparisonError("report_compare: subset " + s.subset + " missing from " + names[0]);
        }
      }
    }
    std::vector<double> v;
    for (const auto& s : t.subsets) {
      const auto it = std::find_if(reports[r].emm.begin(), reports[r].emm.end(),
                                   [&](const SubsetScore& x) { return x.subset == s; });
      if (it == reports[r].emm.end()) {
        throw ComparisonError("report_compare: subset " + s + " missing from " + names[r]);
      }
      v.push_back(it->miou);
    }
    t.means.push_back(average_over_subsets(v));
    t.values.push_back(std::move(v));
  }
  for (std::size_t r = 0; r < reports.size(); ++r) {
    std::vector<double> d;
    for (std::size_t i = 0; i < t.subsets.size(); ++i) d.push_back(t.values[r][i] - t.values[0][i]);
    t.deltas.push_back(std::move(d));
  }
  return t;
}

}  // namespace robustseg
