// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic synthetic multi-modal scenes. Four sensor analogs are rendered
// from one shared shape layout:
//   rgb   dense; class colour + per-shape jitter + texture noise
//   depth dense; one plane per shape (class-dependent offset, random slope)
//   event sparse; shape boundaries only, intensity from the region colour
//   lidar sparse; one random scanline per 8-row band sampled from depth
// Every modality is stored as an H x W x 3 tensor in [0, 1].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "robustseg/errors.hpp"
#include "robustseg/rmt_io.hpp"
#include "robustseg/rng.hpp"
#include "robustseg/tensor.hpp"

namespace robustseg {

enum class ModalityKind { kRgb, kDepth, kEvent, kLidar };

inline ModalityKind modality_kind(const std::string& name) {
  if (name == "rgb") return ModalityKind::kRgb;
  if (name == "depth") return ModalityKind::kDepth;
  if (name == "event") return ModalityKind::kEvent;
  if (name == "lidar") return ModalityKind::kLidar;
  throw SpecError("unknown modality '" + name + "' (expected rgb, depth, event or lidar)");
}

inline bool is_sparse(ModalityKind k) {
  return k == ModalityKind::kEvent || k == ModalityKind::kLidar;
}

inline char modality_initial(const std::string& name) {
  switch (modality_kind(name)) {
    case ModalityKind::kRgb: return 'R';
    case ModalityKind::kDepth: return 'D';
    case ModalityKind::kEvent: return 'E';
    case ModalityKind::kLidar: return 'L';
  }
  return '?';
}

struct SceneSpec {
  std::uint64_t seed = 7;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 6;
  std::size_t num_shapes = 5;
  std::vector<std::string> modalities = {"rgb", "depth", "event", "lidar"};

  void validate() const {
    if (num_classes < 2) throw SpecError("invalid spec: num_classes must be >= 2");
    if (num_classes > 254) throw SpecError("invalid spec: num_classes must be <= 254");
    if (height < 8 || width < 8) throw SpecError("invalid spec: height and width must be >= 8");
    if (modalities.empty()) throw SpecError("invalid spec: modality list is empty");
    std::string seen;
    for (const auto& m : modalities) {
      const char c = modality_initial(m);
      if (seen.find(c) != std::string::npos) {
        throw SpecError("invalid spec: duplicate modality '" + m + "'");
      }
      seen.push_back(c);
    }
  }

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct ModalitySample {
  std::vector<std::string> modality_names;
  std::vector<FeatureMap<float>> modalities;
  LabelGrid label;
  std::string case_tag = "normal";

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < modality_names.size(); ++i) {
      if (modality_names[i] == name) return i;
    }
    throw LookupError("sample has no modality '" + name + "'");
  }

  friend bool operator==(const ModalitySample&, const ModalitySample&) = default;
};

namespace detail {

struct Shape {
  std::uint8_t cls = 0;
  int kind = 0;  // 0 ellipse, 1 rectangle, 2 diamond
  double cx = 0, cy = 0, rx = 0, ry = 0;
  double depth_base = 0, gx = 0, gy = 0;
  std::array<double, 3> color{};
};

inline std::array<double, 3> class_color(std::size_t c, std::size_t num_classes) {
  static constexpr std::array<std::array<double, 3>, 12> kPalette = {{
      {0.45, 0.45, 0.42}, {0.85, 0.15, 0.15}, {0.15, 0.70, 0.20}, {0.15, 0.25, 0.85},
      {0.90, 0.80, 0.10}, {0.75, 0.20, 0.80}, {0.10, 0.80, 0.80}, {0.95, 0.55, 0.10},
      {0.55, 0.30, 0.10}, {0.95, 0.65, 0.75}, {0.10, 0.35, 0.30}, {0.60, 0.80, 0.45},
  }};
  if (num_classes <= kPalette.size()) return kPalette[c];
  if (c == 0) return kPalette[0];
  // HSV spacing for large class counts.
  const double h = 6.0 * static_cast<double>(c - 1) / static_cast<double>(num_classes - 1);
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h) % 6) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  for (auto& v : rgb) v = 0.1 + 0.8 * v;
  return rgb;
}

inline double luminance(const std::array<double, 3>& c) {
  return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
}

inline bool shape_contains(const Shape& s, double x, double y) {
  const double dx = (x - s.cx) / s.rx;
  const double dy = (y - s.cy) / s.ry;
  switch (s.kind) {
    case 0: return dx * dx + dy * dy <= 1.0;
    case 1: return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
    default: return std::abs(dx) + std::abs(dy) <= 1.0;
  }
}

inline Shape random_shape(Rng& rng, const SceneSpec& spec, std::uint8_t cls) {
  Shape s;
  s.cls = cls;
  const double h = static_cast<double>(spec.height);
  const double w = static_cast<double>(spec.width);
  const double scale = std::min(h, w) / 64.0;
  s.kind = rng.bernoulli(0.8) ? static_cast<int>((cls - 1) % 3) : static_cast<int>(rng.below(3));
  s.rx = rng.uniform(7.0, 16.0) * scale;
  s.ry = rng.uniform(7.0, 16.0) * scale;
  s.cx = rng.uniform(0.1 * w, 0.9 * w);
  s.cy = rng.uniform(0.1 * h, 0.9 * h);
  const double span = spec.num_classes > 2 ? static_cast<double>(spec.num_classes - 2) : 1.0;
  s.depth_base = 0.12 + 0.55 * static_cast<double>(cls - 1) / span + rng.uniform(-0.06, 0.06);
  s.gx = rng.uniform(-0.003, 0.003) / scale;
  s.gy = rng.uniform(-0.003, 0.003) / scale;
  const auto base = class_color(cls, spec.num_classes);
  const double shade = rng.uniform(0.85, 1.15);
  for (int k = 0; k < 3; ++k) {
    s.color[k] = std::clamp(base[k] * shade + rng.uniform(-0.06, 0.06), 0.0, 1.0);
  }
  return s;
}

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

// Renders a scene from its shape list. Rendering consumes its own stream so
// the layout (shape list) and the noise are independently reproducible.
inline ModalitySample render_scene(const SceneSpec& spec, const std::vector<Shape>& shapes,
                                   std::uint64_t noise_seed) {
  const std::size_t H = spec.height, W = spec.width;
  std::vector<std::uint16_t> ids(H * W, 0);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t s = 0; s < shapes.size(); ++s) {
        if (shape_contains(shapes[s], static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
          ids[y * W + x] = static_cast<std::uint16_t>(s + 1);
        }
      }
    }
  }

  ModalitySample out;
  out.label = LabelGrid(H, W, 0);
  for (std::size_t p = 0; p < H * W; ++p) out.label.data[p] = ids[p] ? shapes[ids[p] - 1].cls : 0;

  Rng rng(noise_seed);
  const auto bg_color = class_color(0, spec.num_classes);
  const double bg_shade = rng.uniform(0.9, 1.1);

  // Depth is shared by the depth and lidar analogs.
  std::vector<double> depth(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t p = y * W + x;
      double d;
      if (ids[p] == 0) {
        d = 0.92 - 0.12 * static_cast<double>(y) / static_cast<double>(H - 1);
      } else {
        const Shape& s = shapes[ids[p] - 1];
        d = s.depth_base + s.gx * (static_cast<double>(x) - s.cx) + s.gy * (static_cast<double>(y) - s.cy);
      }
      depth[p] = std::clamp(d + rng.normal(0.0, 0.01), 0.02, 1.0);
    }
  }

  auto region_color = [&](std::size_t p) {
    return ids[p] ? shapes[ids[p] - 1].color : bg_color;
  };

  for (const auto& name : spec.modalities) {
    FeatureMap<float> m(H, W, 3);
    const ModalityKind kind = modality_kind(name);
    if (kind == ModalityKind::kRgb) {
      for (std::size_t p = 0; p < H * W; ++p) {
        const auto c = region_color(p);
        const double shade = ids[p] ? 1.0 : bg_shade;
        for (int k = 0; k < 3; ++k) m.data[p * 3 + k] = clamp01(c[k] * shade + rng.normal(0.0, 0.04));
      }
    } else if (kind == ModalityKind::kDepth) {
      for (std::size_t p = 0; p < H * W; ++p) {
        for (int k = 0; k < 3; ++k) m.data[p * 3 + k] = static_cast<float>(depth[p]);
      }
    } else if (kind == ModalityKind::kEvent) {
      std::vector<std::size_t> active;
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t p = y * W + x;
          const bool edge = (x > 0 && ids[p - 1] != ids[p]) || (x + 1 < W && ids[p + 1] != ids[p]) ||
                            (y > 0 && ids[p - W] != ids[p]) || (y + 1 < H && ids[p + W] != ids[p]);
          if (!edge || rng.bernoulli(0.1)) continue;
          const float v = clamp01(0.2 + 0.8 * luminance(region_color(p)));
          for (int k = 0; k < 3; ++k) m.data[p * 3 + k] = v;
          active.push_back(p);
        }
      }
      // Sparse by construction: never more than half the pixels carry events.
      for (std::size_t i = H * W / 2; i < active.size(); ++i) {
        for (int k = 0; k < 3; ++k) m.data[active[i] * 3 + k] = 0.0f;
      }
    } else {
      for (std::size_t band = 0; band * 8 < H; ++band) {
        const std::size_t rows = std::min<std::size_t>(8, H - band * 8);
        const std::size_t y = band * 8 + rng.below(rows);
        for (std::size_t x = 0; x < W; ++x) {
          if (!rng.bernoulli(0.5)) continue;
          const float v = static_cast<float>(depth[y * W + x]);
          for (int k = 0; k < 3; ++k) m.data[(y * W + x) * 3 + k] = v;
        }
      }
    }
    out.modality_names.push_back(name);
    out.modalities.push_back(std::move(m));
  }
  return out;
}

}  // namespace detail

// Renders one sample. `extra_classes` are painted as additional top-most
// shapes; generate_dataset uses them to guarantee class coverage of a split.
inline ModalitySample generate_scene(const SceneSpec& spec, std::uint64_t sample_seed,
                                     const std::vector<std::uint8_t>& extra_classes = {}) {
  spec.validate();
  Rng layout(derive_seed(sample_seed, "layout"));
  std::vector<detail::Shape> shapes;
  for (std::size_t s = 0; s < spec.num_shapes; ++s) {
    const auto cls = static_cast<std::uint8_t>(1 + layout.below(spec.num_classes - 1));
    shapes.push_back(detail::random_shape(layout, spec, cls));
  }
  for (auto cls : extra_classes) shapes.push_back(detail::random_shape(layout, spec, cls));
  return detail::render_scene(spec, shapes, derive_seed(sample_seed, "noise"));
}

// --- cases ------------------------------------------------------------------

using CaseFn = std::function<void(ModalitySample&, Rng&)>;
using CaseCatalog = std::map<std::string, CaseFn>;

inline const CaseCatalog& default_case_catalog() {
  static const CaseCatalog catalog = [] {
    CaseCatalog c;
    auto for_kind = [](ModalitySample& s, ModalityKind kind, auto&& fn) {
      for (std::size_t i = 0; i < s.modalities.size(); ++i) {
        if (modality_kind(s.modality_names[i]) == kind) fn(s.modalities[i]);
      }
    };
    c["normal"] = [](ModalitySample&, Rng&) {};
    c["under-exposure-analog"] = [for_kind](ModalitySample& s, Rng&) {
      for_kind(s, ModalityKind::kRgb, [](FeatureMap<float>& m) {
        for (auto& v : m.data) v *= 0.2f;
      });
    };
    c["over-exposure-analog"] = [for_kind](ModalitySample& s, Rng&) {
      for_kind(s, ModalityKind::kRgb, [](FeatureMap<float>& m) {
        for (auto& v : m.data) v = std::min(1.0f, v * 2.0f);
      });
    };
    c["blur-analog"] = [for_kind](ModalitySample& s, Rng&) {
      for_kind(s, ModalityKind::kRgb, [](FeatureMap<float>& m) {
        const FeatureMap<float> src = m;
        const auto H = static_cast<long>(m.height), W = static_cast<long>(m.width);
        for (long y = 0; y < H; ++y) {
          for (long x = 0; x < W; ++x) {
            // Horizontal motion blur, 5 taps.
            for (std::size_t k = 0; k < m.channels; ++k) {
              float acc = 0;
              for (long dx = -2; dx <= 2; ++dx) {
                const long xx = std::clamp(x + dx, 0L, W - 1);
                acc += src.at(y, xx, k);
              }
              m.at(y, x, k) = acc / 5.0f;
            }
          }
        }
      });
    };
    c["jitter-analog"] = [for_kind](ModalitySample& s, Rng& rng) {
      for_kind(s, ModalityKind::kLidar, [&rng](FeatureMap<float>& m) {
        const FeatureMap<float> src = m;
        m.fill(0.0f);
        const auto W = static_cast<long>(m.width);
        for (std::size_t y = 0; y < m.height; ++y) {
          const long shift = static_cast<long>(rng.below(7)) - 3;
          for (long x = 0; x < W; ++x) {
            if (src.at(y, x, 0) == 0.0f) continue;
            const long xx = x + shift;
            if (xx < 0 || xx >= W || rng.bernoulli(0.1)) continue;
            for (std::size_t k = 0; k < m.channels; ++k) m.at(y, xx, k) = src.at(y, x, k);
          }
        }
      });
    };
    return c;
  }();
  return catalog;
}

inline ModalitySample apply_case(const ModalitySample& sample, const std::string& case_name,
                                 std::uint64_t seed, const CaseCatalog& catalog = default_case_catalog()) {
  auto it = catalog.find(case_name);
  if (it == catalog.end()) throw LookupError("unknown case '" + case_name + "'");
  ModalitySample out = sample;
  Rng rng(derive_seed(seed, case_name));
  it->second(out, rng);
  out.case_tag = case_name;
  return out;
}

// --- on-disk dataset ----------------------------------------------------------

struct SampleEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> modality_files;
  std::filesystem::path label_file;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::string split;
  std::vector<SampleEntry> samples;
  std::vector<std::uint64_t> class_histogram;
};

inline std::string sample_id(const std::string& split, std::size_t index) {
  std::ostringstream os;
  os << split << '_' << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

inline std::string scene_spec_text(const SceneSpec& spec) {
  std::ostringstream os;
  os << "seed = " << spec.seed << '\n'
     << "height = " << spec.height << '\n'
     << "width = " << spec.width << '\n'
     << "num_classes = " << spec.num_classes << '\n'
     << "num_shapes = " << spec.num_shapes << '\n'
     << "modalities = ";
  for (std::size_t i = 0; i < spec.modalities.size(); ++i) os << (i ? "," : "") << spec.modalities[i];
  os << '\n';
  return os.str();
}

inline SceneSpec parse_scene_spec(const std::string& text) {
  SceneSpec spec;
  spec.modalities.clear();
  std::istringstream is(text);
  std::string line;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      if (key == "seed") spec.seed = std::stoull(val);
      else if (key == "height") spec.height = std::stoul(val);
      else if (key == "width") spec.width = std::stoul(val);
      else if (key == "num_classes") spec.num_classes = std::stoul(val);
      else if (key == "num_shapes") spec.num_shapes = std::stoul(val);
      else if (key == "modalities") {
        std::istringstream ms(val);
        std::string m;
        while (std::getline(ms, m, ',')) spec.modalities.push_back(trim(m));
      }
    } catch (const std::exception&) {
      throw FormatError("spec.txt: bad value for '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

inline void write_sample(const ModalitySample& s, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < s.modalities.size(); ++i) {
    write_rmt_file(dir / (s.modality_names[i] + ".rmt"), to_raw(s.modalities[i]));
  }
  write_rmt_file(dir / "label.rmt", to_raw(s.label));
}

inline ModalitySample load_sample(const std::filesystem::path& dir,
                                  const std::vector<std::string>& modality_names,
                                  std::size_t num_classes) {
  ModalitySample s;
  for (const auto& name : modality_names) {
    const auto path = dir / (name + ".rmt");
    FeatureMap<float> m;
    try {
      m = feature_map_from_raw(read_rmt_file(path));
    } catch (const FormatError& e) {
      throw FormatError(std::string(e.what()) + " (" + path.string() + ")");
    }
    if (m.channels != 3) throw FormatError(path.string() + ": dims[2] must be 3");
    if (!s.modalities.empty() &&
        (m.height != s.modalities[0].height || m.width != s.modalities[0].width)) {
      throw FormatError(path.string() + ": dims mismatch with first modality");
    }
    s.modality_names.push_back(name);
    s.modalities.push_back(std::move(m));
  }
  const auto label_path = dir / "label.rmt";
  try {
    s.label = label_grid_from_raw(read_rmt_file(label_path));
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + " (" + label_path.string() + ")");
  }
  if (!s.modalities.empty() &&
      (s.label.height != s.modalities[0].height || s.label.width != s.modalities[0].width)) {
    throw FormatError(label_path.string() + ": dims mismatch with modality tensors");
  }
  for (auto v : s.label.data) {
    if (v >= num_classes && v != kIgnoreLabel) {
      throw ValidationError(label_path.string() + ": label value " + std::to_string(v) +
                            " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  return s;
}

inline std::uint64_t sample_seed(const SceneSpec& spec, const std::string& split, std::size_t index) {
  return derive_seed(spec.seed, split, {index});
}

inline std::vector<std::string> read_manifest_lines(const std::filesystem::path& path) {
  std::vector<std::string> lines;
  std::ifstream is(path);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline DatasetManifest generate_dataset(const SceneSpec& spec, std::size_t count,
                                        const std::string& split,
                                        const std::filesystem::path& root) {
  spec.validate();
  if (count < 1) throw SpecError("invalid spec: count must be >= 1");
  if (split.empty() || split.find_first_of("/\\\t\n") != std::string::npos) {
    throw SpecError("invalid split name '" + split + "'");
  }

  std::vector<std::vector<std::uint8_t>> extras(count);
  std::vector<ModalitySample> samples(count);
  std::vector<std::uint64_t> seeds(count);
  for (std::size_t i = 0; i < count; ++i) {
    seeds[i] = sample_seed(spec, split, i);
    samples[i] = generate_scene(spec, seeds[i]);
  }
  auto histogram = [&] {
    std::vector<std::uint64_t> h(spec.num_classes, 0);
    for (const auto& s : samples) {
      for (auto v : s.label.data) {
        if (v < spec.num_classes) ++h[v];
      }
    }
    return h;
  };
  auto hist = histogram();
  for (std::size_t guard = 0; guard < spec.num_classes; ++guard) {
    bool complete = true;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      if (hist[c] != 0) continue;
      complete = false;
      const std::size_t i = c % count;
      extras[i].push_back(static_cast<std::uint8_t>(c));
      samples[i] = generate_scene(spec, seeds[i], extras[i]);
    }
    if (complete) break;
    hist = histogram();
  }

  DatasetManifest manifest;
  manifest.root = root;
  manifest.split = split;
  manifest.class_histogram = hist;
  for (std::size_t i = 0; i < count; ++i) {
    SampleEntry e;
    e.id = sample_id(split, i);
    e.seed = seeds[i];
    const auto dir = root / split / e.id;
    write_sample(samples[i], dir);
    for (const auto& m : spec.modalities) e.modality_files.push_back(dir / (m + ".rmt"));
    e.label_file = dir / "label.rmt";
    manifest.samples.push_back(std::move(e));
  }

  {
    std::ofstream os(root / "spec.txt", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (root / "spec.txt").string());
    os << scene_spec_text(spec);
  }
  // Manifest lines from other splits survive; lines are kept sorted so the
  // file does not depend on the order in which splits were generated.
  const auto manifest_path = root / "manifest.txt";
  std::vector<std::string> lines;
  for (auto& l : read_manifest_lines(manifest_path)) {
    if (l.rfind(split + "_", 0) != 0) lines.push_back(l);
  }
  for (const auto& e : manifest.samples) lines.push_back(e.id + "\t" + std::to_string(e.seed));
  std::sort(lines.begin(), lines.end());
  std::ofstream os(manifest_path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + manifest_path.string());
  for (const auto& l : lines) os << l << '\n';
  if (!os) throw IoError("write failed: " + manifest_path.string());
  return manifest;
}

// One split held in memory.
struct Dataset {
  std::string id;
  std::string split;
  SceneSpec spec;
  std::vector<std::string> sample_ids;
  std::vector<ModalitySample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t num_modalities() const { return spec.modalities.size(); }
};

inline Dataset load_split(const std::filesystem::path& root, const std::string& split) {
  const auto spec_path = root / "spec.txt";
  std::ifstream sf(spec_path);
  if (!sf) throw IoError("dataset spec not found: " + spec_path.string());
  std::stringstream spec_text;
  spec_text << sf.rdbuf();

  Dataset ds;
  ds.split = split;
  ds.spec = parse_scene_spec(spec_text.str());
  if (!std::filesystem::exists(root / "manifest.txt")) {
    throw IoError("manifest not found: " + (root / "manifest.txt").string());
  }
  std::uint64_t h = fnv1a(spec_text.str());
  for (const auto& line : read_manifest_lines(root / "manifest.txt")) {
    if (line.rfind(split + "_", 0) != 0) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("manifest.txt: missing TAB in '" + line + "'");
    ds.sample_ids.push_back(line.substr(0, tab));
    h = fnv1a(line, h);
  }
  if (ds.sample_ids.empty()) throw IoError("split '" + split + "' has no samples under " + root.string());
  for (const auto& id : ds.sample_ids) {
    ds.samples.push_back(load_sample(root / split / id, ds.spec.modalities, ds.spec.num_classes));
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  ds.id = os.str();
  return ds;
}

}  // namespace robustseg
