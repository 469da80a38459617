// SPDX-License-Identifier: Apache-2.0
#pragma once

// AdamW with linear warm-up followed by polynomial decay, and its on-disk
// state ("RSOP", u16 version, u64 step, u32 count, then per parameter: u16
// name length, name, RMT1 first moment, RMT1 second moment).

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "robustseg/errors.hpp"
#include "robustseg/rmt_io.hpp"
#include "robustseg/seg_model.hpp"

namespace robustseg {

struct OptimizerConfig {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_epochs = 2.0;
  double power = 0.9;
  double clip_norm = 0.0;  // global gradient-norm clip, 0 disables

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("optim.lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("optim.beta1/beta2 must be in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("optim.eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
    if (!(warmup_epochs >= 0.0)) throw ConfigError("optim.warmup_epochs must be >= 0");
    if (!(power >= 0.0)) throw ConfigError("optim.power must be >= 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("optim.clip_norm must be >= 0");
  }
};

// Learning rate for 0-based `step` out of `total` steps.
inline double scheduled_lr(double base, std::size_t step, std::size_t warmup, std::size_t total,
                           double power) {
  if (warmup > 0 && step < warmup) {
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (total <= warmup) return base;
  const double frac = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base * std::pow(std::max(0.0, 1.0 - frac), power);
}

class AdamW {
 public:
  AdamW() = default;
  AdamW(const OptimizerConfig& cfg, const SegModel<float>& model) : cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : model.params()) {
      names_.push_back(p.name);
      m_.emplace_back(p.value.size(), 0.0f);
      v_.emplace_back(p.value.size(), 0.0f);
    }
  }

  std::size_t step() const { return step_; }

  // Returns the pre-clip global gradient norm.
  double update(SegModel<float>& model, Gradients<float>& grads, double lr) {
    auto& params = model.params();
    require(params.size() == m_.size() && grads.size() == m_.size(), "AdamW: parameter count mismatch");
    double sq = 0.0;
    for (const auto& g : grads) {
      for (float v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    }
    const double norm = std::sqrt(sq);
    float clip = 1.0f;
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) clip = static_cast<float>(cfg_.clip_norm / norm);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float step_size = static_cast<float>(lr / bc1);
    const float inv_bc2 = static_cast<float>(1.0 / bc2);
    const float eps = static_cast<float>(cfg_.eps);
    const float decay = static_cast<float>(lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i].value;
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& g = grads[i];
      // Gains and biases (rank-1 tensors) are not decayed.
      const bool decayed = params[i].shape.size() > 1;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const float gk = g[k] * clip;
        m[k] = b1 * m[k] + (1.0f - b1) * gk;
        v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
        if (decayed) w[k] -= decay * w[k];
        w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
      }
    }
    return norm;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write("RSOP", 4);
    io::put_u16(os, 1);
    io::put_u64(os, step_);
    io::put_u32(os, static_cast<std::uint32_t>(names_.size()));
    for (std::size_t i = 0; i < names_.size(); ++i) {
      io::put_u16(os, static_cast<std::uint16_t>(names_[i].size()));
      os.write(names_[i].data(), static_cast<std::streamsize>(names_[i].size()));
      for (const auto* buf : {&m_[i], &v_[i]}) {
        RawTensor t;
        t.dtype = DType::kF32;
        t.dims = {static_cast<std::uint32_t>(buf->size())};
        t.f32 = *buf;
        write_rmt(os, t);
      }
    }
    if (!os) throw IoError("write failed: " + path.string());
  }

  void load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "RSOP", 4) != 0) {
      throw FormatError(path.string() + ": bad magic (expected RSOP)");
    }
    if (io::get_u16(is, "version") != 1) throw FormatError(path.string() + ": unsupported version");
    step_ = io::get_u64(is, "step");
    const std::uint32_t n = io::get_u32(is, "count");
    if (n != names_.size()) throw FormatError(path.string() + ": parameter count mismatch");
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name(io::get_u16(is, "name length"), '\0');
      io::get_bytes(is, name.data(), name.size(), "name");
      if (name != names_[i]) throw FormatError(path.string() + ": unexpected parameter '" + name + "'");
      for (auto* buf : {&m_[i], &v_[i]}) {
        RawTensor t = read_rmt(is);
        if (t.dtype != DType::kF32 || t.f32.size() != buf->size()) {
          throw FormatError(path.string() + ": moment size mismatch for '" + name + "'");
        }
        *buf = std::move(t.f32);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<std::string> names_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace robustseg
