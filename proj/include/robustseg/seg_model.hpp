// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tiny hierarchical segmentation network used for both teacher and student.
//
//   encoder (shared across modalities by default), per stage s:
//     non-overlapping patch merge (kernel = stride_s / stride_{s-1}) -> LayerNorm
//     -> blocks_per_stage x [ y + FC2(GELU(FC1(LayerNorm(y)))) ]
//   fusion: per-stage arithmetic mean over the modalities passed in
//   decoder: per-stage linear embed -> bilinear resize to stage-1 grid -> concat
//     -> linear + ReLU -> linear classifier -> bilinear resize to input size
//
// Gradients are written out by hand; every layer keeps what its backward
// pass needs in a cache owned by the caller, so a model is immutable during
// forward/backward and can be shared between threads.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robustseg/errors.hpp"
#include "robustseg/linalg.hpp"
#include "robustseg/rng.hpp"
#include "robustseg/tensor.hpp"

namespace robustseg {

struct ModelConfig {
  std::vector<std::size_t> stage_channels = {8, 16, 32, 64};
  std::vector<std::size_t> stage_strides = {4, 8, 16, 32};
  std::size_t num_classes = 6;
  std::size_t num_modalities = 4;
  std::size_t embed_dim = 32;
  std::size_t blocks_per_stage = 2;
  std::size_t mlp_ratio = 2;
  std::size_t input_channels = 3;
  bool shared_encoder = true;

  std::size_t num_stages() const { return stage_channels.size(); }

  void validate() const {
    if (stage_channels.size() != 4 || stage_strides.size() != 4) {
      throw ContractError("ModelConfig: stage_channels and stage_strides must have 4 entries");
    }
    std::size_t prev = 1;
    for (std::size_t s = 0; s < 4; ++s) {
      if (stage_channels[s] == 0) throw ContractError("ModelConfig: stage channel of 0");
      if (stage_strides[s] == 0 || (s > 0 && stage_strides[s] <= prev)) {
        throw ContractError("ModelConfig: strides must be strictly increasing");
      }
      if (stage_strides[s] % prev != 0) {
        throw ContractError("ModelConfig: each stride must be a multiple of the previous one");
      }
      prev = stage_strides[s];
    }
    if (num_classes < 2) throw ContractError("ModelConfig: num_classes must be >= 2");
    if (num_modalities < 1) throw ContractError("ModelConfig: num_modalities must be >= 1");
    if (embed_dim == 0 || mlp_ratio == 0) throw ContractError("ModelConfig: zero embed_dim/mlp_ratio");
  }

  std::size_t num_encoders() const { return shared_encoder ? 1 : num_modalities; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
};

// Parameter gradients, parallel to SegModel::params().
template <typename T>
using Gradients = std::vector<std::vector<T>>;

// Stage features of one modality, stage 0 first.
template <typename T>
using Pyramid = std::vector<FeatureMap<T>>;

namespace layers {

struct LinearRef {
  std::size_t w = 0, b = 0, in = 0, out = 0;
};

struct NormRef {
  std::size_t g = 0, b = 0, dim = 0;
};

template <typename T>
struct NormCache {
  std::vector<T> xhat;
  std::vector<T> rstd;
};

inline constexpr double kNormEps = 1e-5;

template <typename T>
void layer_norm(const T* x, std::size_t rows, std::size_t dim, const T* gamma, const T* beta,
                T* out, NormCache<T>* cache) {
  if (cache) {
    cache->xhat.resize(rows * dim);
    cache->rstd.resize(rows);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * dim;
    T mean{0};
    for (std::size_t c = 0; c < dim; ++c) mean += xr[c];
    mean /= static_cast<T>(dim);
    T var{0};
    for (std::size_t c = 0; c < dim; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(dim);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(kNormEps));
    for (std::size_t c = 0; c < dim; ++c) {
      const T xh = (xr[c] - mean) * rstd;
      if (cache) cache->xhat[r * dim + c] = xh;
      out[r * dim + c] = gamma[c] * xh + beta[c];
    }
    if (cache) cache->rstd[r] = rstd;
  }
}

// grad_x = LayerNorm backward; grad_x is overwritten.
template <typename T>
void layer_norm_backward(const T* grad_out, const NormCache<T>& cache, std::size_t rows,
                         std::size_t dim, const T* gamma, T* grad_gamma, T* grad_beta, T* grad_x) {
  std::vector<T> gxh(dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = grad_out + r * dim;
    const T* xh = cache.xhat.data() + r * dim;
    T mean_g{0}, mean_gx{0};
    for (std::size_t c = 0; c < dim; ++c) {
      grad_gamma[c] += g[c] * xh[c];
      grad_beta[c] += g[c];
      gxh[c] = g[c] * gamma[c];
      mean_g += gxh[c];
      mean_gx += gxh[c] * xh[c];
    }
    mean_g /= static_cast<T>(dim);
    mean_gx /= static_cast<T>(dim);
    for (std::size_t c = 0; c < dim; ++c) {
      grad_x[r * dim + c] = cache.rstd[r] * (gxh[c] - mean_g - xh[c] * mean_gx);
    }
  }
}

template <typename T>
T gelu(T x) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T u = k * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T u = k * (x + static_cast<T>(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = k * (T{1} + static_cast<T>(3 * 0.044715) * x * x);
  return static_cast<T>(0.5) * (T{1} + th) + static_cast<T>(0.5) * x * (T{1} - th * th) * du;
}

// Separable bilinear resampling with half-pixel centres (align_corners = false).
struct ResizeAxis {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;
};

inline ResizeAxis resize_axis(std::size_t in, std::size_t out) {
  ResizeAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = lo + 1 < in ? lo + 1 : in - 1;
    a.i0[o] = lo;
    a.i1[o] = hi;
    a.w1[o] = hi == lo ? 0.0 : src - static_cast<double>(lo);
  }
  return a;
}

template <typename T>
FeatureMap<T> resize_bilinear(const FeatureMap<T>& in, std::size_t out_h, std::size_t out_w) {
  if (in.height == out_h && in.width == out_w) return in;
  const auto ay = resize_axis(in.height, out_h);
  const auto ax = resize_axis(in.width, out_w);
  const std::size_t C = in.channels;
  FeatureMap<T> out(out_h, out_w, C);
  for (std::size_t y = 0; y < out_h; ++y) {
    const T wy1 = static_cast<T>(ay.w1[y]), wy0 = T{1} - wy1;
    for (std::size_t x = 0; x < out_w; ++x) {
      const T wx1 = static_cast<T>(ax.w1[x]), wx0 = T{1} - wx1;
      const T* p00 = &in.data[(ay.i0[y] * in.width + ax.i0[x]) * C];
      const T* p01 = &in.data[(ay.i0[y] * in.width + ax.i1[x]) * C];
      const T* p10 = &in.data[(ay.i1[y] * in.width + ax.i0[x]) * C];
      const T* p11 = &in.data[(ay.i1[y] * in.width + ax.i1[x]) * C];
      T* o = &out.data[(y * out_w + x) * C];
      for (std::size_t c = 0; c < C; ++c) {
        o[c] = wy0 * (wx0 * p00[c] + wx1 * p01[c]) + wy1 * (wx0 * p10[c] + wx1 * p11[c]);
      }
    }
  }
  return out;
}

// Adjoint of resize_bilinear.
template <typename T>
FeatureMap<T> resize_bilinear_backward(const FeatureMap<T>& grad_out, std::size_t in_h,
                                       std::size_t in_w) {
  if (grad_out.height == in_h && grad_out.width == in_w) return grad_out;
  const auto ay = resize_axis(in_h, grad_out.height);
  const auto ax = resize_axis(in_w, grad_out.width);
  const std::size_t C = grad_out.channels;
  FeatureMap<T> g(in_h, in_w, C);
  for (std::size_t y = 0; y < grad_out.height; ++y) {
    const T wy1 = static_cast<T>(ay.w1[y]), wy0 = T{1} - wy1;
    for (std::size_t x = 0; x < grad_out.width; ++x) {
      const T wx1 = static_cast<T>(ax.w1[x]), wx0 = T{1} - wx1;
      const T* go = &grad_out.data[(y * grad_out.width + x) * C];
      T* p00 = &g.data[(ay.i0[y] * in_w + ax.i0[x]) * C];
      T* p01 = &g.data[(ay.i0[y] * in_w + ax.i1[x]) * C];
      T* p10 = &g.data[(ay.i1[y] * in_w + ax.i0[x]) * C];
      T* p11 = &g.data[(ay.i1[y] * in_w + ax.i1[x]) * C];
      for (std::size_t c = 0; c < C; ++c) {
        p00[c] += wy0 * wx0 * go[c];
        p01[c] += wy0 * wx1 * go[c];
        p10[c] += wy1 * wx0 * go[c];
        p11[c] += wy1 * wx1 * go[c];
      }
    }
  }
  return g;
}

// Non-overlapping k x k patches, row layout (ky, kx, c).
template <typename T>
std::vector<T> im2col(const FeatureMap<T>& in, std::size_t k) {
  const std::size_t oh = in.height / k, ow = in.width / k, C = in.channels;
  std::vector<T> cols(oh * ow * k * k * C);
  std::size_t idx = 0;
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        const T* src = &in.data[((oy * k + ky) * in.width + ox * k) * C];
        for (std::size_t j = 0; j < k * C; ++j) cols[idx++] = src[j];
      }
    }
  }
  return cols;
}

template <typename T>
void col2im_add(const std::vector<T>& cols, std::size_t k, FeatureMap<T>& grad_in) {
  const std::size_t oh = grad_in.height / k, ow = grad_in.width / k, C = grad_in.channels;
  std::size_t idx = 0;
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        T* dst = &grad_in.data[((oy * k + ky) * grad_in.width + ox * k) * C];
        for (std::size_t j = 0; j < k * C; ++j) dst[j] += cols[idx++];
      }
    }
  }
}

}  // namespace layers

template <typename T>
struct BlockCache {
  std::vector<T> input;
  layers::NormCache<T> norm;
  std::vector<T> normed;
  std::vector<T> pre;
  std::vector<T> act;
};

template <typename T>
struct StageCache {
  std::size_t height = 0, width = 0;
  std::vector<T> patches;
  layers::NormCache<T> norm;
  std::vector<BlockCache<T>> blocks;
};

template <typename T>
struct EncoderCache {
  std::size_t encoder = 0;
  std::size_t input_height = 0, input_width = 0;
  std::vector<StageCache<T>> stages;
};

template <typename T>
struct DecoderCache {
  Pyramid<T> fused;
  FeatureMap<T> concat;
  std::vector<T> pre;
  std::vector<T> hidden;
  std::size_t out_height = 0, out_width = 0;
  std::size_t grid_height = 0, grid_width = 0;
};

template <typename T>
struct ForwardResult {
  FeatureMap<T> logits;
  // Indexed by modality; empty pyramid for a modality that was not passed in.
  std::vector<Pyramid<T>> pyramids;
  std::vector<bool> present;
  std::vector<EncoderCache<T>> encoder_caches;  // per modality, empty when !present
  DecoderCache<T> decoder_cache;
  bool has_cache = false;
};

template <typename T>
class SegModel {
 public:
  using Scalar = T;

  explicit SegModel(const ModelConfig& config, std::uint64_t seed = 0, bool zero_init = false)
      : config_(config) {
    config_.validate();
    build();
    if (zero_init) {
      for (auto& p : params_) std::fill(p.value.begin(), p.value.end(), T{0});
    } else {
      initialize(seed);
    }
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<ParamTensor<T>>& params() const { return params_; }
  std::vector<ParamTensor<T>>& params() { return params_; }

  Gradients<T> zero_gradients() const {
    Gradients<T> g(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) g[i].assign(params_[i].value.size(), T{0});
    return g;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  // Encodes one modality. `cache` may be null for inference.
  Pyramid<T> encode(const FeatureMap<T>& input, std::size_t modality,
                    EncoderCache<T>* cache = nullptr) const {
    check_input(input);
    const std::size_t e = config_.shared_encoder ? 0 : modality;
    Pyramid<T> pyramid;
    if (cache) {
      cache->encoder = e;
      cache->input_height = input.height;
      cache->input_width = input.width;
      cache->stages.assign(config_.num_stages(), {});
    }
    const FeatureMap<T>* prev = &input;
    std::size_t prev_stride = 1;
    for (std::size_t s = 0; s < config_.num_stages(); ++s) {
      const auto& st = encoders_[e][s];
      const std::size_t k = config_.stage_strides[s] / prev_stride;
      const std::size_t oh = prev->height / k, ow = prev->width / k, P = oh * ow;
      std::vector<T> patches = layers::im2col(*prev, k);
      std::vector<T> y0(P * st.merge.out);
      linalg::matmul_bias(patches.data(), pv(st.merge.w), pv(st.merge.b), y0.data(), P,
                          st.merge.in, st.merge.out);
      FeatureMap<T> y(oh, ow, st.merge.out);
      StageCache<T>* sc = cache ? &cache->stages[s] : nullptr;
      layers::layer_norm(y0.data(), P, st.norm.dim, pv(st.norm.g), pv(st.norm.b), y.data.data(),
                         sc ? &sc->norm : nullptr);
      if (sc) {
        sc->height = oh;
        sc->width = ow;
        sc->patches = std::move(patches);
        sc->blocks.resize(st.blocks.size());
      }
      for (std::size_t b = 0; b < st.blocks.size(); ++b) {
        const auto& blk = st.blocks[b];
        const std::size_t D = blk.norm.dim, Hd = blk.fc1.out;
        std::vector<T> normed(P * D), pre(P * Hd), act(P * Hd), out(P * D);
        BlockCache<T>* bc = sc ? &sc->blocks[b] : nullptr;
        layers::layer_norm(y.data.data(), P, D, pv(blk.norm.g), pv(blk.norm.b), normed.data(),
                           bc ? &bc->norm : nullptr);
        linalg::matmul_bias(normed.data(), pv(blk.fc1.w), pv(blk.fc1.b), pre.data(), P, D, Hd);
        for (std::size_t i = 0; i < pre.size(); ++i) act[i] = layers::gelu(pre[i]);
        linalg::matmul_bias(act.data(), pv(blk.fc2.w), pv(blk.fc2.b), out.data(), P, Hd, D);
        if (bc) {
          bc->input = y.data;
          bc->normed = std::move(normed);
          bc->pre = std::move(pre);
          bc->act = std::move(act);
        }
        for (std::size_t i = 0; i < out.size(); ++i) y.data[i] += out[i];
      }
      pyramid.push_back(std::move(y));
      prev = &pyramid.back();
      prev_stride = config_.stage_strides[s];
    }
    return pyramid;
  }

  // Mean over the given pyramids, stage by stage, in the order given.
  static Pyramid<T> fuse(const std::vector<const Pyramid<T>*>& pyramids) {
    if (pyramids.empty()) throw ContractError("fuse: no modality present (empty input)");
    Pyramid<T> fused = *pyramids[0];
    for (std::size_t s = 0; s < fused.size(); ++s) {
      for (std::size_t m = 1; m < pyramids.size(); ++m) {
        const auto& f = (*pyramids[m])[s];
        require_same_shape(fused[s], f, "fuse");
        for (std::size_t i = 0; i < f.data.size(); ++i) fused[s].data[i] += f.data[i];
      }
      if (pyramids.size() > 1) {
        const T inv = T{1} / static_cast<T>(pyramids.size());
        for (auto& v : fused[s].data) v *= inv;
      }
    }
    return fused;
  }

  FeatureMap<T> decode(const Pyramid<T>& fused, std::size_t out_h, std::size_t out_w,
                       DecoderCache<T>* cache = nullptr) const {
    require(fused.size() == config_.num_stages(), "decode: wrong number of stages");
    const std::size_t E = config_.embed_dim, S = config_.num_stages();
    const std::size_t gh = fused[0].height, gw = fused[0].width, P0 = gh * gw;
    FeatureMap<T> concat(gh, gw, E * S);
    for (std::size_t s = 0; s < S; ++s) {
      const auto& f = fused[s];
      require(f.channels == config_.stage_channels[s], "decode: stage channel mismatch");
      FeatureMap<T> emb(f.height, f.width, E);
      linalg::matmul_bias(f.data.data(), pv(embed_[s].w), pv(embed_[s].b), emb.data.data(),
                          f.pixels(), f.channels, E);
      const FeatureMap<T> up = layers::resize_bilinear(emb, gh, gw);
      for (std::size_t p = 0; p < P0; ++p) {
        for (std::size_t c = 0; c < E; ++c) concat.data[p * E * S + s * E + c] = up.data[p * E + c];
      }
    }
    std::vector<T> pre(P0 * E), hidden(P0 * E);
    linalg::matmul_bias(concat.data.data(), pv(fuse_.w), pv(fuse_.b), pre.data(), P0, E * S, E);
    for (std::size_t i = 0; i < pre.size(); ++i) hidden[i] = pre[i] > T{0} ? pre[i] : T{0};
    FeatureMap<T> grid_logits(gh, gw, config_.num_classes);
    linalg::matmul_bias(hidden.data(), pv(cls_.w), pv(cls_.b), grid_logits.data.data(), P0, E,
                        config_.num_classes);
    if (cache) {
      cache->fused = fused;
      cache->concat = std::move(concat);
      cache->pre = std::move(pre);
      cache->hidden = std::move(hidden);
      cache->out_height = out_h;
      cache->out_width = out_w;
      cache->grid_height = gh;
      cache->grid_width = gw;
    }
    return layers::resize_bilinear(grid_logits, out_h, out_w);
  }

  // Forward over the modalities whose input pointer is non-null ("drop"
  // semantics). For zero-fill semantics pass zero tensors instead of null.
  ForwardResult<T> forward(const std::vector<const FeatureMap<T>*>& inputs,
                           bool keep_cache = false) const {
    require(inputs.size() == config_.num_modalities,
            "forward: expected " + std::to_string(config_.num_modalities) + " modality slots");
    ForwardResult<T> r;
    r.pyramids.resize(inputs.size());
    r.present.assign(inputs.size(), false);
    r.has_cache = keep_cache;
    if (keep_cache) r.encoder_caches.resize(inputs.size());
    std::vector<const Pyramid<T>*> present;
    std::size_t H = 0, W = 0;
    for (std::size_t m = 0; m < inputs.size(); ++m) {
      if (!inputs[m]) continue;
      if (H == 0) {
        H = inputs[m]->height;
        W = inputs[m]->width;
      } else if (inputs[m]->height != H || inputs[m]->width != W) {
        throw ContractError("forward: modality inputs differ in spatial size");
      }
      r.pyramids[m] = encode(*inputs[m], m, keep_cache ? &r.encoder_caches[m] : nullptr);
      r.present[m] = true;
      present.push_back(&r.pyramids[m]);
    }
    if (present.empty()) throw ContractError("forward: presence mask is empty (empty input)");
    const Pyramid<T> fused = fuse(present);
    r.logits = decode(fused, H, W, keep_cache ? &r.decoder_cache : nullptr);
    return r;
  }

  // Backpropagates dL/dlogits plus optional direct dL/d(stage feature) terms
  // (indexed [modality][stage], empty when absent) into `grads`.
  void backward(const ForwardResult<T>& fr, const FeatureMap<T>& grad_logits,
                const std::vector<Pyramid<T>>* feature_grads, Gradients<T>& grads) const {
    require(fr.has_cache, "backward: forward was run without cache");
    require_same_shape(grad_logits, fr.logits, "backward: grad_logits");
    const auto& dc = fr.decoder_cache;
    const std::size_t E = config_.embed_dim, S = config_.num_stages(), C = config_.num_classes;
    const std::size_t P0 = dc.grid_height * dc.grid_width;

    const FeatureMap<T> g_grid = layers::resize_bilinear_backward(grad_logits, dc.grid_height, dc.grid_width);
    std::vector<T> g_hidden(P0 * E), g_concat(P0 * E * S);
    linalg::accumulate_weight_grad(dc.hidden.data(), g_grid.data.data(), gv(grads, cls_.w),
                                   gv(grads, cls_.b), P0, E, C);
    linalg::input_grad(g_grid.data.data(), pv(cls_.w), g_hidden.data(), P0, E, C);
    for (std::size_t i = 0; i < g_hidden.size(); ++i) {
      if (dc.pre[i] <= T{0}) g_hidden[i] = T{0};
    }
    linalg::accumulate_weight_grad(dc.concat.data.data(), g_hidden.data(), gv(grads, fuse_.w),
                                   gv(grads, fuse_.b), P0, E * S, E);
    linalg::input_grad(g_hidden.data(), pv(fuse_.w), g_concat.data(), P0, E * S, E);

    std::size_t n_present = 0;
    for (bool p : fr.present) n_present += p ? 1 : 0;
    const T inv_n = T{1} / static_cast<T>(n_present);

    std::vector<FeatureMap<T>> g_fused(S);
    for (std::size_t s = 0; s < S; ++s) {
      const auto& f = dc.fused[s];
      FeatureMap<T> g_up(dc.grid_height, dc.grid_width, E);
      for (std::size_t p = 0; p < P0; ++p) {
        for (std::size_t c = 0; c < E; ++c) g_up.data[p * E + c] = g_concat[p * E * S + s * E + c];
      }
      const FeatureMap<T> g_emb = layers::resize_bilinear_backward(g_up, f.height, f.width);
      linalg::accumulate_weight_grad(f.data.data(), g_emb.data.data(), gv(grads, embed_[s].w),
                                     gv(grads, embed_[s].b), f.pixels(), f.channels, E);
      g_fused[s] = FeatureMap<T>(f.height, f.width, f.channels);
      linalg::input_grad(g_emb.data.data(), pv(embed_[s].w), g_fused[s].data.data(), f.pixels(),
                         f.channels, E);
      for (auto& v : g_fused[s].data) v *= inv_n;
    }

    for (std::size_t m = 0; m < fr.present.size(); ++m) {
      if (!fr.present[m]) continue;
      Pyramid<T> g = g_fused;
      if (feature_grads && m < feature_grads->size() && !(*feature_grads)[m].empty()) {
        for (std::size_t s = 0; s < S; ++s) {
          const auto& extra = (*feature_grads)[m][s];
          if (extra.empty()) continue;
          require_same_shape(g[s], extra, "backward: feature grad");
          for (std::size_t i = 0; i < extra.data.size(); ++i) g[s].data[i] += extra.data[i];
        }
      }
      encoder_backward(fr.encoder_caches[m], std::move(g), grads);
    }
  }

  // FNV-1a over parameter names and raw bytes (frozen-weights checks, checkpoint ids).
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params_) {
      h = fnv1a(p.name, h);
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
      for (std::size_t i = 0; i < p.value.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }

  std::optional<std::size_t> find_param(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    return std::nullopt;
  }

  template <typename U>
  SegModel<U> cast() const {
    SegModel<U> out(config_, 0, true);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      for (std::size_t j = 0; j < params_[i].value.size(); ++j) {
        out.params()[i].value[j] = static_cast<U>(params_[i].value[j]);
      }
    }
    return out;
  }

 private:
  struct BlockRefs {
    layers::NormRef norm;
    layers::LinearRef fc1, fc2;
  };
  struct StageRefs {
    layers::LinearRef merge;
    layers::NormRef norm;
    std::vector<BlockRefs> blocks;
  };

  void check_input(const FeatureMap<T>& input) const {
    if (input.channels != config_.input_channels) {
      throw ContractError("encode: input has " + std::to_string(input.channels) +
                          " channels, expected " + std::to_string(config_.input_channels));
    }
    const std::size_t s = config_.stage_strides.back();
    if (input.height == 0 || input.width == 0 || input.height % s != 0 || input.width % s != 0) {
      throw ContractError("encode: input " + shape_string(input.height, input.width, input.channels) +
                          " not divisible by the coarsest stride " + std::to_string(s));
    }
    for (T v : input.data) {
      if (!std::isfinite(static_cast<double>(v))) throw ContractError("encode: non-finite input");
    }
  }

  std::size_t add_param(std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    params_.push_back({std::move(name), std::move(shape), std::vector<T>(n, T{0})});
    return params_.size() - 1;
  }

  layers::LinearRef add_linear(const std::string& prefix, std::size_t in, std::size_t out) {
    layers::LinearRef r;
    r.in = in;
    r.out = out;
    r.w = add_param(prefix + ".w", {in, out});
    r.b = add_param(prefix + ".b", {out});
    return r;
  }

  layers::NormRef add_norm(const std::string& prefix, std::size_t dim) {
    layers::NormRef r;
    r.dim = dim;
    r.g = add_param(prefix + ".g", {dim});
    r.b = add_param(prefix + ".b", {dim});
    return r;
  }

  void build() {
    const std::size_t S = config_.num_stages();
    encoders_.resize(config_.num_encoders());
    for (std::size_t e = 0; e < encoders_.size(); ++e) {
      std::size_t prev_c = config_.input_channels, prev_stride = 1;
      for (std::size_t s = 0; s < S; ++s) {
        const std::string pre = "enc" + std::to_string(e) + ".s" + std::to_string(s);
        const std::size_t k = config_.stage_strides[s] / prev_stride;
        const std::size_t d = config_.stage_channels[s];
        StageRefs st;
        st.merge = add_linear(pre + ".merge", k * k * prev_c, d);
        st.norm = add_norm(pre + ".norm", d);
        for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
          const std::string bp = pre + ".blk" + std::to_string(b);
          BlockRefs br;
          br.norm = add_norm(bp + ".norm", d);
          br.fc1 = add_linear(bp + ".fc1", d, d * config_.mlp_ratio);
          br.fc2 = add_linear(bp + ".fc2", d * config_.mlp_ratio, d);
          st.blocks.push_back(br);
        }
        encoders_[e].push_back(std::move(st));
        prev_c = d;
        prev_stride = config_.stage_strides[s];
      }
    }
    for (std::size_t s = 0; s < S; ++s) {
      embed_.push_back(add_linear("dec.embed" + std::to_string(s), config_.stage_channels[s],
                                  config_.embed_dim));
    }
    fuse_ = add_linear("dec.fuse", config_.embed_dim * S, config_.embed_dim);
    cls_ = add_linear("dec.cls", config_.embed_dim, config_.num_classes);
  }

  void initialize(std::uint64_t seed) {
    for (auto& p : params_) {
      Rng rng(derive_seed(seed, p.name));
      const bool is_gain = p.name.size() > 2 && p.name.compare(p.name.size() - 2, 2, ".g") == 0;
      if (p.shape.size() == 2) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(p.shape[0]));
        for (auto& v : p.value) v = static_cast<T>(rng.uniform(-bound, bound));
      } else if (is_gain) {
        std::fill(p.value.begin(), p.value.end(), T{1});
      } else if (const auto w = find_param(p.name.substr(0, p.name.size() - 2) + ".w")) {
        // Linear bias, same bound as its weight. A zero bias would make the
        // first LayerNorm blind to the level of a constant patch.
        const double bound = 1.0 / std::sqrt(static_cast<double>(params_[*w].shape[0]));
        for (auto& v : p.value) v = static_cast<T>(rng.uniform(-bound, bound));
      }
    }
  }

  void encoder_backward(const EncoderCache<T>& cache, Pyramid<T> g, Gradients<T>& grads) const {
    const auto& stages = encoders_[cache.encoder];
    for (std::size_t si = stages.size(); si-- > 0;) {
      const auto& st = stages[si];
      const auto& sc = cache.stages[si];
      const std::size_t P = sc.height * sc.width;
      std::vector<T>& gy = g[si].data;
      for (std::size_t b = st.blocks.size(); b-- > 0;) {
        const auto& blk = st.blocks[b];
        const auto& bc = sc.blocks[b];
        const std::size_t D = blk.norm.dim, Hd = blk.fc1.out;
        std::vector<T> g_act(P * Hd), g_normed(P * D), g_in(P * D);
        linalg::accumulate_weight_grad(bc.act.data(), gy.data(), gv(grads, blk.fc2.w),
                                       gv(grads, blk.fc2.b), P, Hd, D);
        linalg::input_grad(gy.data(), pv(blk.fc2.w), g_act.data(), P, Hd, D);
        for (std::size_t i = 0; i < g_act.size(); ++i) g_act[i] *= layers::gelu_grad(bc.pre[i]);
        linalg::accumulate_weight_grad(bc.normed.data(), g_act.data(), gv(grads, blk.fc1.w),
                                       gv(grads, blk.fc1.b), P, D, Hd);
        linalg::input_grad(g_act.data(), pv(blk.fc1.w), g_normed.data(), P, D, Hd);
        layers::layer_norm_backward(g_normed.data(), bc.norm, P, D, pv(blk.norm.g),
                                    gv(grads, blk.norm.g), gv(grads, blk.norm.b), g_in.data());
        for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += g_in[i];
      }
      const std::size_t D = st.norm.dim;
      std::vector<T> g_y0(P * D), g_patches(P * st.merge.in);
      layers::layer_norm_backward(gy.data(), sc.norm, P, D, pv(st.norm.g), gv(grads, st.norm.g),
                                  gv(grads, st.norm.b), g_y0.data());
      linalg::accumulate_weight_grad(sc.patches.data(), g_y0.data(), gv(grads, st.merge.w),
                                     gv(grads, st.merge.b), P, st.merge.in, st.merge.out);
      if (si == 0) break;  // no gradient w.r.t. the raw input
      linalg::input_grad(g_y0.data(), pv(st.merge.w), g_patches.data(), P, st.merge.in, st.merge.out);
      const std::size_t k = config_.stage_strides[si] / config_.stage_strides[si - 1];
      layers::col2im_add(g_patches, k, g[si - 1]);
    }
  }

  const T* pv(std::size_t i) const { return params_[i].value.data(); }
  static T* gv(Gradients<T>& g, std::size_t i) { return g[i].data(); }

  ModelConfig config_;
  std::vector<ParamTensor<T>> params_;
  std::vector<std::vector<StageRefs>> encoders_;
  std::vector<layers::LinearRef> embed_;
  layers::LinearRef fuse_, cls_;
};

}  // namespace robustseg
