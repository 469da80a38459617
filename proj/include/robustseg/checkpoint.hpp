// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint container:
//   "RSCK", u16 version,
//   ModelConfig: u32 num_classes, u32 num_modalities, u32 embed_dim,
//                u32 blocks_per_stage, u32 mlp_ratio, u32 input_channels,
//                u8 shared_encoder, u8 stage count, stage count x u32 channels,
//                stage count x u32 strides,
//   u32 block count, then per block: u16 name length, name bytes, RMT1 tensor.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "robustseg/errors.hpp"
#include "robustseg/rmt_io.hpp"
#include "robustseg/seg_model.hpp"

namespace robustseg {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  RawTensor tensor;
};

struct CheckpointContents {
  std::uint16_t version = kCheckpointVersion;
  ModelConfig config;
  std::vector<NamedTensor> blocks;
};

inline void write_model_config(std::ostream& os, const ModelConfig& c) {
  io::put_u32(os, static_cast<std::uint32_t>(c.num_classes));
  io::put_u32(os, static_cast<std::uint32_t>(c.num_modalities));
  io::put_u32(os, static_cast<std::uint32_t>(c.embed_dim));
  io::put_u32(os, static_cast<std::uint32_t>(c.blocks_per_stage));
  io::put_u32(os, static_cast<std::uint32_t>(c.mlp_ratio));
  io::put_u32(os, static_cast<std::uint32_t>(c.input_channels));
  io::put_u8(os, c.shared_encoder ? 1 : 0);
  io::put_u8(os, static_cast<std::uint8_t>(c.stage_channels.size()));
  for (auto v : c.stage_channels) io::put_u32(os, static_cast<std::uint32_t>(v));
  for (auto v : c.stage_strides) io::put_u32(os, static_cast<std::uint32_t>(v));
}

inline ModelConfig read_model_config(std::istream& is) {
  ModelConfig c;
  c.num_classes = io::get_u32(is, "num_classes");
  c.num_modalities = io::get_u32(is, "num_modalities");
  c.embed_dim = io::get_u32(is, "embed_dim");
  c.blocks_per_stage = io::get_u32(is, "blocks_per_stage");
  c.mlp_ratio = io::get_u32(is, "mlp_ratio");
  c.input_channels = io::get_u32(is, "input_channels");
  c.shared_encoder = io::get_u8(is, "shared_encoder") != 0;
  const std::size_t n = io::get_u8(is, "stage count");
  c.stage_channels.resize(n);
  c.stage_strides.resize(n);
  for (auto& v : c.stage_channels) v = io::get_u32(is, "stage_channels");
  for (auto& v : c.stage_strides) v = io::get_u32(is, "stage_strides");
  return c;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const ModelConfig& config,
                                  const std::vector<NamedTensor>& blocks) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("RSCK", 4);
  io::put_u16(os, kCheckpointVersion);
  write_model_config(os, config);
  io::put_u32(os, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    if (b.name.size() > 0xffff) throw ContractError("checkpoint: parameter name too long");
    io::put_u16(os, static_cast<std::uint16_t>(b.name.size()));
    os.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    write_rmt(os, b.tensor);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline CheckpointContents read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "RSCK", 4) != 0) {
    throw FormatError(path.string() + ": bad magic (expected RSCK)");
  }
  CheckpointContents c;
  c.version = io::get_u16(is, "version");
  if (c.version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(c.version));
  }
  c.config = read_model_config(is);
  const std::uint32_t n = io::get_u32(is, "block count");
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor b;
    const std::uint16_t len = io::get_u16(is, "name length");
    b.name.resize(len);
    io::get_bytes(is, b.name.data(), len, "name");
    b.tensor = read_rmt(is);
    c.blocks.push_back(std::move(b));
  }
  return c;
}

// Throws CompatibilityError naming the first differing field.
inline void check_compatible(const ModelConfig& have, const ModelConfig& want) {
  auto fail = [](const std::string& field, const std::string& a, const std::string& b) {
    throw CompatibilityError("incompatible model config: " + field + " (checkpoint " + a +
                             ", expected " + b + ")");
  };
  auto list = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  if (have.num_classes != want.num_classes)
    fail("num_classes", std::to_string(have.num_classes), std::to_string(want.num_classes));
  if (have.num_modalities != want.num_modalities)
    fail("num_modalities", std::to_string(have.num_modalities), std::to_string(want.num_modalities));
  if (have.stage_channels != want.stage_channels)
    fail("stage_channels", list(have.stage_channels), list(want.stage_channels));
  if (have.stage_strides != want.stage_strides)
    fail("stage_strides", list(have.stage_strides), list(want.stage_strides));
  if (have.embed_dim != want.embed_dim)
    fail("embed_dim", std::to_string(have.embed_dim), std::to_string(want.embed_dim));
  if (have.blocks_per_stage != want.blocks_per_stage)
    fail("blocks_per_stage", std::to_string(have.blocks_per_stage), std::to_string(want.blocks_per_stage));
  if (have.mlp_ratio != want.mlp_ratio)
    fail("mlp_ratio", std::to_string(have.mlp_ratio), std::to_string(want.mlp_ratio));
  if (have.input_channels != want.input_channels)
    fail("input_channels", std::to_string(have.input_channels), std::to_string(want.input_channels));
  if (have.shared_encoder != want.shared_encoder)
    fail("shared_encoder", have.shared_encoder ? "true" : "false", want.shared_encoder ? "true" : "false");
}

inline RawTensor param_to_raw(const ParamTensor<float>& p) {
  RawTensor t;
  t.dtype = DType::kF32;
  for (auto d : p.shape) t.dims.push_back(static_cast<std::uint32_t>(d));
  t.f32 = p.value;
  return t;
}

inline std::vector<NamedTensor> model_blocks(const SegModel<float>& model) {
  std::vector<NamedTensor> blocks;
  for (const auto& p : model.params()) blocks.push_back({p.name, param_to_raw(p)});
  return blocks;
}

inline void save_model(const SegModel<float>& model, const std::filesystem::path& path) {
  write_checkpoint_file(path, model.config(), model_blocks(model));
}

// Copies blocks named like the model's parameters into `model`.
inline void assign_blocks(SegModel<float>& model, const std::vector<NamedTensor>& blocks,
                          const std::string& prefix = "") {
  for (auto& p : model.params()) {
    const std::string want = prefix + p.name;
    const NamedTensor* found = nullptr;
    for (const auto& b : blocks) {
      if (b.name == want) {
        found = &b;
        break;
      }
    }
    if (!found) throw FormatError("checkpoint: missing parameter block '" + want + "'");
    std::vector<std::size_t> dims(found->tensor.dims.begin(), found->tensor.dims.end());
    if (found->tensor.dtype != DType::kF32 || dims != p.shape) {
      throw FormatError("checkpoint: parameter block '" + want + "' has wrong dtype or dims");
    }
    p.value = found->tensor.f32;
  }
}

inline SegModel<float> load_model(const std::filesystem::path& path,
                                  const ModelConfig* expected = nullptr) {
  const CheckpointContents c = read_checkpoint_file(path);
  if (expected) check_compatible(c.config, *expected);
  try {
    c.config.validate();
  } catch (const ContractError& e) {
    throw FormatError(path.string() + ": invalid model config: " + e.what());
  }
  SegModel<float> model(c.config, 0, true);
  assign_blocks(model, c.blocks);
  return model;
}

}  // namespace robustseg
