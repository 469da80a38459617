// SPDX-License-Identifier: Apache-2.0
#pragma once

// RMT1 tensor files: "RMT1", u8 dtype (0 = f32, 1 = u8), u8 rank,
// rank x u32 little-endian dims, raw little-endian payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "robustseg/errors.hpp"
#include "robustseg/tensor.hpp"

namespace robustseg {

static_assert(std::endian::native == std::endian::little,
              "RMT1 payloads are written in native order; big-endian hosts are unsupported");

enum class DType : std::uint8_t { kF32 = 0, kU8 = 1 };

struct RawTensor {
  DType dtype = DType::kF32;
  std::vector<std::uint32_t> dims;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace io {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u16(std::ostream& os, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffULL));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void get_bytes(std::istream& is, char* dst, std::size_t n, const char* field) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw FormatError(std::string("truncated input while reading ") + field);
  }
}

inline std::uint8_t get_u8(std::istream& is, const char* field) {
  char c;
  get_bytes(is, &c, 1, field);
  return static_cast<std::uint8_t>(c);
}

inline std::uint16_t get_u16(std::istream& is, const char* field) {
  unsigned char b[2];
  get_bytes(is, reinterpret_cast<char*>(b), 2, field);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is, const char* field) {
  unsigned char b[4];
  get_bytes(is, reinterpret_cast<char*>(b), 4, field);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is, const char* field) {
  const std::uint64_t lo = get_u32(is, field);
  const std::uint64_t hi = get_u32(is, field);
  return lo | (hi << 32);
}

}  // namespace io

inline void write_rmt(std::ostream& os, const RawTensor& t) {
  if (t.dims.size() > 255) throw ContractError("RMT1: rank exceeds 255");
  os.write("RMT1", 4);
  io::put_u8(os, static_cast<std::uint8_t>(t.dtype));
  io::put_u8(os, static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) io::put_u32(os, d);
  const std::size_t n = t.count();
  if (t.dtype == DType::kF32) {
    if (t.f32.size() != n) throw ContractError("RMT1: f32 payload does not match dims");
    os.write(reinterpret_cast<const char*>(t.f32.data()),
             static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    if (t.u8.size() != n) throw ContractError("RMT1: u8 payload does not match dims");
    os.write(reinterpret_cast<const char*>(t.u8.data()), static_cast<std::streamsize>(n));
  }
}

inline RawTensor read_rmt(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "RMT1", 4) != 0) {
    throw FormatError("RMT1: bad magic");
  }
  RawTensor t;
  const std::uint8_t code = io::get_u8(is, "dtype");
  if (code > 1) throw FormatError("RMT1: unknown dtype code " + std::to_string(code));
  t.dtype = static_cast<DType>(code);
  const std::uint8_t rank = io::get_u8(is, "rank");
  t.dims.resize(rank);
  for (auto& d : t.dims) d = io::get_u32(is, "dims");
  const std::size_t n = t.count();
  const std::size_t bytes = n * (t.dtype == DType::kF32 ? sizeof(float) : 1);
  char* dst;
  if (t.dtype == DType::kF32) {
    t.f32.resize(n);
    dst = reinterpret_cast<char*>(t.f32.data());
  } else {
    t.u8.resize(n);
    dst = reinterpret_cast<char*>(t.u8.data());
  }
  is.read(dst, static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(is.gcount()) != bytes) {
    throw FormatError("RMT1: payload length " + std::to_string(is.gcount()) +
                      " bytes, expected " + std::to_string(bytes));
  }
  return t;
}

inline void write_rmt_file(const std::filesystem::path& path, const RawTensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_rmt(os, t);
  if (!os) throw IoError("write failed: " + path.string());
}

inline RawTensor read_rmt_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_rmt(is);
}

inline RawTensor to_raw(const FeatureMap<float>& m) {
  RawTensor t;
  t.dtype = DType::kF32;
  t.dims = {static_cast<std::uint32_t>(m.height), static_cast<std::uint32_t>(m.width),
            static_cast<std::uint32_t>(m.channels)};
  t.f32 = m.data;
  return t;
}

inline RawTensor to_raw(const LabelGrid& g) {
  RawTensor t;
  t.dtype = DType::kU8;
  t.dims = {static_cast<std::uint32_t>(g.height), static_cast<std::uint32_t>(g.width)};
  t.u8 = g.data;
  return t;
}

inline FeatureMap<float> feature_map_from_raw(RawTensor t) {
  if (t.dtype != DType::kF32) throw FormatError("RMT1: dtype must be f32 for a modality tensor");
  if (t.dims.size() != 3) throw FormatError("RMT1: rank must be 3 for a modality tensor");
  FeatureMap<float> m;
  m.height = t.dims[0];
  m.width = t.dims[1];
  m.channels = t.dims[2];
  m.data = std::move(t.f32);
  return m;
}

inline LabelGrid label_grid_from_raw(RawTensor t) {
  if (t.dtype != DType::kU8) throw FormatError("RMT1: dtype must be u8 for a label file");
  if (t.dims.size() != 2) throw FormatError("RMT1: rank must be 2 for a label file");
  LabelGrid g;
  g.height = t.dims[0];
  g.width = t.dims[1];
  g.data = std::move(t.u8);
  return g;
}

}  // namespace robustseg
