// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "robustseg/errors.hpp"

namespace robustseg {

inline constexpr std::uint8_t kIgnoreLabel = 255;

// Channels-last dense map: element (y, x, c) lives at (y * width + x) * channels + c.
// Used for modality inputs, stage features and logits alike; a row is one pixel.
template <typename T>
struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<T> data;

  FeatureMap() = default;
  FeatureMap(std::size_t h, std::size_t w, std::size_t c, T fill = T{0})
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  std::size_t pixels() const { return height * width; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  T& at(std::size_t y, std::size_t x, std::size_t c) {
    return data[(y * width + x) * channels + c];
  }
  const T& at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * channels + c];
  }

  std::span<T> row(std::size_t p) { return {data.data() + p * channels, channels}; }
  std::span<const T> row(std::size_t p) const {
    return {data.data() + p * channels, channels};
  }

  bool same_shape(const FeatureMap& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  FeatureMap<U> cast() const {
    FeatureMap<U> out(height, width, channels);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  friend bool operator==(const FeatureMap& a, const FeatureMap& b) {
    return a.same_shape(b) && a.data == b.data;
  }
};

struct LabelGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  LabelGrid() = default;
  LabelGrid(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), data(h * w, fill) {}

  std::size_t pixels() const { return height * width; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }

  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;
};

inline std::string shape_string(std::size_t h, std::size_t w, std::size_t c) {
  return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
}

template <typename T>
void require_same_shape(const FeatureMap<T>& a, const FeatureMap<T>& b,
                        const std::string& what) {
  if (!a.same_shape(b)) {
    throw ContractError(what + ": shape mismatch " +
                        shape_string(a.height, a.width, a.channels) + " vs " +
                        shape_string(b.height, b.width, b.channels));
  }
}

}  // namespace robustseg
