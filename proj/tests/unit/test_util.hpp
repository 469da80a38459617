// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "robustseg/rng.hpp"
#include "robustseg/tensor.hpp"

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "robustseg-" + tag;
    if (info) name += std::string("-") + info->test_suite_name() + "-" + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

template <typename T>
robustseg::FeatureMap<T> random_map(std::size_t h, std::size_t w, std::size_t c, robustseg::Rng& rng,
                                    double scale = 1.0) {
  robustseg::FeatureMap<T> m(h, w, c);
  for (auto& v : m.data) v = static_cast<T>(scale * rng.normal());
  return m;
}

inline robustseg::LabelGrid random_labels(std::size_t h, std::size_t w, std::size_t C, robustseg::Rng& rng,
                                          double ignore_rate = 0.0) {
  robustseg::LabelGrid g(h, w);
  for (auto& v : g.data) {
    v = rng.bernoulli(ignore_rate) ? robustseg::kIgnoreLabel : static_cast<std::uint8_t>(rng.below(C));
  }
  return g;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testutil
