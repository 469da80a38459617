// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robustseg/errors.hpp"
#include "robustseg/synth_data.hpp"

namespace robustseg {

// Bit m set <=> modality m present.
using ModalityMask = std::uint32_t;

inline constexpr std::size_t kMaxModalities = 16;

inline ModalityMask full_mask(std::size_t num_modalities) {
  return num_modalities >= 32 ? ~0u : ((1u << num_modalities) - 1u);
}

inline std::size_t popcount(ModalityMask m) { return static_cast<std::size_t>(__builtin_popcount(m)); }

inline bool has(ModalityMask m, std::size_t i) { return (m >> i) & 1u; }

inline std::vector<std::size_t> members(ModalityMask m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < 32; ++i) {
    if (has(m, i)) out.push_back(i);
  }
  return out;
}

// Every non-empty subset: ordered by size, then lexicographically by member
// indices (R, D, E, L, RD, RE, ... RDEL for four modalities).
inline std::vector<ModalityMask> enumerate_subsets(std::size_t num_modalities) {
  require(num_modalities >= 1 && num_modalities <= kMaxModalities,
          "enumerate_subsets: modality count out of range");
  std::vector<ModalityMask> out;
  for (std::size_t k = 1; k <= num_modalities; ++k) {
    std::vector<std::size_t> idx(k);
    for (std::size_t i = 0; i < k; ++i) idx[i] = i;
    while (true) {
      ModalityMask m = 0;
      for (auto i : idx) m |= 1u << i;
      out.push_back(m);
      std::size_t pos = k;
      while (pos > 0 && idx[pos - 1] == num_modalities - k + pos - 1) --pos;
      if (pos == 0) break;
      ++idx[pos - 1];
      for (std::size_t j = pos; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
  }
  return out;
}

inline std::string subset_name(ModalityMask m, const std::vector<std::string>& modality_names) {
  std::string s;
  for (std::size_t i = 0; i < modality_names.size(); ++i) {
    if (has(m, i)) s.push_back(modality_initial(modality_names[i]));
  }
  return s;
}

inline ModalityMask parse_subset_name(const std::string& name,
                                      const std::vector<std::string>& modality_names) {
  ModalityMask m = 0;
  for (char c : name) {
    bool found = false;
    for (std::size_t i = 0; i < modality_names.size(); ++i) {
      if (modality_initial(modality_names[i]) == c) {
        m |= 1u << i;
        found = true;
      }
    }
    if (!found) throw LookupError("unknown modality initial '" + std::string(1, c) + "' in subset " + name);
  }
  return m;
}

}  // namespace robustseg
