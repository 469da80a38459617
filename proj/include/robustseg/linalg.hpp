// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace robustseg::linalg {

// Row-major kernels: A is rows x inner, B is inner x cols.

// out = A * B + bias (bias may be null)
template <typename T>
void matmul_bias(const T* a, const T* b, const T* bias, T* out, std::size_t rows,
                 std::size_t inner, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] = bias ? bias[c] : T{0};
    const T* ar = a + r * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const T av = ar[k];
      if (av == T{0}) continue;
      const T* br = b + k * cols;
      for (std::size_t c = 0; c < cols; ++c) o[c] += av * br[c];
    }
  }
}

// grad_b += A^T * grad_out ; grad_bias += column sums of grad_out
template <typename T>
void accumulate_weight_grad(const T* a, const T* grad_out, T* grad_w, T* grad_bias,
                            std::size_t rows, std::size_t inner, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = grad_out + r * cols;
    const T* ar = a + r * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const T av = ar[k];
      if (av == T{0}) continue;
      T* gw = grad_w + k * cols;
      for (std::size_t c = 0; c < cols; ++c) gw[c] += av * g[c];
    }
    if (grad_bias) {
      for (std::size_t c = 0; c < cols; ++c) grad_bias[c] += g[c];
    }
  }
}

// grad_a = grad_out * B^T
template <typename T>
void input_grad(const T* grad_out, const T* b, T* grad_a, std::size_t rows, std::size_t inner,
                std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = grad_out + r * cols;
    T* ga = grad_a + r * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const T* br = b + k * cols;
      T acc{0};
      for (std::size_t c = 0; c < cols; ++c) acc += g[c] * br[c];
      ga[k] = acc;
    }
  }
}

template <typename T>
T squared_norm(const std::vector<T>& v) {
  T s{0};
  for (T x : v) s += x * x;
  return s;
}

}  // namespace robustseg::linalg
