#pragma once

// Low-level numeric kernels shared by the tensor ops. Deterministic by
// construction: every output element is reduced serially by exactly one
// thread, so results do not depend on the thread count.

#include <cstddef>

#include "adbench/common.hpp"

namespace adbench::kernels {

// C[M,N] (+)= op(A) * op(B) where op is optional transposition.
// A is MxK (or KxM if trans_a), B is KxN (or NxK if trans_b).
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
  }
  const long mm = static_cast<long>(m);
#if defined(ADBENCH_HAVE_OPENMP)
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) \
    if (kernel_threads() > 1 && m * n * k > 16384)
#endif
  for (long i = 0; i < mm; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    if (!trans_a && !trans_b) {
      const T* arow = a + static_cast<std::size_t>(i) * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    } else if (!trans_a && trans_b) {
      const T* arow = a + static_cast<std::size_t>(i) * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = T(0);
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    } else if (trans_a && !trans_b) {
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[p * m + static_cast<std::size_t>(i)];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        T acc = T(0);
        for (std::size_t p = 0; p < k; ++p)
          acc += a[p * m + static_cast<std::size_t>(i)] * b[j * k + p];
        crow[j] += acc;
      }
    }
  }
}

// Unpacks conv windows of one image [C,H,W] into columns [C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  const std::size_t plane = h * w;
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        T* out = col + row * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) {
            for (std::size_t ox = 0; ox < wo; ++ox) out[oy * wo + ox] = T(0);
            continue;
          }
          const T* src = img + ch * plane + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            out[oy * wo + ox] =
                (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

// Scatter-add of columns back into image space; inverse of im2col.
template <typename T>
void col2im_add(const T* col, std::size_t c, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, std::size_t stride,
                std::size_t pad, std::size_t ho, std::size_t wo, T* img) {
  const std::size_t plane = h * w;
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        const T* src = col + row * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = img + ch * plane + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w))
              dst[ix] += src[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace adbench::kernels
