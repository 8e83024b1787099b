#pragma once

// Dense row-major GEMM kernels. Every output element is computed as
// C[i,j] + sum_p A[i,p]*B[p,j] with p ascending, independent of the matrix
// extents, so a row's result never depends on how many other rows are present.

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace lkd::kernels {

namespace detail {

template <typename T, std::size_t MR>
inline void gemm_block(std::size_t i, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  constexpr std::size_t NR = 64;
  for (std::size_t j0 = 0; j0 < N; j0 += NR) {
    const std::size_t nb = std::min(NR, N - j0);
    alignas(64) T acc[MR][NR] = {};
    for (std::size_t p = 0; p < K; ++p) {
      const T* b = B + p * N + j0;
      T a[MR];
      for (std::size_t r = 0; r < MR; ++r) a[r] = A[(i + r) * K + p];
      if (nb == NR) {
        for (std::size_t j = 0; j < NR; ++j) {
          for (std::size_t r = 0; r < MR; ++r) acc[r][j] += a[r] * b[j];
        }
      } else {
        for (std::size_t j = 0; j < nb; ++j) {
          for (std::size_t r = 0; r < MR; ++r) acc[r][j] += a[r] * b[j];
        }
      }
    }
    for (std::size_t r = 0; r < MR; ++r) {
      T* c = C + (i + r) * N + j0;
      for (std::size_t j = 0; j < nb; ++j) c[j] += acc[r][j];
    }
  }
}

template <typename T>
std::vector<T> transpose_copy(std::size_t rows, std::size_t cols, const T* src) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

}  // namespace detail

/// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  constexpr std::size_t MR = 4;
  std::size_t i = 0;
  for (; i + MR <= M; i += MR) detail::gemm_block<T, MR>(i, N, K, A, B, C);
  for (; i < M; ++i) detail::gemm_block<T, 1>(i, N, K, A, B, C);
}

/// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  const auto bt = detail::transpose_copy(N, K, B);
  gemm_nn(M, N, K, A, bt.data(), C);
}

/// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  const auto at = detail::transpose_copy(K, M, A);
  gemm_nn(M, N, K, at.data(), B, C);
}

}  // namespace lkd::kernels
