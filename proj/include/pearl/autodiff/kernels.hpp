#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace pearl::ad::kernels {

// Row-major dense products. Every output element is accumulated over the inner
// dimension in ascending order, independent of how many rows are processed, so
// a row's result does not depend on the batch it was computed in.

namespace detail {

template <class T>
inline constexpr std::size_t kLanes = 64 / sizeof(T);

template <class T>
struct VecOf;
template <>
struct VecOf<float> {
  typedef float type __attribute__((vector_size(64)));
};
template <>
struct VecOf<double> {
  typedef double type __attribute__((vector_size(64)));
};
template <>
struct VecOf<long double> {
  typedef long double type __attribute__((vector_size(64)));
};

template <class T>
using Vec = typename VecOf<T>::type;

template <class T>
inline Vec<T> load(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <class T>
inline void store(T* p, const Vec<T>& v) {
  std::memcpy(p, &v, sizeof(v));
}

/// C[R rows, 2 * kLanes cols at j0] (+)= sum_k A(r, k) * B[k, j0 + j] with
/// A(r, k) = A[r * ai + k * ak].
template <std::size_t R, class T>
inline void tile_wide(std::size_t N, std::size_t K, const T* A, std::size_t ai, std::size_t ak,
                      const T* B, T* C, std::size_t j0, bool accumulate) {
  constexpr std::size_t L = kLanes<T>;
  Vec<T> acc[R][2];
  for (std::size_t r = 0; r < R; ++r) {
    acc[r][0] = accumulate ? load(C + r * N + j0) : Vec<T>{};
    acc[r][1] = accumulate ? load(C + r * N + j0 + L) : Vec<T>{};
  }
  for (std::size_t k = 0; k < K; ++k) {
    const Vec<T> b0 = load(B + k * N + j0), b1 = load(B + k * N + j0 + L);
    for (std::size_t r = 0; r < R; ++r) {
      const T a = A[r * ai + k * ak];
      acc[r][0] += a * b0;
      acc[r][1] += a * b1;
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    store(C + r * N + j0, acc[r][0]);
    store(C + r * N + j0 + L, acc[r][1]);
  }
}

template <std::size_t R, class T>
inline void tile_lane(std::size_t N, std::size_t K, const T* A, std::size_t ai, std::size_t ak,
                      const T* B, T* C, std::size_t j0, bool accumulate) {
  Vec<T> acc[R];
  for (std::size_t r = 0; r < R; ++r) acc[r] = accumulate ? load(C + r * N + j0) : Vec<T>{};
  for (std::size_t k = 0; k < K; ++k) {
    const Vec<T> b = load(B + k * N + j0);
    for (std::size_t r = 0; r < R; ++r) acc[r] += A[r * ai + k * ak] * b;
  }
  for (std::size_t r = 0; r < R; ++r) store(C + r * N + j0, acc[r]);
}

template <std::size_t R, class T>
inline void tile_narrow(std::size_t N, std::size_t K, const T* A, std::size_t ai, std::size_t ak,
                        const T* B, T* C, std::size_t j0, std::size_t width, bool accumulate) {
  constexpr std::size_t L = kLanes<T>;
  T acc[R][L];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < width; ++j) acc[r][j] = accumulate ? C[r * N + j0 + j] : T{0};
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * N + j0;
    for (std::size_t r = 0; r < R; ++r) {
      const T a = A[r * ai + k * ak];
      for (std::size_t j = 0; j < width; ++j) acc[r][j] += a * b[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < width; ++j) C[r * N + j0 + j] = acc[r][j];
}

template <std::size_t R, class T>
inline void row_panel(std::size_t N, std::size_t K, const T* A, std::size_t ai, std::size_t ak,
                      const T* B, T* C, bool accumulate) {
  constexpr std::size_t L = kLanes<T>;
  std::size_t j0 = 0;
  for (; j0 + 2 * L <= N; j0 += 2 * L) tile_wide<R>(N, K, A, ai, ak, B, C, j0, accumulate);
  for (; j0 + L <= N; j0 += L) tile_lane<R>(N, K, A, ai, ak, B, C, j0, accumulate);
  if (j0 < N) tile_narrow<R>(N, K, A, ai, ak, B, C, j0, N - j0, accumulate);
}

template <class T>
void gemm_strided(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t ai,
                  std::size_t ak, const T* B, T* C, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) row_panel<4>(N, K, A + i * ai, ai, ak, B, C + i * N, accumulate);
  for (; i < M; ++i) row_panel<1>(N, K, A + i * ai, ai, ak, B, C + i * N, accumulate);
}

}  // namespace detail

/// C[M,N] (+)= A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
             T* C, bool accumulate) {
  detail::gemm_strided(M, N, K, A, K, 1, B, C, accumulate);
}

/// B^T for a row-major [rows, cols] matrix.
template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

/// C[M,N] (+)= A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
             T* C, bool accumulate, std::vector<T>& scratch) {
  scratch.resize(N * K);
  transpose(N, K, B, scratch.data());
  gemm_nn(M, N, K, A, scratch.data(), C, accumulate);
}

/// C[M,N] (+)= A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
             T* C, bool accumulate) {
  detail::gemm_strided(M, N, K, A, 1, M, B, C, accumulate);
}

}  // namespace pearl::ad::kernels
