#pragma once

// Dense kernels used by every layer. Two implementations are kept side by side:
//
//   kernels::serial   plain scalar loops; the reference the tests compare against
//   kernels::         OpenMP row-parallel versions used by the models
//
// Both accumulate every output element over the reduction index in the same
// ascending order, so their results are bit-identical. Work is split by output
// rows only, which also keeps the parallel versions deterministic.

#include <cstddef>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tandem::kernels {

/// Below this many multiply-adds a kernel runs single-threaded.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

/// Caps OpenMP worker threads from TANDEM_NUM_THREADS (no-op when unset).
void configure_threads_from_env();
int max_threads();

namespace serial {

/// C[M,N] = bias[N] + A[M,K] * B[K,N]; bias may be null.
template <typename T>
void matmul(const T* a, const T* b, const T* bias, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = bias ? bias[j] : T{0};
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

/// C[M,K] += G[M,N] * B[K,N]^T
template <typename T>
void matmul_bt_acc(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      T s = c[i * k + p];
      for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * b[p * n + j];
      c[i * k + p] = s;
    }
  }
}

/// W[K,N] += A[M,K]^T * G[M,N]
template <typename T>
void matmul_at_acc(const T* a, const T* g, T* w, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = w[p * n + j];
      for (std::size_t i = 0; i < m; ++i) s += a[i * k + p] * g[i * n + j];
      w[p * n + j] = s;
    }
  }
}

/// out[N] += sum over rows of G[M,N]
template <typename T>
void colsum_acc(const T* g, T* out, std::size_t m, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    T s = out[j];
    for (std::size_t i = 0; i < m; ++i) s += g[i * n + j];
    out[j] = s;
  }
}

}  // namespace serial

template <typename T>
void matmul(const T* a, const T* b, const T* bias, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const long long rows = static_cast<long long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (long long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T* ci = c + i * n;
    if (bias) {
      for (std::size_t j = 0; j < n; ++j) ci[j] = bias[j];
    } else {
      for (std::size_t j = 0; j < n; ++j) ci[j] = T{0};
    }
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void matmul_bt_acc(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  // Transpose B once so the inner loop is a contiguous axpy.
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  const long long rows = static_cast<long long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (long long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T* ci = c + i * k;
    const T* gi = g + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T gv = gi[j];
      const T* bj = bt.data() + j * k;
      for (std::size_t p = 0; p < k; ++p) ci[p] += gv * bj[p];
    }
  }
}

template <typename T>
void matmul_at_acc(const T* a, const T* g, T* w, std::size_t m, std::size_t k, std::size_t n) {
  const long long kk = static_cast<long long>(k);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (long long pp = 0; pp < kk; ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    T* wp = w + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[i * k + p];
      const T* gi = g + i * n;
      for (std::size_t j = 0; j < n; ++j) wp[j] += av * gi[j];
    }
  }
}

template <typename T>
void colsum_acc(const T* g, T* out, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* gi = g + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += gi[j];
  }
}

}  // namespace tandem::kernels
