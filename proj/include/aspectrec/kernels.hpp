#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <utility>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace aspectrec::kernels {

// Serial reference kernels stay in the build and the parallel versions are
// tested against them for exact equality: every output element accumulates in
// the same order (k ascending) in both, so results are bit-identical for any
// thread count.

inline bool& parallel_flag() {
  static bool enabled = true;
  return enabled;
}
inline void set_parallel(bool on) { parallel_flag() = on; }

inline int hardware_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline bool should_parallelize(std::size_t work) {
#ifdef _OPENMP
  return parallel_flag() && work >= 32768 && omp_get_max_threads() > 1 &&
         !omp_in_parallel();
#else
  (void)work;
  return false;
#endif
}

// ---------------------------------------------------------------------------
// matmul: C (+)= A (m x k) * B (k x n)

template <class S>
void matmul_serial(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      S acc = accumulate ? c[i * n + j] : S(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <class S>
void matmul_row(const S* a, const S* b, S* c, std::size_t i, std::size_t k,
                std::size_t n, bool accumulate) {
  S* crow = c + i * n;
  if (!accumulate)
    for (std::size_t j = 0; j < n; ++j) crow[j] = S(0);
  const S* arow = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const S av = arow[p];
    const S* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

template <class S>
void matmul(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false) {
  if (should_parallelize(m * k * n) && m > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (long i = 0; i < static_cast<long>(m); ++i)
      matmul_row(a, b, c, static_cast<std::size_t>(i), k, n, accumulate);
#endif
    return;
  }
  for (std::size_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n, accumulate);
}

// ---------------------------------------------------------------------------
// matmul_at_b: C (+)= A^T (m x k stored k x m) * B (k x n); i.e. a is (k x m).
// Used for weight gradients dW = x^T * dy.

template <class S>
void matmul_at_b_serial(const S* a, const S* b, S* c, std::size_t m,
                        std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      S acc = accumulate ? c[i * n + j] : S(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <class S>
void matmul_at_b(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate = false) {
  if (should_parallelize(m * k * n) && m > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (long i = 0; i < static_cast<long>(m); ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      S* crow = c + ii * n;
      if (!accumulate)
        for (std::size_t j = 0; j < n; ++j) crow[j] = S(0);
      for (std::size_t p = 0; p < k; ++p) {
        const S av = a[p * m + ii];
        const S* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
#endif
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = S(0);
    for (std::size_t p = 0; p < k; ++p) {
      const S av = a[p * m + i];
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// matmul_a_bt: C (+)= A (m x k) * B^T (k x n stored n x k).
// Used for input gradients dx = dy * W^T and attention scores Q K^T.

template <class S>
void matmul_a_bt_serial(const S* a, const S* b, S* c, std::size_t m,
                        std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      S acc = accumulate ? c[i * n + j] : S(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = acc;
    }
  }
}

template <class S>
void matmul_a_bt(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate = false) {
  if (should_parallelize(m * k * n) && m > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (long i = 0; i < static_cast<long>(m); ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      for (std::size_t j = 0; j < n; ++j) {
        S acc = accumulate ? c[ii * n + j] : S(0);
        for (std::size_t p = 0; p < k; ++p)
          acc += a[ii * k + p] * b[j * k + p];
        c[ii * n + j] = acc;
      }
    }
#endif
    return;
  }
  matmul_a_bt_serial(a, b, c, m, k, n, accumulate);
}

// ---------------------------------------------------------------------------
// Row softmax, numerically stabilized by the row max.

template <class S>
void softmax_row(const S* x, S* y, std::size_t n) {
  S mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  S sum = S(0);
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const S inv = S(1) / sum;
  for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
}

template <class S>
void softmax_rows_serial(const S* x, S* y, std::size_t rows, std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i)
    softmax_row(x + i * n, y + i * n, n);
}

template <class S>
void softmax_rows(const S* x, S* y, std::size_t rows, std::size_t n) {
  if (should_parallelize(rows * n * 8) && rows > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (long i = 0; i < static_cast<long>(rows); ++i)
      softmax_row(x + i * n, y + i * n, n);
#endif
    return;
  }
  softmax_rows_serial(x, y, rows, n);
}

// ---------------------------------------------------------------------------
// Static-partition parallel loop over independent items (batch records).
// Callers own determinism by combining per-item results in item order.

template <class Fn>
void parallel_items(std::size_t n, Fn&& fn) {
#ifdef _OPENMP
  if (parallel_flag() && n > 1 && omp_get_max_threads() > 1 &&
      !omp_in_parallel()) {
    std::exception_ptr err;
#pragma omp parallel for schedule(static)
    for (long i = 0; i < static_cast<long>(n); ++i) {
      try {
        fn(static_cast<std::size_t>(i));
      } catch (...) {
#pragma omp critical
        if (!err) err = std::current_exception();
      }
    }
    if (err) std::rethrow_exception(err);
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) fn(i);
}

}  // namespace aspectrec::kernels
