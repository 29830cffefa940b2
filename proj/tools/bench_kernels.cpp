// Serial-versus-OpenMP comparison for the hot kernels. The parallel versions
// must match the serial references bit for bit (asserted in the test suite);
// this target reports the wall-clock side of that bargain.

#include <chrono>
#include <cstdio>
#include <vector>

#include "aspectrec/kernels.hpp"
#include "aspectrec/rng.hpp"
#include "aspectrec/tensor.hpp"

using namespace aspectrec;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class Fn>
double time_loop(int reps, Fn&& fn) {
  fn();  // warm up
  const auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r) fn();
  return seconds_since(t0) / reps;
}

void bench_matmul(std::size_t n, int reps) {
  SplitMix64 rng(1);
  Tensor<float> a = Tensor<float>::matrix(n, n);
  Tensor<float> b = Tensor<float>::matrix(n, n);
  Tensor<float> c = Tensor<float>::matrix(n, n);
  for (auto& v : a.values) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : b.values) v = static_cast<float>(rng.uniform(-1, 1));

  kernels::set_parallel(false);
  const double serial = time_loop(reps, [&] {
    kernels::matmul_serial(a.data(), b.data(), c.data(), n, n, n, false);
  });
  kernels::set_parallel(true);
  const double parallel = time_loop(reps, [&] {
    kernels::matmul(a.data(), b.data(), c.data(), n, n, n, false);
  });
  const double gflops = 2.0 * n * n * n * 1e-9;
  std::printf("matmul  %4zu^3  serial %8.3f ms (%5.2f GF/s)  omp %8.3f ms "
              "(%5.2f GF/s)  speedup %.2fx\n",
              n, serial * 1e3, gflops / serial, parallel * 1e3,
              gflops / parallel, serial / parallel);
}

void bench_softmax(std::size_t rows, std::size_t n, int reps) {
  SplitMix64 rng(2);
  Tensor<float> x = Tensor<float>::matrix(rows, n);
  Tensor<float> y = Tensor<float>::matrix(rows, n);
  for (auto& v : x.values) v = static_cast<float>(rng.uniform(-4, 4));
  kernels::set_parallel(false);
  const double serial = time_loop(reps, [&] {
    kernels::softmax_rows_serial(x.data(), y.data(), rows, n);
  });
  kernels::set_parallel(true);
  const double parallel = time_loop(reps, [&] {
    kernels::softmax_rows(x.data(), y.data(), rows, n);
  });
  std::printf("softmax %zux%zu  serial %8.3f ms  omp %8.3f ms  speedup %.2fx\n",
              rows, n, serial * 1e3, parallel * 1e3, serial / parallel);
}

}  // namespace

int main() {
  std::printf("threads available: %d\n", kernels::hardware_threads());
  for (const std::size_t n : {64u, 128u, 256u, 384u}) bench_matmul(n, 20);
  bench_softmax(4096, 512, 50);
  return 0;
}
