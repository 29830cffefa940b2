#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "aspectrec/kernels.hpp"
#include "aspectrec/rng.hpp"
#include "aspectrec/tensor.hpp"

using namespace aspectrec;

namespace {

template <class S>
Tensor<S> random_matrix(std::size_t r, std::size_t c, SplitMix64& rng) {
  Tensor<S> t = Tensor<S>::matrix(r, c);
  for (S& v : t.values) v = static_cast<S>(rng.uniform(-1.0, 1.0));
  return t;
}

}  // namespace

TEST_CASE("parallel matmul matches the serial reference bit for bit") {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = 1 + rng.next_below(60);
    const std::size_t k = 1 + rng.next_below(60);
    const std::size_t n = 1 + rng.next_below(60);
    const auto a = random_matrix<float>(m, k, rng);
    const auto b = random_matrix<float>(k, n, rng);
    Tensor<float> serial = Tensor<float>::matrix(m, n);
    Tensor<float> par = Tensor<float>::matrix(m, n);
    kernels::matmul_serial(a.data(), b.data(), serial.data(), m, k, n, false);
    kernels::matmul(a.data(), b.data(), par.data(), m, k, n, false);
    REQUIRE(serial.values == par.values);
  }
}

TEST_CASE("transposed matmul variants match their serial references") {
  SplitMix64 rng(12);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = 1 + rng.next_below(40);
    const std::size_t k = 1 + rng.next_below(40);
    const std::size_t n = 1 + rng.next_below(40);
    // A^T * B with A stored (k x m)
    const auto a = random_matrix<float>(k, m, rng);
    const auto b = random_matrix<float>(k, n, rng);
    Tensor<float> serial = Tensor<float>::matrix(m, n);
    Tensor<float> par = Tensor<float>::matrix(m, n);
    kernels::matmul_at_b_serial(a.data(), b.data(), serial.data(), m, k, n,
                                false);
    kernels::matmul_at_b(a.data(), b.data(), par.data(), m, k, n, false);
    CHECK(serial.values == par.values);
    // A * B^T with B stored (n x k)
    const auto a2 = random_matrix<float>(m, k, rng);
    const auto b2 = random_matrix<float>(n, k, rng);
    Tensor<float> serial2 = Tensor<float>::matrix(m, n);
    Tensor<float> par2 = Tensor<float>::matrix(m, n);
    kernels::matmul_a_bt_serial(a2.data(), b2.data(), serial2.data(), m, k, n,
                                false);
    kernels::matmul_a_bt(a2.data(), b2.data(), par2.data(), m, k, n, false);
    CHECK(serial2.values == par2.values);
  }
}

TEST_CASE("accumulate variants add on top of existing values") {
  SplitMix64 rng(13);
  const std::size_t m = 7, k = 9, n = 5;
  const auto a = random_matrix<double>(m, k, rng);
  const auto b = random_matrix<double>(k, n, rng);
  Tensor<double> base = random_matrix<double>(m, n, rng);
  Tensor<double> acc = base;
  kernels::matmul(a.data(), b.data(), acc.data(), m, k, n, true);
  Tensor<double> fresh = Tensor<double>::matrix(m, n);
  kernels::matmul_serial(a.data(), b.data(), fresh.data(), m, k, n, false);
  for (std::size_t i = 0; i < acc.size(); ++i)
    CHECK(acc[i] == doctest::Approx(base[i] + fresh[i]).epsilon(1e-12));
}

TEST_CASE("softmax rows: parallel equals serial, rows sum to 1") {
  SplitMix64 rng(14);
  const std::size_t rows = 64, n = 33;
  const auto x = random_matrix<float>(rows, n, rng);
  Tensor<float> serial = Tensor<float>::matrix(rows, n);
  Tensor<float> par = Tensor<float>::matrix(rows, n);
  kernels::softmax_rows_serial(x.data(), serial.data(), rows, n);
  kernels::softmax_rows(x.data(), par.data(), rows, n);
  REQUIRE(serial.values == par.values);
  for (std::size_t i = 0; i < rows; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += serial.at(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("parallel_items covers every index exactly once and rethrows") {
  std::vector<int> hits(257, 0);
  kernels::parallel_items(hits.size(), [&](std::size_t i) { hits[i]++; });
  for (int h : hits) CHECK(h == 1);

  CHECK_THROWS_AS(kernels::parallel_items(
                      8,
                      [&](std::size_t i) {
                        if (i == 3) throw std::runtime_error("boom");
                      }),
                  std::runtime_error);
}

TEST_CASE("disabling the parallel flag forces serial execution paths") {
  kernels::set_parallel(false);
  SplitMix64 rng(15);
  const auto a = random_matrix<float>(50, 50, rng);
  const auto b = random_matrix<float>(50, 50, rng);
  Tensor<float> c1 = Tensor<float>::matrix(50, 50);
  kernels::matmul(a.data(), b.data(), c1.data(), 50, 50, 50, false);
  kernels::set_parallel(true);
  Tensor<float> c2 = Tensor<float>::matrix(50, 50);
  kernels::matmul(a.data(), b.data(), c2.data(), 50, 50, 50, false);
  CHECK(c1.values == c2.values);
}
