#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "aspectrec/grad_check.hpp"
#include "aspectrec/param_store.hpp"
#include "aspectrec/rng.hpp"
#include "aspectrec/tape.hpp"

using namespace aspectrec;
using Id = Tape<double>::Id;

namespace {

Tensor<double> rand_tensor(std::vector<std::size_t> shape, SplitMix64& rng,
                           double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.values) v = scale * rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("primitive forward examples") {
  ParamStore<double> store;
  Tape<double> tape(store);

  const Id sm = tape.softmax(tape.constant(Tensor<double>::vec({0.0, 0.0})), 0);
  CHECK(tape.value(sm)[0] == doctest::Approx(0.5));
  CHECK(tape.value(sm)[1] == doctest::Approx(0.5));

  const Id sg = tape.sigmoid(tape.constant(Tensor<double>::scalar(0.0)));
  CHECK(tape.value(sg)[0] == doctest::Approx(0.5));

  // uniform logits over 4 classes, correct class one-hot => ln 4
  Tensor<double> logits = Tensor<double>::matrix(1, 4);
  const Id ce = tape.cross_entropy_rows(tape.constant(logits), {2});
  CHECK(tape.value(ce)[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(tape.value(ce)[0] >= 0.0);
}

TEST_CASE("softmax rows sum to one within 1e-6") {
  ParamStore<double> store;
  Tape<double> tape(store);
  SplitMix64 rng(77);
  const Id x = tape.constant(rand_tensor({20, 13}, rng, 4.0));
  const Id sm = tape.softmax(x, 1);
  for (std::size_t i = 0; i < 20; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < 13; ++j) sum += tape.value(sm).at(i, j);
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("shape mismatches raise errors naming the operands") {
  ParamStore<double> store;
  Tape<double> tape(store);
  const Id a = tape.constant(Tensor<double>::matrix(2, 3));
  const Id b = tape.constant(Tensor<double>::matrix(2, 3));
  CHECK_THROWS_WITH_AS(tape.matmul(a, b),
                       doctest::Contains("matmul"), std::invalid_argument);
  const Id c = tape.constant(Tensor<double>::vec({1, 2}));
  CHECK_THROWS_AS(tape.mul(a, c), std::invalid_argument);
}

TEST_CASE("backward basics: w^2 at 3, unreachable parameter, scalar check") {
  ParamStore<double> store;
  const int w = store.add("w", Tensor<double>::scalar(3.0));
  const int b = store.add("b", Tensor<double>::scalar(5.0));
  Tape<double> tape(store);
  const Id wl = tape.param(w);
  tape.param(b);  // present but unused by the loss
  const Id loss = tape.mul(wl, wl);
  tape.backward(loss);
  Gradients<double> g(store.count());
  tape.export_grads(g);
  CHECK(g.get(w)[0] == doctest::Approx(6.0));
  CHECK(g.get(b)[0] == 0.0);

  Tape<double> tape2(store);
  const Id vec = tape2.constant(Tensor<double>::vec({1, 2}));
  CHECK_THROWS_AS(tape2.backward(vec), std::invalid_argument);
}

TEST_CASE("sgd step: basic update, freezing contract, zero learning rate") {
  ParamStore<double> store;
  const int w = store.add("w", Tensor<double>::scalar(1.0));
  const int f = store.add("f", Tensor<double>::scalar(1.0), false);
  Gradients<double> g(store.count());
  g.slot_for(store, w)[0] = 2.0;
  g.slot_for(store, f)[0] = 100.0;
  sgd_step(store, g, 0.1);
  CHECK(store.value(w)[0] == doctest::Approx(0.8));
  CHECK(store.value(f)[0] == 1.0);
  sgd_step(store, g, 0.0);
  CHECK(store.value(w)[0] == doctest::Approx(0.8));
}

TEST_CASE("grad_check passes a quadratic at tol 1e-6") {
  ParamStore<double> store;
  const int w = store.add("w", Tensor<double>::vec({1.5, -2.0, 0.7}));
  const auto report = grad_check<double>(
      store,
      [&](Tape<double>& t) {
        const Id wl = t.param(w);
        return t.sum_squared_error(wl, Tensor<double>::vec({0.5, 0.5, 0.5}));
      },
      1e-5, 1e-6);
  CHECK(report.pass());
}

TEST_CASE("grad_check fails on a deliberately corrupted backward rule") {
  ParamStore<double> store;
  const int w = store.add("w", Tensor<double>::scalar(3.0));
  const auto report = grad_check<double>(
      store,
      [&](Tape<double>& t) {
        const Id wl = t.param(w);
        const double wv = t.value(wl)[0];
        // forward w^2 but backward pretends d/dw = 3w
        return t.custom(Tensor<double>::scalar(wv * wv),
                        [wl, wv](Tape<double>& tt, const Tensor<double>& up) {
                          tt.grad_of(wl)[0] += up[0] * 3.0 * wv;
                        });
      },
      1e-5, 1e-4);
  CHECK_FALSE(report.pass());
}

TEST_CASE("composite gradients: dense sigmoid head") {
  SplitMix64 rng(101);
  ParamStore<double> store;
  const int w = store.add("w", rand_tensor({4, 3}, rng, 0.6));
  const int b = store.add("b", rand_tensor({3}, rng, 0.3));
  const int x = store.add("x", rand_tensor({2, 4}, rng, 0.8));
  const Tensor<double> target = rand_tensor({2, 3}, rng, 0.5);
  const auto report = grad_check<double>(
      store,
      [&](Tape<double>& t) {
        const Id z = t.sigmoid(t.add(t.matmul(t.param(x), t.param(w)),
                                     t.param(b)));
        return t.sum_squared_error(z, target);
      },
      1e-5, 1e-6);
  CHECK(report.pass());
}

TEST_CASE("composite gradients: layer norm, gelu, softmax path") {
  SplitMix64 rng(102);
  ParamStore<double> store;
  const int x = store.add("x", rand_tensor({3, 6}, rng));
  const int g = store.add("g", rand_tensor({6}, rng, 0.5));
  const int b = store.add("b", rand_tensor({6}, rng, 0.5));
  const Tensor<double> target = rand_tensor({6}, rng, 0.3);
  const auto report = grad_check<double>(
      store,
      [&](Tape<double>& t) {
        const Id h = t.gelu(t.layer_norm(t.param(x), t.param(g), t.param(b)));
        const Id p = t.softmax(t.flatten(t.mean_rows(h)), 0);
        return t.sum_squared_error(p, target);
      },
      1e-5, 1e-4);
  CHECK(report.pass());
}

TEST_CASE("composite gradients: gather, concat, slice, scale") {
  SplitMix64 rng(103);
  ParamStore<double> store;
  const int table = store.add("table", rand_tensor({5, 3}, rng));
  const int v = store.add("v", rand_tensor({4}, rng));
  const Tensor<double> target = rand_tensor({7}, rng, 0.4);
  const auto report = grad_check<double>(
      store,
      [&](Tape<double>& t) {
        const Id rows = t.embedding_rows(t.param(table), {1, 3, 1});
        const Id first = t.flatten(t.take_row(rows, 0));
        const Id alpha = t.slice_elem(t.param(v), 2);
        const Id scaled = t.scale_by(first, alpha);
        const Id cat = t.concat({scaled, t.param(v)});
        return t.sum_squared_error(cat, target);
      },
      1e-5, 1e-6);
  CHECK(report.pass());
}

TEST_CASE("causal self-attention gradients pass at 1e-4") {
  SplitMix64 rng(104);
  for (int trial = 0; trial < 3; ++trial) {
    ParamStore<double> store;
    const std::size_t L = 5, d = 4;
    const int x = store.add("x", rand_tensor({L, d}, rng, 0.8));
    const int wq = store.add("wq", rand_tensor({d, d}, rng, 0.5));
    const int bq = store.add("bq", rand_tensor({d}, rng, 0.2));
    const int wk = store.add("wk", rand_tensor({d, d}, rng, 0.5));
    const int bk = store.add("bk", rand_tensor({d}, rng, 0.2));
    const int wv = store.add("wv", rand_tensor({d, d}, rng, 0.5));
    const int bv = store.add("bv", rand_tensor({d}, rng, 0.2));
    const int wo = store.add("wo", rand_tensor({d, d}, rng, 0.5));
    const int bo = store.add("bo", rand_tensor({d}, rng, 0.2));
    const Tensor<double> target = rand_tensor({L, d}, rng, 0.5);
    const auto report = grad_check<double>(
        store,
        [&](Tape<double>& t) {
          const Id out = t.causal_self_attention(
              t.param(x), t.param(wq), t.param(bq), t.param(wk), t.param(bk),
              t.param(wv), t.param(bv), t.param(wo), t.param(bo), 2);
          return t.sum_squared_error(out, target);
        },
        1e-5, 1e-4);
    CHECK(report.pass());
  }
}

TEST_CASE("cross entropy and multilabel cross entropy gradients") {
  SplitMix64 rng(105);
  ParamStore<double> store;
  const int logits = store.add("logits", rand_tensor({4, 6}, rng, 1.5));
  const auto r1 = grad_check<double>(
      store,
      [&](Tape<double>& t) {
        return t.cross_entropy_rows(t.param(logits), {1, 0, 5, 3});
      },
      1e-5, 1e-6);
  CHECK(r1.pass());

  ParamStore<double> store2;
  const int l2 = store2.add("logits", rand_tensor({9}, rng, 1.5));
  const auto r2 = grad_check<double>(
      store2,
      [&](Tape<double>& t) {
        return t.multilabel_cross_entropy(t.param(l2), {2, 7, 4});
      },
      1e-5, 1e-6);
  CHECK(r2.pass());
}

TEST_CASE("forward determinism: identical graphs produce identical bits") {
  SplitMix64 rng(106);
  ParamStore<double> store;
  const int x = store.add("x", rand_tensor({6, 8}, rng));
  const int g = store.add("g", rand_tensor({8}, rng, 0.4));
  const int b = store.add("b", rand_tensor({8}, rng, 0.4));
  auto run = [&]() {
    Tape<double> t(store);
    const Id h = t.gelu(t.layer_norm(t.param(x), t.param(g), t.param(b)));
    return t.value(t.softmax(h, 1)).values;
  };
  CHECK(run() == run());
}

TEST_CASE("debug finite checks reject non-finite primitive outputs") {
  ParamStore<double> store;
  Tape<double> tape(store);
  const Id big = tape.constant(Tensor<double>::scalar(1e308));
  CHECK_THROWS_AS(tape.mul(big, big), std::runtime_error);
}
