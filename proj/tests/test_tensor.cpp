#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "magnet/gradcheck.hpp"
#include "magnet/ops.hpp"
#include "magnet/optim.hpp"
#include "magnet/rng.hpp"
#include "magnet/tensor.hpp"

using namespace magnet;

namespace {

Tensor randn(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.values()) v = rng.normal() * scale;
  return t;
}

}  // namespace

TEST_CASE("elementwise mul matches hand values") {
  Tensor a = Tensor::from_values({2}, {1, 2});
  Tensor b = Tensor::from_values({2}, {3, 4});
  Tensor c = ops::mul(a, b);
  CHECK(c[0] == doctest::Approx(3));
  CHECK(c[1] == doctest::Approx(8));

  Tensor one = Tensor::from_values({2}, {1, 1});
  Tensor d = ops::mul(a, one);
  CHECK(d[0] == a[0]);
  CHECK(d[1] == a[1]);
}

TEST_CASE("elementwise mul gradient distributes the other operand") {
  Tensor a = Tensor::from_values({1}, {2}, true);
  Tensor b = Tensor::from_values({1}, {5});
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor c = ops::sum_all(ops::mul(a, b));
    tape.backward(c);
  }
  CHECK(a.grad()[0] == doctest::Approx(5));

  // finite-difference oracle for the same case
  auto rep = grad_check([&](const Tensor& x) { return ops::sum_all(ops::mul(x, b)); },
                        Tensor::from_values({1}, {2}));
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("broadcasting follows trailing-dim rules and rejects the rest") {
  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor row = Tensor::from_values({1, 2}, {10, 20});
  Tensor s = ops::add(a, row);
  CHECK(s.at({1, 1}) == doctest::Approx(24));

  Tensor bad = Tensor::from_values({3}, {1, 2, 3});
  CHECK_THROWS_WITH_AS(ops::add(a, bad),
                       doctest::Contains("[2,2]"), Error);

  // a broadcast grad reduces over the expanded dims
  Tensor r = Tensor::from_values({1, 2}, {1.0, 2.0}, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(ops::sum_all(ops::mul(a, r)));
  }
  CHECK(r.grad()[0] == doctest::Approx(1 + 3));
  CHECK(r.grad()[1] == doctest::Approx(2 + 4));
}

TEST_CASE("matmul identity and hand product") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::from_values({2, 2}, {5, 6, 7, 8});
  Tensor y = ops::matmul(eye, x);
  for (int64_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(x[i]));

  Tensor a = Tensor::from_values({1, 2}, {1, 2});
  Tensor b = Tensor::from_values({2, 1}, {3, 4});
  CHECK(ops::matmul(a, b).item() == doctest::Approx(11));

  CHECK_THROWS_WITH_AS(ops::matmul(a, a), doctest::Contains("inner-dimension"), Error);
}

TEST_CASE("matmul gradient vs central differences") {
  Rng rng(7);
  Tensor a = randn({3, 4}, rng);
  Tensor b = randn({4, 2}, rng);
  Tensor w = randn({3, 2}, rng);  // fixed projection to a scalar

  auto fa = [&](const Tensor& t) { return ops::sum_all(ops::mul(ops::matmul(t, b), w)); };
  CHECK(grad_check(fa, a, 1e-5).max_rel_err < 1e-6);
  auto fb = [&](const Tensor& t) { return ops::sum_all(ops::mul(ops::matmul(a, t), w)); };
  CHECK(grad_check(fb, b, 1e-5).max_rel_err < 1e-6);
}

TEST_CASE("batched matmul broadcasts leading dims") {
  Rng rng(9);
  Tensor a = randn({2, 3, 2, 4}, rng);
  Tensor b = randn({4, 5}, rng);  // broadcast over both batch dims
  Tensor y = ops::matmul(a, ops::reshape(b, {1, 1, 4, 5}));
  CHECK(y.shape() == Shape{2, 3, 2, 5});
  // spot-check one batch entry against a fresh 2-d matmul
  Tensor a01 = ops::narrow(ops::narrow(a, 0, 0, 1), 1, 1, 1);
  Tensor y01 = ops::matmul(ops::reshape(a01, {2, 4}), b);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 5; ++j)
      CHECK(y.at({0, 1, i, j}) == doctest::Approx(y01.at({i, j})));
}

TEST_CASE("activations hit the pinned values") {
  Tensor z = Tensor::from_values({1}, {0.0});
  CHECK(ops::sigmoid(z).item() == doctest::Approx(0.5));
  CHECK(ops::relu(Tensor::from_values({1}, {-3.0})).item() == doctest::Approx(0.0));
  CHECK(ops::silu(Tensor::from_values({1}, {1.0})).item() ==
        doctest::Approx(0.7310585786300049).epsilon(1e-9));
  CHECK(ops::leaky_relu(Tensor::from_values({1}, {-2.0})).item() == doctest::Approx(-0.4));
  CHECK(ops::elu(Tensor::from_values({1}, {-1.0})).item() ==
        doctest::Approx(std::exp(-1.0) - 1.0));
}

TEST_CASE("every activation passes a gradient check") {
  Rng rng(13);
  Tensor x = randn({7}, rng);
  Tensor w = randn({7}, rng);
  auto check = [&](auto op) {
    auto f = [&](const Tensor& t) { return ops::sum_all(ops::mul(op(t), w)); };
    return grad_check(f, x, 1e-5).max_rel_err;
  };
  CHECK(check([](const Tensor& t) { return ops::relu(t); }) < 1e-4);
  CHECK(check([](const Tensor& t) { return ops::gelu(t); }) < 1e-4);
  CHECK(check([](const Tensor& t) { return ops::sigmoid(t); }) < 1e-4);
  CHECK(check([](const Tensor& t) { return ops::silu(t); }) < 1e-4);
  CHECK(check([](const Tensor& t) { return ops::tanh_(t); }) < 1e-4);
  CHECK(check([](const Tensor& t) { return ops::leaky_relu(t); }) < 1e-4);
  CHECK(check([](const Tensor& t) { return ops::elu(t); }) < 1e-4);
}

TEST_CASE("softmax uniform, overflow safety, and two-logit value") {
  Tensor u = ops::softmax(Tensor::from_values({3}, {0, 0, 0}), 0);
  for (int64_t i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3));

  Tensor big = ops::softmax(Tensor::from_values({2}, {1000, 1000}), 0);
  CHECK(big[0] == doctest::Approx(0.5));
  CHECK(std::isfinite(big[0]));

  Tensor two = ops::softmax(Tensor::from_values({2}, {2, 1}), 0);
  CHECK(two[0] == doctest::Approx(0.731058578).epsilon(1e-5));
  CHECK(two[1] == doctest::Approx(0.268941421).epsilon(1e-5));
}

TEST_CASE("softmax rows sum to one for large-magnitude inputs") {
  Rng rng(21);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = randn({4, 6}, rng, 1e3);
    Tensor y = ops::softmax(x, 1);
    for (int64_t r = 0; r < 4; ++r) {
      double s = 0;
      for (int64_t c = 0; c < 6; ++c) s += y.at({r, c});
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("backward seeds sum and square correctly") {
  Tensor x = Tensor::from_values({3}, {1, 2, 3}, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(ops::sum_all(x));
  }
  for (int64_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(1));

  Tensor z = Tensor::from_values({1}, {3}, true);
  Tape t2;
  {
    Tape::Scope scope(t2);
    t2.backward(ops::sum_all(ops::mul(z, z)));
  }
  CHECK(z.grad()[0] == doctest::Approx(6));
}

TEST_CASE("backward rejects non-scalar loss and is bit-deterministic") {
  Tensor x = Tensor::from_values({2}, {1, 2}, true);
  Tape tape;
  Tape::Scope scope(tape);
  Tensor y = ops::mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), Error);

  Tensor loss = ops::sum_all(ops::sigmoid(y));
  tape.backward(loss);
  auto g1 = x.grad();
  x.zero_grad();
  tape.backward(loss);  // replay the identical tape
  for (size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == g1[i]);
}

TEST_CASE("unreachable parameters get zero grads") {
  Tensor used = Tensor::from_values({2}, {1, 2}, true);
  Tensor unused = Tensor::from_values({2}, {3, 4}, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor y = ops::mul(used, unused);       // both on the tape
    Tensor loss = ops::sum_all(used);        // loss ignores the product
    tape.backward(loss);
  }
  CHECK(unused.grad()[0] == 0.0);
  CHECK(unused.grad()[1] == 0.0);
  CHECK(used.grad()[0] == doctest::Approx(1));
}

TEST_CASE("grad_check on composite functions") {
  Rng rng(3);
  Tensor x = randn({5}, rng);
  auto rep = grad_check([](const Tensor& t) { return ops::sum_all(ops::sigmoid(t)); }, x);
  CHECK(rep.max_rel_err < 1e-6);

  // weighted CE of a linear layer
  Tensor w = randn({5, 3}, rng, 0.5);
  std::vector<int64_t> labels = {2};
  std::vector<double> cw = {1.0, 2.0, 0.5};
  auto f = [&](const Tensor& t) {
    Tensor logits = ops::matmul(ops::reshape(t, {1, 5}), w);
    return ops::weighted_cross_entropy(logits, labels, cw);
  };
  CHECK(grad_check(f, x).max_rel_err < 1e-5);

  // dead relu region: all inputs negative, analytic grad 0 matches FD
  Tensor neg = Tensor::from_values({4}, {-1, -2, -0.5, -3});
  auto frelu = [](const Tensor& t) { return ops::sum_all(ops::relu(t)); };
  auto dead = grad_check(frelu, neg);
  CHECK(dead.max_rel_err < 1e-10);
}

TEST_CASE("adamw single-step arithmetic") {
  Tensor p = Tensor::from_values({1}, {1.0}, true);
  p.grad()[0] = 1.0;
  AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.0});
  opt.step();
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adamw zero grad is identity; decay is decoupled") {
  Tensor p = Tensor::from_values({1}, {1.0}, true);
  p.grad();  // zeros
  AdamW no_decay({p}, {.lr = 0.1, .weight_decay = 0.0});
  no_decay.step();
  CHECK(p[0] == 1.0);

  Tensor q = Tensor::from_values({1}, {1.0}, true);
  q.grad();
  AdamW decay({q}, {.lr = 0.1, .weight_decay = 0.1});
  decay.step();
  CHECK(q[0] == doctest::Approx(0.99).epsilon(1e-12));
}

TEST_CASE("global norm clipping scales and is idempotent") {
  Tensor p = Tensor::from_values({2}, {0, 0}, true);
  p.grad() = {3.0, 4.0};
  std::vector<Tensor> ps = {p};
  double norm = clip_global_norm(ps, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(p.grad()[0] == doctest::Approx(0.6));
  CHECK(p.grad()[1] == doctest::Approx(0.8));
  clip_global_norm(ps, 1.0);  // second application is a no-op
  CHECK(p.grad()[0] == doctest::Approx(0.6));

  Tensor small = Tensor::from_values({1}, {0}, true);
  small.grad() = {0.1};
  std::vector<Tensor> ss = {small};
  clip_global_norm(ss, 1.0);
  CHECK(small.grad()[0] == doctest::Approx(0.1));

  Tensor zero = Tensor::from_values({2}, {0, 0}, true);
  zero.grad();
  std::vector<Tensor> zs = {zero};
  clip_global_norm(zs, 1.0);
  CHECK(zero.grad()[0] == 0.0);
}

TEST_CASE("weighted cross entropy values and weight-scale invariance") {
  Tensor uniform = Tensor::zeros({2, 7});
  std::vector<int64_t> labels = {3, 5};
  std::vector<double> unit(7, 1.0);
  CHECK(ops::weighted_cross_entropy(uniform, labels, unit).item() ==
        doctest::Approx(std::log(7.0)).epsilon(1e-9));

  Tensor confident = Tensor::zeros({1, 7});
  confident[2] = 100.0;
  CHECK(ops::weighted_cross_entropy(confident, {2}, unit).item() ==
        doctest::Approx(0.0).epsilon(1e-9));

  Rng rng(17);
  Tensor logits = randn({4, 7}, rng);
  std::vector<int64_t> ys = {0, 2, 6, 2};
  std::vector<double> w1 = {1, 2, 3, 0.5, 1.5, 2.5, 0.25};
  std::vector<double> w2 = w1;
  for (double& v : w2) v *= 2.0;
  const double a = ops::weighted_cross_entropy(logits, ys, w1).item();
  const double b = ops::weighted_cross_entropy(logits, ys, w2).item();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(ops::weighted_cross_entropy(uniform, {3, 9}, unit),
                       doctest::Contains("out of range"), Error);
}

TEST_CASE("reductions, reshape, permute, narrow, concat gradients") {
  Rng rng(31);
  Tensor x = randn({2, 3, 4}, rng);
  Tensor w2 = randn({2, 4}, rng);
  auto fsum = [&](const Tensor& t) { return ops::sum_all(ops::mul(ops::sum(t, 1), w2)); };
  CHECK(grad_check(fsum, x).max_rel_err < 1e-6);
  auto fmean = [&](const Tensor& t) { return ops::sum_all(ops::mul(ops::mean(t, 1), w2)); };
  CHECK(grad_check(fmean, x).max_rel_err < 1e-6);
  auto fmax = [&](const Tensor& t) { return ops::sum_all(ops::mul(ops::max_reduce(t, 1), w2)); };
  CHECK(grad_check(fmax, x).max_rel_err < 1e-4);

  Tensor wp = randn({4, 3, 2}, rng);
  auto fperm = [&](const Tensor& t) {
    return ops::sum_all(ops::mul(ops::permute(t, {2, 1, 0}), wp));
  };
  CHECK(grad_check(fperm, x).max_rel_err < 1e-6);

  auto fnarrow = [&](const Tensor& t) { return ops::sum_all(ops::narrow(t, 2, 1, 2)); };
  CHECK(grad_check(fnarrow, x).max_rel_err < 1e-6);

  auto fcat = [&](const Tensor& t) {
    Tensor other = Tensor::full({2, 3, 4}, 0.5);
    return ops::sum_all(ops::sigmoid(ops::concat({t, other}, 1)));
  };
  CHECK(grad_check(fcat, x).max_rel_err < 1e-5);
}

TEST_CASE("gather and scatter rows invert each other") {
  Rng rng(5);
  Tensor x = randn({5, 3}, rng);
  std::vector<int64_t> rows = {4, 0, 2};
  Tensor g = ops::gather_rows(x, rows);
  CHECK(g.at({0, 0}) == x.at({4, 0}));
  Tensor back = ops::scatter_rows(g, rows, 5);
  CHECK(back.at({4, 1}) == x.at({4, 1}));
  CHECK(back.at({1, 1}) == 0.0);

  auto f = [&](const Tensor& t) {
    return ops::sum_all(ops::sigmoid(ops::scatter_rows(ops::gather_rows(t, rows), rows, 5)));
  };
  CHECK(grad_check(f, x).max_rel_err < 1e-5);
}

TEST_CASE("rng streams are deterministic and forkable") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = a.fork(7), d = a.fork(7);
  CHECK(c.next_u64() == d.next_u64());
  CHECK(a.fork(7).next_u64() != a.fork(8).next_u64());
}
