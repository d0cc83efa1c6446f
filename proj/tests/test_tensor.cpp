#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "moleclue/rng.hpp"
#include "moleclue/tensor.hpp"

using namespace moleclue;
using namespace moleclue::ad;

namespace {

Tensor random_tensor(Shape shape, RandomStream& rng, bool requires_grad = true,
                     double lo = -2.0, double hi = 2.0) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

double fd_max_err(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& point, double step = 1e-5) {
  auto report = finite_difference_check(f, point, step);
  CHECK_FALSE(report.non_finite);
  return report.max_rel_error;
}

}  // namespace

TEST_CASE("forward values of named primitives") {
  CHECK(shifted_softplus(Tensor::scalar(0.0)).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(mean(Tensor::from_data({3}, {1, 2, 3})).item() == doctest::Approx(2.0));

  // layer norm of a constant row: zero variance guarded by epsilon
  Tensor ln = layer_norm(Tensor::from_data({4}, {5, 5, 5, 5}));
  for (double v : ln.values()) CHECK(v == doctest::Approx(0.0));

  CHECK(softplus(Tensor::scalar(0.0)).item() ==
        doctest::Approx(std::log(2.0)));
  CHECK(l2_norm(Tensor::from_data({2}, {3, 4})).item() ==
        doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("shape mismatches are rejected with op name and shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       "matmul: shape mismatch [2,3] vs [4,2]",
                       std::invalid_argument);
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})),
                  std::invalid_argument);
  CHECK_THROWS_AS(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 2})}, 0),
                  std::invalid_argument);
}

TEST_CASE("basic reverse-mode derivatives") {
  SUBCASE("d/da (a*a) at a=3 is 6") {
    Tensor a = Tensor::scalar(3.0, true);
    mul(a, a).backward();
    CHECK(a.grad()[0] == doctest::Approx(6.0));
  }
  SUBCASE("d/da sum(a) is all ones") {
    Tensor a = Tensor::zeros({2, 3}, true);
    sum(a).backward();
    for (double g : a.grad()) CHECK(g == doctest::Approx(1.0));
  }
  SUBCASE("root must be scalar") {
    Tensor a = Tensor::zeros({2}, true);
    CHECK_THROWS_AS(add(a, a).backward(), std::invalid_argument);
  }
  SUBCASE("constant root leaves gradients zero") {
    Tensor a = Tensor::scalar(1.0, false);
    Tensor leaf = Tensor::scalar(2.0, true);
    leaf.zero_grad();
    mul(a, a).backward();  // nothing recorded
    for (double g : leaf.grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("matmul-then-mean gradient matches central differences") {
  RandomStream rng(17);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({3, 2}, rng, false);
  double err = fd_max_err(
      [&](const Tensor& x) { return mean(matmul(x, b)); }, a.detach());
  CHECK(err < 1e-6);

  Tensor a2 = random_tensor({4, 3}, rng, false);
  double err_b = fd_max_err(
      [&](const Tensor& x) { return mean(matmul(a2, x)); },
      random_tensor({3, 2}, rng).detach());
  CHECK(err_b < 1e-6);
}

TEST_CASE("finite difference oracle behaves at known points") {
  SUBCASE("f(a)=a^2 at a=1") {
    double err = fd_max_err(
        [](const Tensor& x) { return sum(mul(x, x)); }, Tensor::scalar(1.0));
    CHECK(err < 1e-8);
  }
  SUBCASE("L2 norm at the origin: epsilon makes gradient zero both ways") {
    Tensor origin = Tensor::zeros({3});
    Tensor probe = Tensor::zeros({3}, true);
    l2_norm(probe).backward();
    for (double g : probe.grad()) CHECK(g == doctest::Approx(0.0));
    double err = fd_max_err([](const Tensor& x) { return l2_norm(x); }, origin);
    CHECK(err < 1e-6);
  }
  SUBCASE("non-finite values are reported") {
    auto report = finite_difference_check(
        [](const Tensor& x) { return log(x); }, Tensor::scalar(0.0), 1e-5);
    CHECK(report.non_finite);
  }
}

// Every primitive against the central-difference oracle, randomized shapes.
TEST_CASE("primitive gradients match finite differences on random inputs") {
  int cases = 0;
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    RandomStream rng(seed);
    std::size_t rows = 2 + seed % 3;
    std::size_t cols = 2 + (seed + 1) % 3;
    Shape mat{rows, cols};

    auto check = [&](const char* tag,
                     const std::function<Tensor(const Tensor&)>& f,
                     Tensor point, double tol = 1e-4) {
      INFO(tag << " seed " << seed);
      CHECK(fd_max_err(f, point) < tol);
      ++cases;
    };

    Tensor other = random_tensor(mat, rng, false);
    check("add", [&](const Tensor& x) { return sum(add(x, other)); },
          random_tensor(mat, rng));
    check("sub", [&](const Tensor& x) { return sum(sub(other, x)); },
          random_tensor(mat, rng));
    check("mul", [&](const Tensor& x) { return sum(mul(x, other)); },
          random_tensor(mat, rng));
    check("div", [&](const Tensor& x) { return sum(divide(other, x)); },
          random_tensor(mat, rng, true, 0.5, 2.0));
    check("neg", [&](const Tensor& x) { return sum(neg(x)); },
          random_tensor(mat, rng));
    check("exp", [&](const Tensor& x) { return sum(exp(x)); },
          random_tensor(mat, rng, true, -1.0, 1.0));
    check("log", [&](const Tensor& x) { return sum(log(x)); },
          random_tensor(mat, rng, true, 0.5, 3.0));
    check("sqrt", [&](const Tensor& x) { return sum(sqrt(x)); },
          random_tensor(mat, rng, true, 0.5, 3.0));
    check("softplus", [&](const Tensor& x) { return sum(softplus(x)); },
          random_tensor(mat, rng));
    check("ssp", [&](const Tensor& x) { return sum(shifted_softplus(x)); },
          random_tensor(mat, rng));
    check("layer_norm", [&](const Tensor& x) {
            return sum(mul(layer_norm(x), other));
          },
          random_tensor(mat, rng));
    check("l2_norm", [&](const Tensor& x) { return l2_norm(x); },
          random_tensor(mat, rng, true, 0.5, 2.0));
    check("sum_axis0", [&](const Tensor& x) {
            return l2_norm(sum_axis(x, 0));
          },
          random_tensor(mat, rng));
    check("mean_axis1", [&](const Tensor& x) {
            return l2_norm(mean_axis(x, 1));
          },
          random_tensor(mat, rng));
    check("transpose", [&](const Tensor& x) {
            return sum(mul(transpose(x), transpose(other)));
          },
          random_tensor(mat, rng));
    check("reshape", [&](const Tensor& x) {
            return l2_norm(reshape(x, {cols, rows}));
          },
          random_tensor(mat, rng));
    check("slice", [&](const Tensor& x) {
            return sum(slice(x, 1, 1, cols - 1));
          },
          random_tensor(mat, rng));
    check("concat", [&](const Tensor& x) {
            return l2_norm(concat({x, other}, 0));
          },
          random_tensor(mat, rng));
    check("clamp", [&](const Tensor& x) { return sum(clamp(x, -1.5, 1.5)); },
          random_tensor(mat, rng, true, -1.0, 1.0));
    Tensor rhs = random_tensor({cols, 2}, rng, false);
    check("matmul", [&](const Tensor& x) { return mean(matmul(x, rhs)); },
          random_tensor(mat, rng));

    std::vector<std::size_t> gidx;
    for (std::size_t e = 0; e < 2 * rows; ++e) gidx.push_back(e % rows);
    check("gather_rows", [&](const Tensor& x) {
            return l2_norm(gather_rows(x, gidx));
          },
          random_tensor(mat, rng));
    Tensor src = random_tensor({2 * rows, cols}, rng);
    check("scatter_add_rows", [&](const Tensor& x) {
            return l2_norm(scatter_add_rows(x, gidx, rows));
          },
          src);
    Tensor row_gate = random_tensor({1, cols}, rng, false);
    check("broadcast_mul", [&](const Tensor& x) {
            return sum(mul(x, row_gate));
          },
          random_tensor(mat, rng));
    Tensor col_bias = random_tensor({rows, 1}, rng, false);
    check("broadcast_add_col", [&](const Tensor& x) {
            return sum(mul(add(col_bias, x), other));
          },
          random_tensor(mat, rng));
  }
  CHECK(cases >= 100);
}

TEST_CASE("tape replay is deterministic bit for bit") {
  auto run = [](std::uint64_t seed) {
    RandomStream rng(seed);
    Tensor a = random_tensor({5, 4}, rng);
    Tensor b = random_tensor({4, 3}, rng);
    Tensor c = mean(shifted_softplus(matmul(a, b)));
    c.backward();
    std::vector<double> out(c.values().begin(), c.values().end());
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    out.insert(out.end(), b.grad().begin(), b.grad().end());
    return out;
  };
  CHECK(run(99) == run(99));
}

TEST_CASE("gradient of a sum of scalars is the sum of gradients") {
  RandomStream rng(7);
  Tensor x = random_tensor({6}, rng);

  auto grad_of = [&](const std::function<Tensor(const Tensor&)>& f) {
    Tensor p = Tensor::from_data(x.shape(),
                                 {x.values().begin(), x.values().end()}, true);
    f(p).backward();
    return std::vector<double>(p.grad().begin(), p.grad().end());
  };

  auto f1 = [](const Tensor& t) { return sum(mul(t, t)); };
  auto f2 = [](const Tensor& t) { return l2_norm(t); };
  auto g1 = grad_of(f1);
  auto g2 = grad_of(f2);
  auto gsum = grad_of([&](const Tensor& t) { return add(f1(t), f2(t)); });
  for (std::size_t i = 0; i < gsum.size(); ++i)
    CHECK(gsum[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
}

TEST_CASE("repeated backward does not accumulate stale gradients") {
  Tensor a = Tensor::scalar(2.0, true);
  Tensor y1 = mul(a, a);
  y1.backward();
  CHECK(a.grad()[0] == doctest::Approx(4.0));
  Tensor y2 = mul(a, a);
  y2.backward();
  CHECK(a.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("zero-size tensors flow through gather, scatter and matmul") {
  Tensor empty = Tensor::zeros({0, 3}, true);
  Tensor w = Tensor::zeros({3, 2});
  Tensor out = matmul(empty, w);
  CHECK(out.shape() == Shape{0, 2});
  Tensor sc = scatter_add_rows(out, {}, 4);
  CHECK(sc.shape() == Shape{4, 2});
  CHECK(sum(sc).item() == 0.0);
  Tensor g = gather_rows(Tensor::zeros({5, 2}), {});
  CHECK(g.shape() == Shape{0, 2});
}
