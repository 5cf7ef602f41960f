#include "p2det/tensor.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "p2det/rng.hpp"

using namespace p2det;

namespace {

Tensor random_tensor(std::vector<int> shape, SplitMix64& rng, bool grad = false) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data) v = rng.uniform(-1.0, 1.0);
  return Tensor::from_data(std::move(shape), std::move(data), grad);
}

// Independent oracle: textbook triple loop, no shared code with Graph::matmul.
std::vector<double> naive_matmul(std::span<const double> a, std::span<const double> b,
                                 int m, int k, int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int l = 0; l < k; ++l)
        acc += a[static_cast<size_t>(i) * k + l] * b[static_cast<size_t>(l) * n + j];
      c[static_cast<size_t>(i) * n + j] = acc;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul identity passthrough") {
  Graph g;
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor c = g.matmul(eye, b);
  for (int i = 0; i < 4; ++i) CHECK(c.at(i) == b.at(i));
}

TEST_CASE("matmul gradient of identity lhs is row sums of B") {
  Graph g;
  Tensor a = Tensor::from_data({2, 2}, {1, 0, 0, 1}, true);
  Tensor b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor c = g.matmul(a, b);
  g.backward(g.sum(c));  // seeds dC = ones
  // dA = dC * B^T, so dA[i][l] = sum of row l of B.
  CHECK(a.grad()[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(a.grad()[1] == doctest::Approx(7.0).epsilon(1e-12));
  CHECK(a.grad()[2] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(a.grad()[3] == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("matmul matches the naive triple-loop oracle exactly") {
  SplitMix64 rng(91);
  Graph g;
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor c = g.matmul(a, b);
  const auto want = naive_matmul(a.data(), b.data(), 3, 4, 2);
  for (int i = 0; i < 6; ++i) CHECK(c.at(i) == want[static_cast<size_t>(i)]);
}

TEST_CASE("softmax of equal logits is uniform") {
  Graph g;
  Tensor y = g.softmax(Tensor::from_data({2}, {0.0, 0.0}));
  CHECK(y.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.at(1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("softmax is shift invariant") {
  Graph g;
  for (double c : {-100.0, -3.0, 0.7, 55.0}) {
    Tensor base = g.softmax(Tensor::from_data({2}, {0.0, 1.3}));
    Tensor shifted = g.softmax(Tensor::from_data({2}, {c, c + 1.3}));
    CHECK(shifted.at(0) == doctest::Approx(base.at(0)).epsilon(1e-14));
    CHECK(shifted.at(1) == doctest::Approx(base.at(1)).epsilon(1e-14));
  }
}

TEST_CASE("softmax frozen reference values") {
  // exp(k)/sum at 50 digits, rounded to double.
  Graph g;
  Tensor y = g.softmax(Tensor::from_data({3}, {1.0, 2.0, 3.0}));
  CHECK(y.at(0) == doctest::Approx(0.090030573170380457).epsilon(1e-14));
  CHECK(y.at(1) == doctest::Approx(0.244728471054797652).epsilon(1e-14));
  CHECK(y.at(2) == doctest::Approx(0.665240955774821889).epsilon(1e-14));
}

TEST_CASE("conv2d of a constant image with an averaging kernel is constant") {
  Graph g;
  Tensor x = Tensor::full({1, 5, 5}, 2.0);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
  Tensor b = Tensor::zeros({1});
  Tensor y = g.conv2d(x, w, b, 1, 0);
  REQUIRE(y.shape() == std::vector<int>{1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(y.at(i) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("layernorm output is standardized per row") {
  SplitMix64 rng(4);
  Graph g;
  Tensor x = random_tensor({3, 8}, rng);
  Tensor y = g.layernorm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-12);
  for (int r = 0; r < 3; ++r) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 8; ++j) mean += y.at(r * 8 + j);
    mean /= 8.0;
    for (int j = 0; j < 8; ++j) {
      const double d = y.at(r * 8 + j) - mean;
      var += d * d;
    }
    var /= 8.0;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("relu basics") {
  Graph g;
  Tensor y = g.relu(Tensor::from_data({2}, {-1.0, 2.0}));
  CHECK(y.at(0) == 0.0);
  CHECK(y.at(1) == 2.0);
}

TEST_CASE("bilinear upsample of a constant stays constant") {
  Graph g;
  Tensor y = g.bilinear_upsample(Tensor::full({1, 4, 4}, 5.0), 16, 16);
  REQUIRE(y.size() == 256);
  for (int i = 0; i < 256; ++i) CHECK(y.at(i) == doctest::Approx(5.0).epsilon(1e-14));
}

TEST_CASE("bilinear upsample 1x2 to 1x4 frozen values") {
  Graph g;
  Tensor y = g.bilinear_upsample(Tensor::from_data({1, 1, 2}, {0.0, 1.0}), 1, 4);
  CHECK(y.at(0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(y.at(1) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(y.at(2) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(y.at(3) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("bilinear upsample to the same size is the identity") {
  SplitMix64 rng(12);
  Graph g;
  Tensor x = random_tensor({2, 3, 5}, rng);
  Tensor y = g.bilinear_upsample(x, 3, 5);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)).epsilon(1e-14));
}

TEST_CASE("gradient of x^2 at 3 is 6, analytically and numerically") {
  {
    Graph g;
    Tensor x = Tensor::from_data({1}, {3.0}, true);
    g.backward(g.mul(x, x));
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
  }
  const double err = grad_check(
      [](Graph& g, const Tensor& x) { return g.mul(x, x); },
      Tensor::from_data({1}, {3.0}, true), 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("gradient of sum(softmax(x)) vanishes") {
  Graph g;
  Tensor x = Tensor::from_data({4}, {0.3, -1.2, 2.0, 0.0}, true);
  g.backward(g.sum(g.softmax(x)));
  for (double v : x.grad()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("elementwise and shape ops pass central-difference checks") {
  SplitMix64 seeder(77);
  auto x = [&](std::vector<int> shape) {
    return random_tensor(std::move(shape), seeder, true);
  };
  CHECK(grad_check([](Graph& g, const Tensor& t) { return g.gelu(t); }, x({2, 3}), 1e-5) < 1e-4);
  CHECK(grad_check([](Graph& g, const Tensor& t) { return g.sigmoid(t); }, x({2, 3}), 1e-5) < 1e-4);
  CHECK(grad_check([](Graph& g, const Tensor& t) { return g.exp(t); }, x({2, 3}), 1e-5) < 1e-4);
  CHECK(grad_check([](Graph& g, const Tensor& t) {
          return g.layernorm(t, Tensor::full({3}, 1.0), Tensor::zeros({3}));
        }, x({2, 3}), 1e-5) < 1e-4);
  CHECK(grad_check([](Graph& g, const Tensor& t) {
          return g.bilinear_upsample(t, 5, 7);
        }, x({2, 3, 3}), 1e-5) < 1e-4);
}

TEST_CASE("division by near-zero denominators stays finite") {
  Graph g;
  Tensor num = Tensor::from_data({2}, {1.0, -1.0});
  Tensor den = Tensor::from_data({2}, {0.0, 1e-40});
  Tensor y = g.div(num, den);
  CHECK(std::isfinite(y.at(0)));
  CHECK(std::isfinite(y.at(1)));
}
