#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "reformer/ops.hpp"

using namespace reformer;
using oracle::check_gradients;
using oracle::random_param;
using oracle::random_tensor;

namespace {

std::vector<double> to_vec(const Tensor64& t) { return {t.data().begin(), t.data().end()}; }

// Index of each output element of a permutation, computed from coordinates.
std::vector<double> permute_loops(const Tensor64& x, const std::vector<std::size_t>& axes) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * s[i + 1];
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = s[axes[i]];
  std::vector<double> out;
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t n = 0; n < x.numel(); ++n) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_stride[axes[i]];
    out.push_back(x.data()[src]);
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("matmul matches loops, including batch broadcast and the BLAS path") {
  Rng rng(1);
  for (auto [m, k, n] : {std::tuple{3, 4, 5}, std::tuple{40, 30, 50}}) {
    const std::size_t M = m, K = k, N = n;
    auto a = random_tensor({2, M, K}, rng);
    auto b = random_tensor({K, N}, rng);
    auto c = ops::matmul(a, b);
    REQUIRE(c.shape() == Shape{2, M, N});
    for (std::size_t i = 0; i < 2; ++i) {
      std::vector<double> ai(a.data().begin() + i * M * K, a.data().begin() + (i + 1) * M * K);
      auto ref = oracle::matmul_loops(ai, to_vec(b), M, K, N);
      std::vector<double> got(c.data().begin() + i * M * N, c.data().begin() + (i + 1) * M * N);
      CHECK(oracle::max_abs_diff(got, ref) < 1e-12);
    }
    // Per-batch right operand broadcast over a leading axis of the left.
    auto bb = random_tensor({3, 1, K, N}, rng);
    auto aa = random_tensor({1, 2, M, K}, rng);
    auto cc = ops::matmul(aa, bb);
    REQUIRE(cc.shape() == Shape{3, 2, M, N});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        std::vector<double> ai(aa.data().begin() + j * M * K, aa.data().begin() + (j + 1) * M * K);
        std::vector<double> bi(bb.data().begin() + i * K * N, bb.data().begin() + (i + 1) * K * N);
        auto ref = oracle::matmul_loops(ai, bi, M, K, N);
        std::vector<double> got(cc.data().begin() + (i * 2 + j) * M * N,
                                cc.data().begin() + (i * 2 + j + 1) * M * N);
        CHECK(oracle::max_abs_diff(got, ref) < 1e-12);
      }
  }
}

TEST_CASE("matmul_transposed equals matmul with an explicit transpose") {
  Rng rng(2);
  for (std::size_t n : {3u, 70u}) {
    auto a = random_tensor({2, 5, 40}, rng);
    auto b = random_tensor({2, n, 40}, rng);
    auto bt = ops::permute(b, {0, 2, 1});
    CHECK(oracle::max_abs_diff(ops::matmul_transposed(a, b), ops::matmul(a, bt)) < 1e-12);
  }
}

TEST_CASE("matmul rejects incompatible shapes") {
  Rng rng(3);
  CHECK_THROWS_AS(ops::matmul(random_tensor({2, 3}, rng), random_tensor({4, 5}, rng)), ShapeError);
  CHECK_THROWS_AS(ops::matmul(random_tensor({2, 2, 3}, rng), random_tensor({3, 3, 5}, rng)), ShapeError);
  CHECK_THROWS_AS(ops::matmul(random_tensor({3}, rng), random_tensor({3, 5}, rng)), ShapeError);
}

TEST_CASE("elementwise ops broadcast a suffix-shaped right operand only") {
  Rng rng(4);
  auto a = random_tensor({2, 3, 4}, rng);
  auto bias = random_tensor({4}, rng);
  auto s = ops::add(a, bias);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(s.data()[i] == a.data()[i] + bias.data()[i % 4]);
  auto p = ops::mul(a, random_tensor({3, 4}, rng));
  CHECK(p.shape() == a.shape());
  CHECK_THROWS_AS(ops::add(a, random_tensor({3}, rng)), ShapeError);
  CHECK_THROWS_AS(ops::add(bias, a), ShapeError);
}

TEST_CASE("permute and expand match coordinate loops") {
  Rng rng(5);
  auto x = random_tensor({2, 3, 4, 5}, rng);
  for (std::vector<std::size_t> axes : {std::vector<std::size_t>{0, 2, 1, 3}, {3, 2, 1, 0}, {1, 0, 2, 3},
                                        {0, 1, 3, 2}, {0, 1, 2, 3}}) {
    auto y = ops::permute(x, axes);
    CHECK(oracle::max_abs_diff(to_vec(y), permute_loops(x, axes)) == 0.0);
  }
  auto col = random_tensor({2, 1, 4}, rng);
  auto e = ops::expand(col, {2, 3, 4});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) CHECK(e.data()[(i * 3 + j) * 4 + k] == col.data()[i * 4 + k]);
  auto lead = random_tensor({1, 3, 1}, rng);
  auto f = ops::expand(lead, {2, 3, 4});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) CHECK(f.data()[(i * 3 + j) * 4 + k] == lead.data()[j]);
  CHECK_THROWS_AS(ops::expand(col, {2, 3, 5}), ShapeError);
  CHECK_THROWS_AS(ops::permute(x, {0, 0, 1, 2}), ShapeError);
}

TEST_CASE("layer norm matches a scalar-loop oracle") {
  Rng rng(6);
  auto x = random_tensor({5, 7}, rng, 3.0);
  auto g = random_tensor({7}, rng);
  auto b = random_tensor({7}, rng);
  auto y = ops::layer_norm(x, g, b);
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 7; ++c) mean += x.data()[r * 7 + c] / 7;
    for (std::size_t c = 0; c < 7; ++c) var += std::pow(x.data()[r * 7 + c] - mean, 2) / 7;
    for (std::size_t c = 0; c < 7; ++c) {
      const double ref = (x.data()[r * 7 + c] - mean) / std::sqrt(var + ops::kLayerNormEps) * g.data()[c] + b.data()[c];
      CHECK(std::abs(y.data()[r * 7 + c] - ref) < 1e-6);
    }
  }
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  Tensor64 x({2, 3}, {1000, 1001, 1002, -5, 0, 5});
  auto y = ops::softmax(x, -1);
  for (std::size_t r = 0; r < 2; ++r) CHECK(y.data()[r * 3] + y.data()[r * 3 + 1] + y.data()[r * 3 + 2] == doctest::Approx(1.0));
  auto z = ops::softmax(x, 0);
  for (std::size_t c = 0; c < 3; ++c) CHECK(z.data()[c] + z.data()[3 + c] == doctest::Approx(1.0));
}

TEST_CASE("cross entropy: uniform logits give ln V; random case matches loops") {
  std::vector<int> gold = {4, 7, 0, 31};
  auto uniform = ops::cross_entropy(Tensor64::zeros({4, 32}), std::span<const int>(gold));
  CHECK(std::abs(uniform.item() - std::log(32.0)) < 1e-12);

  Rng rng(7);
  auto logits = random_tensor({6, 9}, rng, 2.0);
  std::vector<int> g = {1, 8, 3, 3, 0, 5};
  std::vector<std::uint8_t> counted = {1, 1, 0, 1, 1, 0};
  double ref = 0;
  int n = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    if (!counted[r]) continue;
    double mx = -INFINITY, z = 0;
    for (std::size_t v = 0; v < 9; ++v) mx = std::max(mx, logits.data()[r * 9 + v]);
    for (std::size_t v = 0; v < 9; ++v) z += std::exp(logits.data()[r * 9 + v] - mx);
    ref += -(logits.data()[r * 9 + static_cast<std::size_t>(g[r])] - mx - std::log(z));
    ++n;
  }
  auto got = ops::cross_entropy(logits, std::span<const int>(g), std::span<const std::uint8_t>(counted));
  CHECK(std::abs(got.item() - ref / n) < 1e-10);
  auto summed = ops::cross_entropy(logits, std::span<const int>(g), std::span<const std::uint8_t>(counted), 0.0,
                                   ops::LossReduction::sum);
  CHECK(std::abs(summed.item() - ref) < 1e-10);

  std::vector<std::uint8_t> none(6, 0);
  CHECK_THROWS(ops::cross_entropy(logits, std::span<const int>(g), std::span<const std::uint8_t>(none)));
  std::vector<int> bad = {1, 8, 3, 3, 0, 9};
  CHECK_THROWS(ops::cross_entropy(logits, std::span<const int>(bad)));
}

TEST_CASE("non-finite results raise NumericError") {
  Tensor64 x({2}, {1e308, 1e308});
  CHECK_THROWS_AS(ops::add(x, x), NumericError);
}

TEST_CASE("gradients of every primitive match central differences") {
  Rng rng(8);
  auto a = random_param({2, 3, 4}, rng);
  auto b = random_param({4, 5}, rng);
  auto bt = random_param({2, 6, 4}, rng);
  auto bias = random_param({4}, rng);
  auto m = random_param({3, 4}, rng);
  auto g = random_param({4}, rng);
  auto table = random_param({6, 4}, rng);
  auto col = random_param({2, 1, 4}, rng);
  // Fixed random projection of any output to a scalar.
  auto weighted = [](const Tensor64& t) {
    Rng r(99);
    return ops::sum(ops::mul(t, random_tensor(t.shape(), r)));
  };
  const std::vector<int> ids = {0, 5, 2, 2};
  const std::vector<int> gold = {1, 0, 3, 2, 3, 1};
  const std::vector<std::uint8_t> counted = {1, 0, 1, 1, 1, 1};

  struct Case {
    const char* name;
    std::vector<Tensor64*> params;
    std::function<Tensor64()> loss;
  };
  std::vector<Case> cases = {
      {"matmul", {&a, &b}, [&] { return weighted(ops::matmul(a, b)); }},
      {"matmul_transposed", {&a, &bt}, [&] { return weighted(ops::matmul_transposed(a, bt)); }},
      {"add", {&a, &bias}, [&] { return weighted(ops::add(a, bias)); }},
      {"sub", {&a, &m}, [&] { return weighted(ops::sub(a, m)); }},
      {"mul", {&a, &m}, [&] { return weighted(ops::mul(a, m)); }},
      {"scale", {&a}, [&] { return weighted(ops::scale(a, 2.5)); }},
      {"relu", {&a}, [&] { return weighted(ops::relu(a)); }},
      {"softmax", {&a}, [&] { return weighted(ops::softmax(a, -1)); }},
      {"softmax_mid", {&a}, [&] { return weighted(ops::softmax(a, 1)); }},
      {"layer_norm", {&a, &g, &bias}, [&] { return weighted(ops::layer_norm(a, g, bias)); }},
      {"reshape", {&a}, [&] { return weighted(ops::reshape(a, {6, 4})); }},
      {"permute", {&a}, [&] { return weighted(ops::permute(a, {1, 0, 2})); }},
      {"expand", {&col}, [&] { return weighted(ops::expand(col, {2, 3, 4})); }},
      {"concat", {&a, &col},
       [&] {
         std::vector<Tensor64> parts = {a, col};
         return weighted(ops::concat(std::span<const Tensor64>(parts), 1));
       }},
      {"slice", {&a}, [&] { return weighted(ops::slice(a, 1, 1, 2)); }},
      {"embedding", {&table}, [&] { return weighted(ops::embedding(table, std::span<const int>(ids))); }},
      {"sum_axis", {&a}, [&] { return weighted(ops::sum_axis(a, 1)); }},
      {"cross_entropy", {&table},
       [&] {
         return ops::cross_entropy(table, std::span<const int>(gold), std::span<const std::uint8_t>(counted), 0.1);
       }},
  };
  for (auto& c : cases) {
    CAPTURE(c.name);
    auto res = check_gradients(c.params, c.loss);
    CHECK(res.max_rel_error < 1e-6);
    CHECK(res.checked > 0);
  }
}

TEST_CASE("no tape means no recording; nested tapes are independent") {
  Rng rng(9);
  auto p = random_param({3}, rng);
  {
    auto y = ops::scale(p, 2.0);
    CHECK(GradTape<double>::active() == nullptr);
  }
  GradTape<double> outer;
  auto y = ops::sum(ops::mul(p, p));
  {
    GradTape<double> inner;
    auto z = ops::sum(ops::scale(p, 3.0));
    auto gz = inner.grad(z, std::span<const Tensor64>(&p, 1));
    for (double v : gz[0].data()) CHECK(v == 3.0);
  }
  auto gy = outer.grad(y, std::span<const Tensor64>(&p, 1));
  for (std::size_t i = 0; i < 3; ++i) CHECK(gy[0].data()[i] == doctest::Approx(2 * p.data()[i]));
}
