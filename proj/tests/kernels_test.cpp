#include <cmath>
#include <random>
#include <vector>

#include "caft/engine/kernels.hpp"
#include "doctest.h"

using namespace caft::engine::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::fabs(a[i] - b[i]) / std::max(1.0, std::fabs(a[i])));
  }
  return worst;
}

constexpr double kTol = 1e-12;

}  // namespace

TEST_CASE("parallel matmul kernels agree with the serial reference") {
  std::mt19937_64 rng(1);
  for (const MatmulDims d : {MatmulDims{1, 1, 1}, MatmulDims{3, 5, 7}, MatmulDims{64, 64, 192}, MatmulDims{130, 17, 33}}) {
    const auto a = random_vec(d.m * d.k, rng);
    const auto b = random_vec(d.k * d.n, rng);
    const auto dc = random_vec(d.m * d.n, rng);

    std::vector<double> c1(d.m * d.n), c2(d.m * d.n);
    serial::matmul(a, b, c1, d);
    parallel::matmul(a, b, c2, d);
    CHECK(max_rel_diff(c1, c2) < kTol);

    std::vector<double> da1(d.m * d.k, 0.5), da2(d.m * d.k, 0.5);
    serial::matmul_grad_a(dc, b, da1, d);
    parallel::matmul_grad_a(dc, b, da2, d);
    CHECK(max_rel_diff(da1, da2) < kTol);

    std::vector<double> db1(d.k * d.n, -1.0), db2(d.k * d.n, -1.0);
    serial::matmul_grad_b(a, dc, db1, d);
    parallel::matmul_grad_b(a, dc, db2, d);
    CHECK(max_rel_diff(db1, db2) < kTol);
  }
}

TEST_CASE("parallel layer norm agrees with the serial reference") {
  std::mt19937_64 rng(2);
  const std::size_t rows = 97, cols = 64;
  const auto x = random_vec(rows * cols, rng, 3.0);
  const auto g = random_vec(cols, rng);
  const auto b = random_vec(cols, rng);
  const auto dy = random_vec(rows * cols, rng);
  std::vector<double> y1(rows * cols), y2(rows * cols), m1(rows), m2(rows), r1(rows), r2(rows);
  serial::layer_norm(x, g, b, y1, m1, r1, rows, cols, 1e-5);
  parallel::layer_norm(x, g, b, y2, m2, r2, rows, cols, 1e-5);
  CHECK(max_rel_diff(y1, y2) < kTol);

  std::vector<double> dx1(rows * cols), dx2(rows * cols), dg1(cols), dg2(cols), db1(cols), db2(cols);
  serial::layer_norm_grad(dy, x, g, m1, r1, dx1, dg1, db1, rows, cols);
  parallel::layer_norm_grad(dy, x, g, m2, r2, dx2, dg2, db2, rows, cols);
  CHECK(max_rel_diff(dx1, dx2) < kTol);
  CHECK(max_rel_diff(dg1, dg2) < kTol);
  CHECK(max_rel_diff(db1, db2) < kTol);
}

TEST_CASE("parallel causal attention agrees with the serial reference") {
  std::mt19937_64 rng(3);
  const AttentionDims d{3, 11, 4, 8};
  const std::size_t n = d.batch * d.seq * 3 * d.model_dim();
  const auto qkv = random_vec(n, rng);
  const auto dout = random_vec(d.batch * d.seq * d.model_dim(), rng);
  std::vector<double> o1(d.batch * d.seq * d.model_dim()), o2(o1.size());
  std::vector<double> p1(d.batch * d.heads * d.seq * d.seq), p2(p1.size());
  serial::causal_attention(qkv, o1, p1, d);
  parallel::causal_attention(qkv, o2, p2, d);
  CHECK(max_rel_diff(o1, o2) < kTol);
  CHECK(max_rel_diff(p1, p2) < kTol);

  // Probabilities above the diagonal are exactly zero.
  for (std::size_t bh = 0; bh < d.batch * d.heads; ++bh) {
    for (std::size_t t = 0; t < d.seq; ++t) {
      for (std::size_t j = t + 1; j < d.seq; ++j) CHECK(p2[(bh * d.seq + t) * d.seq + j] == 0.0);
    }
  }

  std::vector<double> g1(n), g2(n);
  serial::causal_attention_grad(dout, qkv, p1, g1, d);
  parallel::causal_attention_grad(dout, qkv, p2, g2, d);
  CHECK(max_rel_diff(g1, g2) < kTol);
}

TEST_CASE("parallel softmax and cross entropy agree with the serial reference") {
  std::mt19937_64 rng(4);
  const std::size_t rows = 50, cols = 37;
  const auto x = random_vec(rows * cols, rng, 4.0);
  std::vector<double> s1(rows * cols), s2(rows * cols);
  serial::softmax_rows(x, s1, rows, cols);
  parallel::softmax_rows(x, s2, rows, cols);
  CHECK(max_rel_diff(s1, s2) < kTol);

  std::vector<std::int32_t> targets(rows);
  std::vector<std::uint8_t> mask(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    targets[r] = static_cast<std::int32_t>(rng() % cols);
    mask[r] = static_cast<std::uint8_t>(r % 3 != 0);
  }
  std::vector<double> l1(rows), l2(rows);
  serial::cross_entropy_rows(x, targets, mask, l1, rows, cols);
  parallel::cross_entropy_rows(x, targets, mask, l2, rows, cols);
  CHECK(max_rel_diff(l1, l2) < kTol);

  std::vector<double> g1(rows * cols), g2(rows * cols);
  serial::cross_entropy_rows_grad(x, targets, mask, 0.3, g1, rows, cols);
  parallel::cross_entropy_rows_grad(x, targets, mask, 0.3, g2, rows, cols);
  CHECK(max_rel_diff(g1, g2) < kTol);
}

TEST_CASE("parallel kernels are deterministic across calls") {
  std::mt19937_64 rng(5);
  const MatmulDims d{256, 64, 256};
  const auto a = random_vec(d.m * d.k, rng);
  const auto b = random_vec(d.k * d.n, rng);
  std::vector<double> c1(d.m * d.n), c2(d.m * d.n);
  parallel::matmul(a, b, c1, d);
  parallel::matmul(a, b, c2, d);
  CHECK(c1 == c2);
}
