#include <cmath>
#include <cstring>
#include <random>

#include "caft/common/error.hpp"
#include "caft/engine/ops.hpp"
#include "caft/engine/optimizer.hpp"
#include "caft/engine/tape.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace caft;
using namespace caft::engine;
using caft::testing::max_relative_error;
using caft::testing::numeric_gradient;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), stddev, rng, requires_grad);
}

// Runs `build` on a fresh tape, backpropagates, then compares the gradient of
// every tensor in `params` with central differences.
double gradcheck(const std::function<Tensor()>& build, std::vector<Tensor> params) {
  {
    Tape tape;
    Tensor loss = build();
    tape.backward(loss);
  }
  double worst = 0.0;
  for (Tensor& p : params) {
    const auto numeric = numeric_gradient(p, [&] { return build().item(); });
    worst = std::max(worst, max_relative_error(p, numeric));
  }
  return worst;
}

// Projects an op output to a scalar with fixed random weights so every
// output element influences the loss differently.
Tensor project(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

}  // namespace

TEST_CASE("matmul examples") {
  const Tensor id = Tensor::from_matrix({{1, 0}, {0, 1}});
  const Tensor m = Tensor::from_matrix({{3, 4}, {5, 6}});
  CHECK(bit_equal(matmul(id, m), m));

  const Tensor r = matmul(Tensor::from_matrix({{1, 2}}), Tensor::from_matrix({{3}, {4}}));
  CHECK(r.shape() == Shape{1, 1});
  CHECK(r.item() == 11.0);

  std::mt19937_64 rng(3);
  const Tensor a = random_tensor({3, 4}, rng, false);
  const Tensor z = matmul(a, Tensor::zeros({4, 5}));
  for (double v : z.data()) CHECK(v == 0.0);

  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(4, 2)") != std::string::npos);
  }
}

TEST_CASE("matmul with leading batch dimensions") {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor({2, 3, 4}, rng, false);
  const Tensor b = random_tensor({4, 2}, rng, false);
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 3, 2});
  double expect = 0.0;
  for (std::size_t p = 0; p < 4; ++p) expect += a.at(1 * 12 + 2 * 4 + p) * b.at(p * 2 + 1);
  CHECK(c.at(1 * 6 + 2 * 2 + 1) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("softmax examples") {
  const Tensor half = softmax(Tensor({2}, {0.0, 0.0}), 0);
  CHECK(half.at(0) == 0.5);
  CHECK(half.at(1) == 0.5);

  const Tensor big = softmax(Tensor({2}, {1000.0, 1000.0}), 0);
  CHECK(big.at(0) == 0.5);
  CHECK(big.at(1) == 0.5);

  const Tensor q = softmax(Tensor({2}, {std::log(1.0), std::log(3.0)}), 0);
  CHECK(q.at(0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(q.at(1) == doctest::Approx(0.75).epsilon(1e-14));

  CHECK_THROWS_AS(softmax(Tensor({2}, {0.0, NAN}), 0), NumericError);
  CHECK_THROWS_AS(softmax(Tensor({2}, {INFINITY, 0.0}), 0), NumericError);
}

TEST_CASE("softmax normalization and shift invariance (property)") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 2 + trial % 4;
    const std::size_t cols = 2 + trial % 7;
    const Tensor x = random_tensor({rows, cols}, rng, false, 5.0);
    const double c = shift(rng);
    Tensor xs = x.clone();
    for (double& v : xs.data()) v += c;
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const Tensor y = softmax(x, axis);
      const Tensor ys = softmax(xs, axis);
      CHECK(max_abs_diff(y, ys) < 1e-12);
      for (double v : y.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
    const Tensor y = softmax(x, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < cols; ++j) total += y.at(r * cols + j);
      CHECK(std::fabs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("cross entropy examples") {
  CHECK(cross_entropy(Tensor({3}, {0.0, 1.0, 0.0}), 1) == 0.0);
  const Tensor uniform = Tensor::full({256}, 1.0 / 256.0);
  CHECK(cross_entropy(uniform, 17) == doctest::Approx(std::log(256.0)).epsilon(1e-12));
  CHECK(cross_entropy(uniform, 17) == doctest::Approx(5.545).epsilon(1e-3));
  CHECK(cross_entropy(Tensor({4}, {0.25, 0.25, 0.25, 0.25}), 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy(uniform, 256), IndexError);
  CHECK_THROWS_AS(cross_entropy(uniform, -1), IndexError);
}

TEST_CASE("masked cross entropy matches probability form and ignores masked rows") {
  std::mt19937_64 rng(2);
  const Tensor logits = random_tensor({3, 5}, rng, false);
  const std::vector<TokenId> targets{1, 4, 0};
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const double loss = masked_cross_entropy(logits, targets, mask).item();
  const Tensor probs = softmax(logits, 1);
  double expect = 0.0;
  for (std::size_t r : {0u, 2u}) {
    expect += cross_entropy(Tensor({5}, {probs.data().begin() + r * 5, probs.data().begin() + r * 5 + 5}), targets[r]);
  }
  CHECK(loss == doctest::Approx(expect / 2.0).epsilon(1e-12));

  const std::vector<std::uint8_t> none{0, 0, 0};
  CHECK(masked_cross_entropy(logits, targets, none).item() == 0.0);

  const std::vector<TokenId> bad{9, 1, 0};
  CHECK_THROWS_AS(masked_cross_entropy(logits, bad, mask), IndexError);
}

TEST_CASE("backward simple derivatives") {
  std::mt19937_64 rng(7);
  Tensor w = random_tensor({4}, rng);
  {
    Tape tape;
    tape.backward(sum(w));
    for (double g : w.grad()) CHECK(g == 1.0);
  }
  {
    Tape tape;
    tape.backward(sum(mul(w, w)));
    for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad()[i] == doctest::Approx(2.0 * w.at(i)).epsilon(1e-15));
  }
}

TEST_CASE("backward contract errors") {
  Tensor w = Tensor::full({3}, 1.0, true);
  Tape tape;
  const Tensor y = scale(w, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
  CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("frozen parameters receive no gradient") {
  std::mt19937_64 rng(9);
  Tensor trainable = random_tensor({3, 2}, rng, true);
  Tensor frozen = random_tensor({2, 2}, rng, false);
  Tape tape;
  const Tensor loss = sum(matmul(trainable, frozen));
  tape.backward(loss);
  CHECK(trainable.has_grad());
  CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("tape visits each node once and replays identically") {
  std::mt19937_64 rng(13);
  Tensor w1 = random_tensor({4, 6}, rng);
  Tensor w2 = random_tensor({6, 3}, rng);
  const Tensor x = random_tensor({5, 4}, rng, false);
  Tape tape;
  const Tensor h = gelu(matmul(x, w1));
  const Tensor loss = sum(mul(matmul(h, w2), matmul(h, w2)));
  tape.backward(loss);
  CHECK(tape.last_visit_count() == tape.size());
  const std::vector<double> g1(w1.grad().begin(), w1.grad().end());
  const std::vector<double> g2(w2.grad().begin(), w2.grad().end());
  tape.backward(loss);
  CHECK(std::equal(g1.begin(), g1.end(), w1.grad().begin()));
  CHECK(std::equal(g2.begin(), g2.end(), w2.grad().begin()));
}

TEST_CASE("two-layer MLP gradient matches finite differences") {
  std::mt19937_64 rng(17);
  Tensor w1 = random_tensor({5, 8}, rng, true, 0.5);
  Tensor b1 = random_tensor({8}, rng, true, 0.1);
  Tensor w2 = random_tensor({8, 3}, rng, true, 0.5);
  const Tensor x = random_tensor({6, 5}, rng, false);
  const std::vector<TokenId> targets{0, 2, 1, 1, 0, 2};
  const std::vector<std::uint8_t> mask(6, 1);
  auto build = [&] { return masked_cross_entropy(matmul(gelu(add(matmul(x, w1), b1)), w2), targets, mask); };
  CHECK(gradcheck(build, {w1, b1, w2}) < 1e-4);
}

TEST_CASE("gradient check: matmul") {
  std::mt19937_64 rng(660);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    const Tensor w = random_tensor({2, 3, 5}, rng, false);
    CHECK(gradcheck([&] { return project(matmul(a, b), w); }, {a, b}) < 1e-4);
  }
}

TEST_CASE("gradient check: add with broadcast and mul/scale") {
  std::mt19937_64 rng(235);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor bias = random_tensor({4}, rng);
    Tensor c = random_tensor({3, 4}, rng);
    const Tensor w = random_tensor({3, 4}, rng, false);
    CHECK(gradcheck([&] { return project(scale(mul(add(a, bias), c), 0.7), w); }, {a, bias, c}) < 1e-4);
  }
}

TEST_CASE("gradient check: gelu") {
  std::mt19937_64 rng(254);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor x = random_tensor({10}, rng, true, 2.0);
    const Tensor w = random_tensor({10}, rng, false);
    CHECK(gradcheck([&] { return project(gelu(x), w); }, {x}) < 1e-4);
  }
}

TEST_CASE("gradient check: layer_norm") {
  std::mt19937_64 rng(110);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor x = random_tensor({3, 6}, rng);
    Tensor g = random_tensor({6}, rng);
    Tensor b = random_tensor({6}, rng);
    const Tensor w = random_tensor({3, 6}, rng, false);
    CHECK(gradcheck([&] { return project(layer_norm(x, g, b), w); }, {x, g, b}) < 1e-4);
  }
}

TEST_CASE("gradient check: embedding") {
  std::mt19937_64 rng(720);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor table = random_tensor({7, 3}, rng);
    const std::vector<TokenId> ids{1, 4, 4, 0, 6, 1};
    const Tensor w = random_tensor({2, 3, 3}, rng, false);
    CHECK(gradcheck([&] { return project(embedding(table, ids, {2, 3}), w); }, {table}) < 1e-4);
  }
}

TEST_CASE("gradient check: causal attention") {
  std::mt19937_64 rng(197);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor qkv = random_tensor({2, 5, 12}, rng);
    const Tensor w = random_tensor({2, 5, 4}, rng, false);
    CHECK(gradcheck([&] { return project(causal_self_attention(qkv, 2), w); }, {qkv}) < 1e-4);
  }
}

TEST_CASE("gradient check: softmax on both axes") {
  std::mt19937_64 rng(551);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor x = random_tensor({3, 4}, rng);
    const Tensor w = random_tensor({3, 4}, rng, false);
    CHECK(gradcheck([&] { return project(softmax(x, 0), w); }, {x}) < 1e-4);
    CHECK(gradcheck([&] { return project(softmax(x, 1), w); }, {x}) < 1e-4);
  }
}

TEST_CASE("gradient check: masked cross entropy") {
  std::mt19937_64 rng(712);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor logits = random_tensor({2, 3, 6}, rng);
    const std::vector<TokenId> t{0, 5, 2, 3, 3, 1};
    const std::vector<std::uint8_t> m{1, 1, 0, 1, 0, 1};
    CHECK(gradcheck([&] { return masked_cross_entropy(logits, t, m); }, {logits}) < 1e-4);
  }
}

TEST_CASE("gradient check: weighted sum of scalars") {
  std::mt19937_64 rng(802);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor a = random_tensor({4}, rng);
    Tensor b = random_tensor({4}, rng);
    const std::vector<double> wts{1.0, 0.37};
    CHECK(gradcheck(
              [&] {
                const std::vector<Tensor> terms{sum(mul(a, a)), sum(gelu(b))};
                return weighted_sum(terms, wts);
              },
              {a, b}) < 1e-4);
  }
}

TEST_CASE("gradient check: dropout with a fixed mask") {
  std::mt19937_64 rng(579);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    Tensor x = random_tensor({12}, rng);
    const Tensor w = random_tensor({12}, rng, false);
    const std::uint64_t seed = rng();
    CHECK(gradcheck(
              [&] {
                std::mt19937_64 local(seed);
                return project(dropout(x, 0.25, local), w);
              },
              {x}) < 1e-4);
  }
}

TEST_CASE("dropout zero probability is identity") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({5}, rng, false);
  CHECK(bit_equal(dropout(x, 0.0, rng), x));
}

TEST_CASE("identical seeds give bit-identical losses") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tensor w = random_tensor({6, 4}, rng);
    const Tensor x = random_tensor({3, 6}, rng, false);
    return sum(gelu(matmul(x, w))).item();
  };
  const double a = run();
  const double b = run();
  CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("AdamW: zero gradient leaves parameters unchanged") {
  Tensor p({3}, {1.0, -2.0, 0.5}, true);
  p.zero_grad();
  const Tensor before = p.clone();
  AdamW opt({.learning_rate = 0.1});
  const std::vector<NamedTensor> params{{"p", p}};
  opt.step(params);
  CHECK(bit_equal(p, before));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("AdamW: single step matches hand calculation") {
  // m = 0.1*0.5 = 0.05, v = 0.001*0.25 = 2.5e-4, m_hat = 0.5, v_hat = 0.25
  // p = 1*(1 - 0.1*0.01) - 0.1 * 0.5 / (0.5 + 1e-8) = 0.899000002
  Tensor p({1}, {1.0}, true);
  p.zero_grad();
  p.grad()[0] = 0.5;
  AdamW opt({.learning_rate = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01});
  const std::vector<NamedTensor> params{{"p", p}};
  opt.step(params);
  CHECK(p.item() == doctest::Approx(0.899000002).epsilon(1e-14));
  CHECK(opt.moments().at("p").first[0] == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(opt.moments().at("p").second[0] == doctest::Approx(2.5e-4).epsilon(1e-15));
}

TEST_CASE("AdamW: frozen parameter with stale gradient is untouched") {
  Tensor frozen({2}, {3.0, 4.0}, true);
  frozen.zero_grad();
  frozen.grad()[0] = 10.0;
  frozen.set_requires_grad(false);
  Tensor live({1}, {1.0}, true);
  live.zero_grad();
  live.grad()[0] = 1.0;
  const Tensor before = frozen.clone();
  AdamW opt({.learning_rate = 0.1});
  const std::vector<NamedTensor> params{{"frozen", frozen}, {"live", live}};
  opt.step(params);
  opt.step(params);
  CHECK(bit_equal(frozen, before));
  CHECK(live.item() != 1.0);
  CHECK(opt.step_count() == 2);
  CHECK(opt.moments().count("frozen") == 0);
}

TEST_CASE("AdamW: missing gradient on a trainable parameter is a contract error") {
  Tensor p({1}, {1.0}, true);
  AdamW opt;
  const std::vector<NamedTensor> params{{"p", p}};
  CHECK_THROWS_AS(opt.step(params), ContractError);
  CHECK_THROWS_AS(AdamW({.learning_rate = -1.0}), ConfigError);
}
