#include <cmath>

#include "doctest.h"
#include "testutil.hpp"
#include "tvq/rng.hpp"
#include "tvq/tensor.hpp"

using namespace tvq;
using tvq::test::grad_check;

namespace {

Tensor randn_t(Shape s, uint64_t seed, float sd = 1.0f, bool rg = true) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, sd, rg);
}

}  // namespace

TEST_CASE("relu forward") {
  Tensor x = Tensor::from({3}, {-1.0f, 0.0f, 2.0f});
  Tensor y = relu(x);
  CHECK(y.data()[0] == 0.0f);
  CHECK(y.data()[1] == 0.0f);
  CHECK(y.data()[2] == 2.0f);
}

TEST_CASE("softmax of equal logits is uniform") {
  Tensor x = Tensor::from({1, 4}, {0.7f, 0.7f, 0.7f, 0.7f});
  Tensor y = softmax(x);
  for (int c = 0; c < 4; ++c) CHECK(y.data()[c] == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("conv1d hand example") {
  // conv1d([1,2,3], kernel [1,1], stride 1, no padding) -> (3, 5)
  Tensor x = Tensor::from({1, 3}, {1.0f, 2.0f, 3.0f});
  Tensor w = Tensor::from({1, 1, 2}, {1.0f, 1.0f});
  Tensor y = conv1d(x, w, Tensor(), 1, 0);
  REQUIRE(y.shape() == Shape{1, 2});
  CHECK(y.data()[0] == doctest::Approx(3.0));
  CHECK(y.data()[1] == doctest::Approx(5.0));
}

TEST_CASE("shape mismatch reports both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  try {
    add(a, b);
    FAIL("expected exception");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2 x 3]") != std::string::npos);
    CHECK(msg.find("[3 x 2]") != std::string::npos);
  }
}

TEST_CASE("gradcheck: elementwise and reductions") {
  Tensor a = randn_t({3, 4}, 1);
  Tensor b = randn_t({3, 4}, 2);
  Tensor t = randn_t({3, 4}, 3, 1.0f, false);

  auto res = grad_check({a, b}, [&] { return mse(mul(add(a, b), b), t); });
  CHECK(res.max_rel_err < 1e-3);

  res = grad_check({a}, [&] { return mean(mul(a, 0.7f)); });
  CHECK(res.max_rel_err < 1e-3);

  res = grad_check({a, b}, [&] { return mse(sub(a, b), t); });
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("gradcheck: matmul / transpose / add_rowvec") {
  Tensor a = randn_t({3, 5}, 4);
  Tensor b = randn_t({5, 2}, 5);
  Tensor bias = randn_t({2}, 6);
  Tensor t = randn_t({3, 2}, 7, 1.0f, false);
  auto res = grad_check({a, b, bias},
                        [&] { return mse(add_rowvec(matmul(a, b), bias), t); });
  CHECK(res.max_rel_err < 1e-3);

  Tensor t2 = randn_t({5, 3}, 8, 1.0f, false);
  res = grad_check({a}, [&] { return mse(transpose(a), t2); });
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("gradcheck: conv1d strided and padded") {
  Tensor x = randn_t({3, 8}, 9);
  Tensor w = randn_t({4, 3, 3}, 10, 0.5f);
  Tensor b = randn_t({4}, 11, 0.5f);
  Tensor t = randn_t({4, 4}, 12, 1.0f, false);
  auto res = grad_check({x, w, b}, [&] { return mse(conv1d(x, w, b, 2, 1), t); });
  INFO(res.where);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("gradcheck: conv1d_transposed") {
  Tensor x = randn_t({3, 4}, 13);
  Tensor w = randn_t({3, 2, 4}, 14, 0.5f);
  Tensor b = randn_t({2}, 15, 0.5f);
  // T_out = (4-1)*2 + 4 - 2*1 = 8
  Tensor t = randn_t({2, 8}, 16, 1.0f, false);
  auto res = grad_check({x, w, b}, [&] { return mse(conv1d_transposed(x, w, b, 2, 1), t); });
  INFO(res.where);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("gradcheck: activations") {
  Tensor x = randn_t({4, 4}, 17);
  Tensor t = randn_t({4, 4}, 18, 1.0f, false);
  auto res = grad_check({x}, [&] { return mse(relu(x), t); });
  CHECK(res.max_rel_err < 2e-3);  // kinks cost accuracy near zero crossings
  res = grad_check({x}, [&] { return mse(gelu(x), t); });
  CHECK(res.max_rel_err < 1e-3);

  Tensor xp = Tensor::from({4}, {0.5f, 1.0f, 2.0f, 3.5f}, true);
  Tensor tp = Tensor::from({4}, {1.0f, 0.0f, 1.0f, 2.0f});
  res = grad_check({xp}, [&] { return mse(sqrt_elem(xp), tp); });
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("gradcheck: layer_norm / softmax") {
  Tensor x = randn_t({3, 6}, 19);
  Tensor g = randn_t({6}, 20, 0.5f);
  Tensor b = randn_t({6}, 21, 0.5f);
  Tensor t = randn_t({3, 6}, 22, 1.0f, false);
  auto res = grad_check({x, g, b}, [&] { return mse(layer_norm(x, g, b), t); });
  INFO(res.where);
  CHECK(res.max_rel_err < 2e-3);

  res = grad_check({x}, [&] { return mse(softmax(x), t); });
  INFO(res.where);
  CHECK(res.max_rel_err < 2e-3);
}

TEST_CASE("gradcheck: embedding / reshape / slice / concat") {
  Tensor table = randn_t({6, 4}, 23);
  Tensor t = randn_t({3, 4}, 24, 1.0f, false);
  std::vector<int> ids{1, 4, 1};
  auto res = grad_check({table}, [&] { return mse(embedding_lookup(table, ids), t); });
  CHECK(res.max_rel_err < 1e-3);

  Tensor x = randn_t({4, 6}, 25);
  Tensor t2 = randn_t({8, 3}, 26, 1.0f, false);
  res = grad_check({x}, [&] { return mse(reshape(x, {8, 3}), t2); });
  CHECK(res.max_rel_err < 1e-3);

  Tensor t3 = randn_t({2, 3}, 27, 1.0f, false);
  res = grad_check({x}, [&] { return mse(slice(x, 1, 3, 2, 5), t3); });
  CHECK(res.max_rel_err < 1e-3);

  Tensor y = randn_t({2, 6}, 28);
  Tensor t4 = randn_t({6, 6}, 29, 1.0f, false);
  res = grad_check({x, y}, [&] { return mse(concat_rows({x, y}), t4); });
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("gradcheck: cross_entropy") {
  Tensor logits = randn_t({4, 5}, 30);
  std::vector<int> targets{0, 3, 2, 4};
  auto res = grad_check({logits}, [&] { return cross_entropy(logits, targets); });
  INFO(res.where);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("mse backward hand value") {
  // loss = mse(x, 0) with scalar x = 3 -> d/dx = 2*3 = 6
  Tensor x = Tensor::from({1}, {3.0f}, true);
  Tensor zero = Tensor::zeros({1});
  Tensor loss = mse(x, zero);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("straight_through forward and backward") {
  Tensor pre = Tensor::from({2, 2}, {0.1f, 0.2f, 0.3f, 0.4f}, true);
  Tensor q = Tensor::from({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  Tensor out = straight_through(pre, q);
  CHECK(out.data() == q.data());

  Tensor t = Tensor::zeros({2, 2});
  Tensor loss = mse(out, t);
  backward(loss);
  // Gradient at pre equals the upstream gradient exactly: 2*(q - 0)/4.
  for (int i = 0; i < 4; ++i)
    CHECK(pre.grad()[i] == doctest::Approx(2.0 * q.data()[i] / 4.0).epsilon(1e-6));
}

TEST_CASE("straight_through end to end: toy encoder gets gradient through quantization") {
  // Two-parameter toy encoder: z = w * x + b, quantized to nearest of {0, 1}.
  Tensor w = Tensor::from({1}, {0.4f}, true);
  Tensor b = Tensor::from({1}, {0.1f}, true);
  Tensor x = Tensor::from({1}, {1.0f});
  Tensor target = Tensor::from({1}, {0.9f});
  auto loss_fn = [&] {
    Tensor z = add(mul(w, x.data()[0]), b);
    const float zq = z.data()[0] < 0.5f ? 0.0f : 1.0f;
    Tensor q = Tensor::from({1}, {zq});
    return mse(straight_through(z, q), target);
  };
  auto res = grad_check({w, b}, loss_fn);
  CHECK(res.max_rel_err < 1e-3);
  w.zero_grad();
  b.zero_grad();
  backward(loss_fn());
  CHECK(std::abs(w.grad()[0]) > 0.0f);
}

TEST_CASE("disconnected parameter keeps zero grad") {
  Tensor a = randn_t({2, 2}, 31);
  Tensor unused = randn_t({2, 2}, 32);
  Tensor loss = mean(a);
  backward(loss);
  for (float g : unused.grad()) CHECK(g == 0.0f);
}

TEST_CASE("diamond graph accumulates both paths") {
  Tensor x = Tensor::from({1}, {2.0f}, true);
  Tensor y = add(x, x);  // dy/dx = 2
  backward(mean(y));
  CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("backward requires scalar loss") {
  Tensor x = randn_t({2, 2}, 33);
  CHECK_THROWS_AS(backward(add(x, x)), std::invalid_argument);
}

TEST_CASE("forward and backward are bit-deterministic") {
  auto run = [] {
    Tensor x = randn_t({4, 6}, 100);
    Tensor w = randn_t({3, 4, 3}, 101, 0.5f);
    Tensor t = randn_t({3, 6}, 102, 1.0f, false);
    Tensor loss = mse(gelu(conv1d(x, w, Tensor(), 1, 1)), t);
    backward(loss);
    return std::make_pair(loss.item(), x.grad());
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Tensor p = Tensor::from({3}, {1.0f, -2.0f, 0.5f}, true);
  Adam opt({p}, {});
  opt.zero_grad();
  opt.step();
  CHECK(p.data()[0] == 1.0f);
  CHECK(p.data()[1] == -2.0f);
  CHECK(p.data()[2] == 0.5f);
}

TEST_CASE("adam: first step with unit gradient moves by about -lr") {
  Tensor p = Tensor::from({1}, {0.0f}, true);
  AdamConfig cfg;
  cfg.lr = 0.1f;
  Adam opt({p}, cfg);
  p.grad()[0] = 1.0f;
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(-0.1).epsilon(1e-4));
}

TEST_CASE("adam: minimizes theta^2 and matches an independent recurrence") {
  Tensor p = Tensor::from({1}, {1.0f}, true);
  AdamConfig cfg;
  cfg.lr = 0.05f;
  Adam opt({p}, cfg);

  // Independent scalar recurrence in double precision.
  double theta = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 500; ++t) {
    p.zero_grad();
    Tensor loss = mse(p, Tensor::zeros({1}));
    backward(loss);
    opt.step();

    const double g = 2.0 * theta;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    theta -= 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
  }
  CHECK(std::abs(p.data()[0]) < 1e-2);
  CHECK(p.data()[0] == doctest::Approx(theta).epsilon(2e-3));
}

TEST_CASE("adam: non-finite gradient aborts with parameter name") {
  Tensor p = Tensor::from({1}, {1.0f}, true);
  p.set_name("toy.weight");
  Adam opt({p}, {});
  p.grad()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    opt.step();
    FAIL("expected exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("toy.weight") != std::string::npos);
  }
  CHECK(p.data()[0] == 1.0f);
}
