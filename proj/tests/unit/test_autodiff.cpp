#include <cmath>
#include <limits>

#include "doctest.h"
#include "gadt/gradcheck.hpp"
#include "gadt/ops.hpp"
#include "support.hpp"

using namespace gadt;
using support::random_tensor;

namespace {

// Direct quadruple loop, zero or replicate padding.
std::vector<double> conv_reference(const Tensor<double>& x, const Tensor<double>& k, PadMode pad) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const long rh = static_cast<long>(kh / 2), rw = static_cast<long>(kw / 2);
  std::vector<double> out(N * O * H * W, 0.0);
  auto xd = x.data();
  auto kd = k.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (long i = 0; i < static_cast<long>(H); ++i)
        for (long j = 0; j < static_cast<long>(W); ++j) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (long u = -rh; u <= rh; ++u)
              for (long v = -rw; v <= rw; ++v) {
                long ii = i + u, jj = j + v;
                if (pad == PadMode::zero) {
                  if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
                } else {
                  ii = std::clamp(ii, 0L, static_cast<long>(H) - 1);
                  jj = std::clamp(jj, 0L, static_cast<long>(W) - 1);
                }
                acc += xd[((n * C + c) * H + ii) * W + jj] * kd[((o * C + c) * kh + (u + rh)) * kw + (v + rw)];
              }
          out[((n * O + o) * H + i) * W + j] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("tensor shape must match data length") {
  CHECK_THROWS_AS(Tensor<double>::from({2, 3}, std::vector<double>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor<double>::zeros({2, 0}), DimensionError);
  auto t = Tensor<float>::zeros({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.data().size() == numel(t.shape()));
}

TEST_CASE("conv2d identity delta kernel with replicate padding") {
  auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto k = Tensor<double>::from({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  auto y = conv2d(x, k, PadMode::replicate);
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>(9, 1.0));

  auto r = random_tensor({2, 3, 6, 5}, 4, 0.0, 1.0);
  auto delta = Tensor<double>::zeros({3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) delta.mutable_data()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
  for (auto pad : {PadMode::zero, PadMode::replicate}) {
    auto z = conv2d(r, delta, pad);
    CHECK(support::max_abs_diff(z.data(), r.data()) == 0.0);
  }
}

TEST_CASE("conv2d scalar kernel scales") {
  auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto k = Tensor<double>::from({1, 1, 1, 1}, {2});
  auto y = conv2d(x, k, PadMode::zero);
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{2, 4, 6, 8});
}

TEST_CASE("conv2d matches brute-force loops") {
  for (auto pad : {PadMode::zero, PadMode::replicate}) {
    auto x = random_tensor({1, 1, 5, 5}, 10);
    auto k = random_tensor({1, 1, 3, 3}, 11);
    CHECK(support::max_abs_diff(conv2d(x, k, pad).data(), conv_reference(x, k, pad)) < 1e-10);
    auto x2 = random_tensor({2, 3, 7, 6}, 12);
    auto k2 = random_tensor({4, 3, 5, 3}, 13);
    CHECK(support::max_abs_diff(conv2d(x2, k2, pad).data(), conv_reference(x2, k2, pad)) < 1e-10);
  }
}

TEST_CASE("conv2d rejects mismatched channels and even kernels") {
  auto x = random_tensor({1, 2, 4, 4}, 1);
  CHECK_THROWS_AS(conv2d(x, random_tensor({1, 3, 3, 3}, 2), PadMode::zero), DimensionError);
  CHECK_THROWS_AS(conv2d(x, random_tensor({1, 2, 2, 2}, 2), PadMode::zero), ContractError);
}

TEST_CASE("conv2d gradients for input and kernel") {
  auto k = random_tensor({2, 2, 3, 3}, 21);
  auto x = random_tensor({1, 2, 5, 4}, 20);
  for (auto pad : {PadMode::zero, PadMode::replicate}) {
    auto wrt_x = finite_diff_gradcheck(
        [&](const Tensor<double>& v) { return sum(mul(conv2d(v, k, pad), conv2d(v, k, pad))); }, x, 1e-5);
    CHECK(wrt_x.max_relative_error < 1e-6);
    auto wrt_k = finite_diff_gradcheck([&](const Tensor<double>& v) { return sum(conv2d(x, v, pad)); }, k, 1e-5);
    CHECK(wrt_k.max_relative_error < 1e-6);
  }
}

TEST_CASE("cross entropy examples") {
  const std::vector<ClassIndex> l0{0};
  auto uniform = softmax_cross_entropy(Tensor<double>::from({1, 2}, {0, 0}), l0);
  CHECK(uniform.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  auto saturated = softmax_cross_entropy(Tensor<double>::from({1, 2}, {1000, 0}), l0);
  CHECK(std::isfinite(saturated.item()));
  CHECK(saturated.item() == doctest::Approx(0.0));
  auto saturated32 = softmax_cross_entropy(Tensor<float>::from({1, 2}, {1000.f, 0.f}), l0);
  CHECK(std::isfinite(saturated32.item()));

  for (std::size_t C : {2u, 3u, 6u, 10u}) {
    std::vector<ClassIndex> labels{C - 1, 0};
    auto ce = softmax_cross_entropy(Tensor<double>::full({2, C}, 3.5), labels);
    CHECK(ce.item() == doctest::Approx(std::log(static_cast<double>(C))).epsilon(1e-14));
  }
  auto r = random_tensor({5, 4}, 3, -5, 5);
  const std::vector<ClassIndex> labels{0, 1, 2, 3, 1};
  CHECK(softmax_cross_entropy(r, labels).item() >= 0.0);
}

TEST_CASE("cross entropy gradient is (softmax - onehot) / N") {
  auto logits = random_tensor({4, 3}, 31, -2, 2, true);
  const std::vector<ClassIndex> labels{2, 0, 1, 1};
  softmax_cross_entropy(logits, labels).backward();
  auto d = logits.data();
  for (std::size_t i = 0; i < 4; ++i) {
    double z = 0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(d[i * 3 + c]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double expect = (std::exp(d[i * 3 + c]) / z - (c == labels[i] ? 1.0 : 0.0)) / 4.0;
      CHECK(logits.grad()[i * 3 + c] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  auto fd = finite_diff_gradcheck(
      [&](const Tensor<double>& v) { return softmax_cross_entropy(v, labels); }, logits.detach(), 1e-5);
  CHECK(fd.max_relative_error < 1e-6);
}

TEST_CASE("cross entropy errors") {
  const std::vector<ClassIndex> bad{3};
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor<double>::zeros({1, 3}), bad), ContractError);
  auto nan = Tensor<double>::from({2, 2}, {0, 1, std::numeric_limits<double>::quiet_NaN(), 0});
  const std::vector<ClassIndex> labels{0, 0};
  try {
    softmax_cross_entropy(nan, labels);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("index 2") != std::string::npos);
  }
}

TEST_CASE("mse examples and gradient") {
  auto x = random_tensor({3, 4}, 40);
  CHECK(mse(x, x).item() == 0.0);
  CHECK(mse(Tensor<double>::from({2}, {0, 0}), Tensor<double>::from({2}, {1, 1})).item() == 1.0);
  auto y = random_tensor({3, 4}, 41);
  CHECK(mse(x, y).item() == mse(y, x).item());
  CHECK_THROWS_AS(mse(x, random_tensor({4, 3}, 1)), DimensionError);

  auto a = x.clone(true);
  mse(a, y).backward();
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(a.grad()[i] == doctest::Approx(2.0 * (x.data()[i] - y.data()[i]) / 12.0).epsilon(1e-12));
  }
  auto fd = finite_diff_gradcheck([&](const Tensor<double>& v) { return mse(v, y); }, x, 1e-5);
  CHECK(fd.max_relative_error < 1e-6);
}

TEST_CASE("clamp01 values and subgradient") {
  auto x = Tensor<double>::from({5}, {-0.5, 0.5, 1.5, 0.0, 1.0}, true);
  auto y = clamp01(x);
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{0, 0.5, 1, 0, 1});
  sum(y).backward();
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0, 1, 0, 0, 0});

  auto inside = random_tensor({6}, 5, 0.1, 0.9, true);
  auto z = clamp01(inside);
  CHECK(support::max_abs_diff(z.data(), inside.data()) == 0.0);
  sum(z).backward();
  for (double g : inside.grad()) CHECK(g == 1.0);

  auto wide = random_tensor({20}, 6, -0.5, 1.5);
  GradcheckOptions opt;
  opt.step = 1e-6;
  opt.include = [&](std::size_t i) {
    const double v = wide.data()[i];
    return v > 1e-3 && v < 1 - 1e-3;
  };
  auto fd = finite_diff_gradcheck([](const Tensor<double>& v) { return sum(mul(clamp01(v), clamp01(v))); }, wide, opt);
  CHECK(fd.checked > 0);
  CHECK(fd.checked < 20);
  CHECK(fd.max_relative_error < 1e-6);
}

TEST_CASE("backward of sum and of a linear least-squares loss") {
  auto x = Tensor<double>::from({3}, {1, -2, 5}, true);
  sum(x).backward();
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});

  // loss = mse(W x, y) with x a single row: grad_W = 2 (W x - y) x^T / n.
  auto W = random_tensor({4, 3}, 50, -1, 1, true);
  auto in = random_tensor({1, 3}, 51);
  auto target = random_tensor({1, 4}, 52);
  auto bias = Tensor<double>::zeros({4});
  auto pred = linear(in, W, bias);
  mse(pred, target).backward();
  for (std::size_t o = 0; o < 4; ++o) {
    double wx = 0;
    for (std::size_t d = 0; d < 3; ++d) wx += W.data()[o * 3 + d] * in.data()[d];
    for (std::size_t d = 0; d < 3; ++d) {
      const double expect = 2.0 * (wx - target.data()[o]) * in.data()[d] / 4.0;
      CHECK(W.grad()[o * 3 + d] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("backward contract") {
  auto x = random_tensor({3}, 1, -1, 1, true);
  CHECK_THROWS_AS(scale(x, 2.0).backward(), ContractError);
  CHECK_THROWS_AS(Tensor<double>::zeros({2}, true).grad(), ContractError);
}

TEST_CASE("leaf gradients accumulate until zero_grad") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  sum(mul(x, x)).backward();
  sum(mul(x, x)).backward();
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == 8.0);
  x.zero_grad();
  sum(x).backward();
  CHECK(x.grad()[0] == 1.0);
}

TEST_CASE("backward is bit-deterministic") {
  auto model = support::tiny_model<double>(3);
  auto x = random_tensor({2, 3, 16, 16}, 60, 0, 1);
  const std::vector<ClassIndex> y{1, 4};
  std::vector<double> first;
  for (int rep = 0; rep < 2; ++rep) {
    auto xi = x.clone(true);
    softmax_cross_entropy(model.forward(xi), y).backward();
    std::vector<double> g(xi.grad().begin(), xi.grad().end());
    if (rep == 0) first = g;
    else CHECK(g == first);
  }
}

TEST_CASE("tape parents precede children") {
  auto a = random_tensor({4}, 1, -1, 1, true);
  auto b = relu(mul(a, a));
  auto c = add(b, a);
  std::vector<const detail::Node<double>*> stack{c.node().get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    for (const auto& p : n->parents) {
      CHECK(p->seq < n->seq);
      stack.push_back(p.get());
    }
  }
}

TEST_CASE("pooling, relu, dense, gather gradients") {
  auto x = random_tensor({2, 2, 4, 6}, 70);
  CHECK(finite_diff_gradcheck([](const Tensor<double>& v) { return sum(mul(avg_pool2x2(v), avg_pool2x2(v))); }, x,
                              1e-5)
            .max_relative_error < 1e-6);
  auto w = random_tensor({3, 5}, 71);
  auto bias = random_tensor({3}, 72);
  auto in = random_tensor({2, 5}, 73);
  CHECK(finite_diff_gradcheck([&](const Tensor<double>& v) { return sum(mul(linear(v, w, bias), linear(v, w, bias))); },
                              in, 1e-5)
            .max_relative_error < 1e-6);
  CHECK(finite_diff_gradcheck([&](const Tensor<double>& v) { return sum(mul(linear(in, v, bias), linear(in, v, bias))); },
                              w, 1e-5)
            .max_relative_error < 1e-6);
  auto away = random_tensor({10}, 74, 0.1, 1.0);
  for (std::size_t i = 0; i < 10; i += 2) away.mutable_data()[i] = -away.data()[i];
  CHECK(finite_diff_gradcheck([](const Tensor<double>& v) { return sum(mul(relu(v), v)); }, away, 1e-6)
            .max_relative_error < 1e-6);
  const std::vector<std::ptrdiff_t> idx{3, -1, 0, 0, 2, 1};
  auto g = random_tensor({4}, 75);
  auto gathered = gather(g, idx, {2, 3});
  CHECK(gathered.data()[1] == 0.0);
  CHECK(gathered.data()[2] == g.data()[0]);
  CHECK(finite_diff_gradcheck([&](const Tensor<double>& v) { auto t = gather(v, idx, {2, 3}); return sum(mul(t, t)); },
                              g, 1e-5)
            .max_relative_error < 1e-6);
}

TEST_CASE("finite_diff_gradcheck behaviour") {
  auto x = Tensor<double>::from({2}, {1, 2});
  auto r = finite_diff_gradcheck([](const Tensor<double>& v) { return sum(mul(v, v)); }, x, 1e-5);
  CHECK(r.max_relative_error < 1e-9);
  CHECK(r.checked == 2);

  auto logits = random_tensor({3, 5}, 80, -3, 3);
  const std::vector<ClassIndex> labels{4, 0, 2};
  CHECK(finite_diff_gradcheck([&](const Tensor<double>& v) { return softmax_cross_entropy(v, labels); }, logits, 1e-5)
            .max_relative_error < 1e-6);

  int calls = 0;
  auto flaky = [&](const Tensor<double>& v) { return scale(sum(v), static_cast<double>(++calls)); };
  CHECK_THROWS_AS(finite_diff_gradcheck(flaky, x, 1e-5), ContractError);
}
