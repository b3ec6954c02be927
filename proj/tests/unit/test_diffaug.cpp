#include <cmath>

#include "doctest.h"
#include "gadt/diffaug.hpp"
#include "gadt/gradcheck.hpp"
#include "support.hpp"

using namespace gadt;
using support::random_tensor;

namespace {

Tensor<double> kernel_at(double b, double phi, std::size_t k = 7) {
  BlurShape shape;
  shape.size = k;
  return blur_kernel(Tensor<double>::scalar(b), Tensor<double>::scalar(phi), shape);
}

// Independent evaluation of the kernel formula in the header.
std::vector<double> kernel_formula(double b, double phi, const BlurShape& s) {
  const double sp = s.floor + b * static_cast<double>(s.size) / 2.0;
  const double sq = s.floor + (s.perp_max - s.floor) * std::tanh(b / s.perp_ramp);
  const double half = static_cast<double>(s.size / 2);
  std::vector<double> w;
  double total = 0;
  for (std::size_t i = 0; i < s.size; ++i)
    for (std::size_t j = 0; j < s.size; ++j) {
      const double dx = j - half, dy = i - half;
      const double par = dx * std::cos(phi) + dy * std::sin(phi);
      const double perp = -dx * std::sin(phi) + dy * std::cos(phi);
      w.push_back(std::exp(-perp * perp / (2 * sq * sq) - par * par / (2 * sp * sp)));
      total += w.back();
    }
  for (auto& v : w) v /= total;
  return w;
}

double variance(std::span<const double> v) {
  double m = 0, s = 0;
  for (double e : v) m += e;
  m /= v.size();
  for (double e : v) s += (e - m) * (e - m);
  return s / v.size();
}

Tensor<double> transform_at(const Tensor<double>& x, AugParams p) { return transform(x, p); }

}  // namespace

TEST_CASE("blur kernel matches its formula, sums to one, non-negative") {
  for (double b : {0.0, 0.05, 0.3, 0.5, 1.0}) {
    for (double phi : {-3.0, -1.2, 0.0, 0.7, 3.14159}) {
      auto k = kernel_at(b, phi);
      const auto ref = kernel_formula(b, phi, BlurShape{});
      CHECK(support::max_abs_diff(k.data(), ref) < 1e-12);
      double total = 0;
      for (double w : k.data()) {
        CHECK(w >= 0.0);
        total += w;
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  auto k5 = kernel_at(0.4, 0.3, 5);
  CHECK(k5.shape() == Shape{5, 5});
}

TEST_CASE("blur kernel at zero intensity is a delta") {
  for (double phi : {0.0, 1.0, -2.5}) {
    auto k = kernel_at(0.0, phi);
    CHECK(k.data()[24] > 0.99);
    CHECK(k.data()[24] == 1.0);
  }
}

TEST_CASE("blur kernel rejects even or tiny sizes") {
  CHECK_THROWS_AS(kernel_at(0.5, 0, 6), ContractError);
  CHECK_THROWS_AS(kernel_at(0.5, 0, 1), ContractError);
}

TEST_CASE("blur kernel derivatives") {
  for (double b : {0.2, 0.5, 0.9}) {
    for (double phi : {-2.0, 0.4, 1.3}) {
      auto probe = random_tensor({7, 7}, 5);
      auto wrt_b = finite_diff_gradcheck(
          [&](const Tensor<double>& v) { return sum(mul(blur_kernel(v, Tensor<double>::scalar(phi)), probe)); },
          Tensor<double>::scalar(b), 1e-5);
      CHECK(wrt_b.max_relative_error < 1e-6);
      auto wrt_phi = finite_diff_gradcheck(
          [&](const Tensor<double>& v) { return sum(mul(blur_kernel(Tensor<double>::scalar(b), v), probe)); },
          Tensor<double>::scalar(phi), 1e-5);
      CHECK(wrt_phi.max_relative_error < 1e-6);
    }
  }
}

TEST_CASE("motion blur keeps constants, range and variance") {
  auto flat = Tensor<double>::full({1, 3, 10, 10}, 0.37);
  for (double b : {0.1, 0.6, 1.0}) {
    auto out = apply_motion_blur(flat, Tensor<double>::scalar(b), Tensor<double>::scalar(0.8));
    for (double v : out.data()) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  }
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto x = random_tensor({1, 1, 12, 12}, seed, 0, 1);
    Rng rng(seed);
    const double b = rng.uniform(), phi = rng.uniform(-3, 3);
    auto y = apply_motion_blur(x, Tensor<double>::scalar(b), Tensor<double>::scalar(phi));
    for (double v : y.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(variance(y.data()) <= variance(x.data()) + 1e-15);
  }
  auto x = random_tensor({2, 3, 9, 9}, 3, 0, 1);
  auto same = apply_motion_blur(x, Tensor<double>::scalar(0.0), Tensor<double>::scalar(1.0));
  CHECK(support::max_abs_diff(same.data(), x.data()) < 1e-4);
}

TEST_CASE("saturation identities") {
  auto x = random_tensor({2, 3, 5, 5}, 7, 0, 1);
  auto one = apply_saturation(x, Tensor<double>::scalar(1.0));
  CHECK(support::max_abs_diff(one.data(), x.data()) < 1e-15);
  auto gray = apply_saturation(x, Tensor<double>::scalar(0.0));
  const std::size_t plane = 25;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const auto base = n * 3 * plane + p;
      const double lum = 0.299 * x.data()[base] + 0.587 * x.data()[base + plane] + 0.114 * x.data()[base + 2 * plane];
      for (std::size_t c = 0; c < 3; ++c) CHECK(gray.data()[base + c * plane] == doctest::Approx(lum).epsilon(1e-12));
    }
  auto strong = apply_saturation(x, Tensor<double>::scalar(2.0));
  for (double v : strong.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("saturation channel contract and grayscale contrast fallback") {
  auto two = random_tensor({1, 2, 4, 4}, 8, 0, 1);
  CHECK_THROWS_AS(apply_saturation(two, Tensor<double>::scalar(0.5)), ContractError);
  auto mono = random_tensor({2, 1, 4, 4}, 9, 0.2, 0.8);
  CHECK_THROWS_AS(apply_saturation(mono, Tensor<double>::scalar(0.5), GrayscaleFallback::disabled), ContractError);
  auto same = apply_saturation(mono, Tensor<double>::scalar(1.0));
  CHECK(support::max_abs_diff(same.data(), mono.data()) < 1e-15);
  auto flat = apply_saturation(mono, Tensor<double>::scalar(0.0));
  for (std::size_t n = 0; n < 2; ++n) {
    double m = 0;
    for (std::size_t i = 0; i < 16; ++i) m += mono.data()[n * 16 + i];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) CHECK(flat.data()[n * 16 + i] == doctest::Approx(m).epsilon(1e-12));
  }
  auto r = finite_diff_gradcheck(
      [&](const Tensor<double>& v) { return sum(mul(apply_saturation(v, Tensor<double>::scalar(0.7)), v)); }, mono,
      1e-6);
  CHECK(r.max_relative_error < 1e-6);
}

TEST_CASE("saturation gradients away from the clamp") {
  auto x = random_tensor({1, 3, 4, 4}, 10, 0.35, 0.65);
  auto probe = random_tensor({1, 3, 4, 4}, 11);
  auto wrt_s = finite_diff_gradcheck(
      [&](const Tensor<double>& s) { return sum(mul(apply_saturation(x, s), probe)); }, Tensor<double>::scalar(0.8),
      1e-6);
  CHECK(wrt_s.max_relative_error < 1e-6);
  auto wrt_x = finite_diff_gradcheck(
      [&](const Tensor<double>& v) { return sum(mul(apply_saturation(v, Tensor<double>::scalar(1.3)), probe)); }, x,
      1e-6);
  CHECK(wrt_x.max_relative_error < 1e-6);
}

TEST_CASE("transform near identity and fidelity") {
  auto x = random_tensor({3, 3, 12, 12}, 12, 0, 1);
  CHECK(support::max_abs_diff(transform_at(x, AugParams::identity()).data(), x.data()) < 1e-4);
  for (double phi : {-2.0, 1.0}) {
    CHECK(support::max_abs_diff(transform_at(x, {0.0, phi, 1.0}).data(), x.data()) < 1e-4);
  }
  CHECK(mse(x, transform_at(x, AugParams::identity())).item() < 1e-12);
  CHECK(mse(x, transform_at(x, {1.0, 0.3, 0.0})).item() > 0.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    AugParams p{rng.uniform(), rng.uniform(-3, 3), rng.uniform(0, 2)};
    auto y = transform_at(x, p);
    for (double v : y.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK_THROWS_AS(transform_at(x, {1.5, 0, 1}), ContractError);
  CHECK_THROWS_AS(transform_at(x, {0.5, 0, 2.5}), ContractError);
}

TEST_CASE("projection into the valid box") {
  AugParams p{-0.2, 4.0, 2.7};
  CHECK_FALSE(p.valid());
  auto q = p.projected();
  CHECK(q.valid());
  CHECK(q.blur == 0.0);
  CHECK(q.angle == AugParams::kAngleMax);
  CHECK(q.saturation == 2.0);
  CHECK(AugParams{}.blur == 0.5);
  CHECK(AugParams{}.saturation == 0.75);
}

TEST_CASE("gradient of transform then model then CE w.r.t. every theta component") {
  auto model = support::tiny_model<double>(31);
  auto x = random_tensor({1, 3, 16, 16}, 32, 0.1, 0.9);
  const std::vector<ClassIndex> y{3};
  const AugParams theta{0.45, 0.6, 0.9};
  for (int which = 0; which < 3; ++which) {
    auto f = [&](const Tensor<double>& v) {
      auto t = make_aug_tensors<double>(theta, false);
      (which == 0 ? t.blur : which == 1 ? t.angle : t.saturation) = v;
      return softmax_cross_entropy(model.forward(transform(x, t)), y);
    };
    const double start = which == 0 ? theta.blur : which == 1 ? theta.angle : theta.saturation;
    auto r = finite_diff_gradcheck(f, Tensor<double>::scalar(start), 1e-5);
    CHECK(r.max_relative_error < 1e-4);
  }
}
