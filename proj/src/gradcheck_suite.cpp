#include "gadt/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>

#include "gadt/attacks.hpp"
#include "gadt/diffaug.hpp"
#include "gadt/errors.hpp"
#include "gadt/gadt.hpp"
#include "gadt/gradcheck.hpp"
#include "gadt/model.hpp"
#include "gadt/ops.hpp"
#include "gadt/random.hpp"

namespace gadt {

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

namespace {

constexpr double kSmooth64 = 1e-6;
constexpr double kComposed64 = 1e-4;
constexpr double kTol32 = 1e-3;
constexpr double kStep = 1e-5;

std::vector<double> uniform(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

template <typename To>
Tensor<To> as(const std::vector<double>& v, const Shape& shape, bool grad = false) {
  std::vector<To> d(v.begin(), v.end());
  return Tensor<To>::from(shape, std::move(d), grad);
}

/// Component k of x as a differentiable scalar.
template <typename T>
Tensor<T> component(const Tensor<T>& x, std::size_t k) {
  std::vector<T> e(x.size(), T(0));
  e[k] = T(1);
  return sum(mul(x, Tensor<T>::from(x.shape(), std::move(e))));
}

/// Model with small random biases so no ReLU input sits exactly at zero.
template <typename T>
Model<T> checked_model(const std::string& arch, std::size_t side, std::uint64_t seed) {
  auto m = build_model<double>(architecture(arch, 3, side, side, 6), seed);
  Rng rng(mix_seed(seed, hash_name("bias")));
  for (auto& w : m.weights) {
    if (w.rank() == 1) {
      for (auto& v : w.mutable_data()) v = rng.uniform(-0.1, 0.1);
    }
  }
  return cast_model<T>(m);
}

class Runner {
 public:
  Runner(Precision mode) : mode_(mode) {}

  /// `f` is a generic callable taking Tensor<T> and returning a scalar Tensor<T>.
  template <typename F>
  void check(const std::string& name, bool composed, const std::vector<double>& x0, const Shape& shape, F&& f) {
    GradcheckCase c;
    c.name = name;
    c.kind = composed ? "composed" : "smooth";
    if (mode_ == Precision::f64) {
      c.tolerance = composed ? kComposed64 : kSmooth64;
      const auto r = finite_diff_gradcheck([&](const Tensor<double>& x) { return f(x); }, as<double>(x0, shape), kStep);
      c.max_error = r.max_relative_error;
      c.checked = r.checked;
    } else {
      c.tolerance = kTol32;
      auto xf = as<float>(x0, shape, true);
      f(xf).backward();
      const auto analytic = xf.grad();
      std::vector<double> numeric(x0.size());
      double scale = 0.0;
      for (std::size_t i = 0; i < x0.size(); ++i) {
        auto up = x0, down = x0;
        up[i] += kStep;
        down[i] -= kStep;
        numeric[i] = (f(as<double>(up, shape)).item() - f(as<double>(down, shape)).item()) / (2.0 * kStep);
        scale = std::max(scale, std::abs(numeric[i]));
      }
      for (std::size_t i = 0; i < x0.size(); ++i) {
        const double a = analytic[i];
        const double denom = std::max({std::abs(a), std::abs(numeric[i]), 1e-3 * scale, 1e-12});
        c.max_error = std::max(c.max_error, std::abs(a - numeric[i]) / denom);
      }
      c.checked = x0.size();
    }
    c.passed = std::isfinite(c.max_error) && c.max_error < c.tolerance;
    cases_.push_back(c);
  }

  std::vector<GradcheckCase> take() { return std::move(cases_); }

 private:
  Precision mode_;
  std::vector<GradcheckCase> cases_;
};

}  // namespace

std::vector<GradcheckCase> gradcheck_suite(Precision mode, std::uint64_t seed) {
  Runner run(mode);
  Rng rng(mix_seed(seed, hash_name("gradcheck")));

  // Weighted sums make every output element contribute a distinct gradient.
  const Shape img{2, 3, 6, 6};
  const auto x_img = uniform(rng, numel(img), 0.1, 0.9);
  const auto w_img = uniform(rng, numel(img), -1.0, 1.0);
  const Shape ker{4, 3, 3, 3};
  const auto k0 = uniform(rng, numel(ker), -0.5, 0.5);
  const Shape conv_out{2, 4, 6, 6};
  const auto w_conv = uniform(rng, numel(conv_out), -1.0, 1.0);

  const auto weighted = [](const auto& y, const std::vector<double>& w) {
    using T = typename std::decay_t<decltype(y)>::value_type;
    return sum(mul(y, as<T>(w, y.shape())));
  };

  for (auto pad : {PadMode::zero, PadMode::replicate}) {
    const std::string p = pad == PadMode::zero ? "zero" : "replicate";
    run.check("conv2d/" + p + "/input", false, x_img, img, [&](const auto& x) {
      using T = typename std::decay_t<decltype(x)>::value_type;
      return weighted(conv2d(x, as<T>(k0, ker), pad), w_conv);
    });
    run.check("conv2d/" + p + "/kernel", false, k0, ker, [&](const auto& k) {
      using T = typename std::decay_t<decltype(k)>::value_type;
      return weighted(conv2d(as<T>(x_img, img), k, pad), w_conv);
    });
  }

  const auto b0 = uniform(rng, 3, -0.5, 0.5);
  run.check("add_channel_bias", false, b0, {3}, [&](const auto& b) {
    using T = typename std::decay_t<decltype(b)>::value_type;
    return weighted(add_channel_bias(as<T>(x_img, img), b), w_img);
  });

  // Inputs kept at least 0.05 from the ReLU kink.
  auto x_signed = uniform(rng, numel(img), 0.05, 1.0);
  for (std::size_t i = 0; i < x_signed.size(); i += 2) x_signed[i] = -x_signed[i];
  run.check("relu", false, x_signed, img, [&](const auto& x) { return weighted(relu(x), w_img); });

  const auto w_pool = uniform(rng, 2 * 3 * 3 * 3, -1.0, 1.0);
  run.check("avg_pool2x2", false, x_img, img, [&](const auto& x) { return weighted(avg_pool2x2(x), w_pool); });

  const auto lin_x = uniform(rng, 4 * 5, -1.0, 1.0);
  const auto lin_w = uniform(rng, 3 * 5, -1.0, 1.0);
  const auto lin_b = uniform(rng, 3, -1.0, 1.0);
  const auto lin_out = uniform(rng, 4 * 3, -1.0, 1.0);
  run.check("linear/input", false, lin_x, {4, 5}, [&](const auto& x) {
    using T = typename std::decay_t<decltype(x)>::value_type;
    return weighted(linear(x, as<T>(lin_w, {3, 5}), as<T>(lin_b, {3})), lin_out);
  });
  run.check("linear/weight", false, lin_w, {3, 5}, [&](const auto& w) {
    using T = typename std::decay_t<decltype(w)>::value_type;
    return weighted(linear(as<T>(lin_x, {4, 5}), w, as<T>(lin_b, {3})), lin_out);
  });

  const auto logits = uniform(rng, 4 * 6, -3.0, 3.0);
  const std::vector<ClassIndex> labels{0, 3, 5, 2};
  run.check("softmax_cross_entropy", false, logits, {4, 6},
            [&](const auto& z) { return softmax_cross_entropy(z, std::span<const ClassIndex>(labels)); });

  const auto other = uniform(rng, numel(img), 0.0, 1.0);
  run.check("mse", false, x_img, img, [&](const auto& x) {
    using T = typename std::decay_t<decltype(x)>::value_type;
    return mse(x, as<T>(other, img));
  });

  auto x_clamp = uniform(rng, numel(img), -0.5, 1.5);
  for (auto& v : x_clamp) {
    if (std::abs(v) < 0.05) v += 0.1;
    if (std::abs(v - 1.0) < 0.05) v += 0.1;
  }
  run.check("clamp01", false, x_clamp, img, [&](const auto& x) { return weighted(clamp01(x), w_img); });

  run.check("gather/resize_pad", false, x_img, img, [&](const auto& x) {
    return weighted(dim_transform(x, 1.0, mix_seed(seed, 5), 0.5), w_img);
  });

  const Shape kshape{7, 7};
  const auto w_kernel = uniform(rng, 49, -1.0, 1.0);
  const double angle0 = 0.4;
  for (double b : {0.2, 0.5, 0.9}) {
    run.check("blur_kernel/intensity@" + std::to_string(b).substr(0, 3), false, {b}, {1}, [&](const auto& bt) {
      using T = typename std::decay_t<decltype(bt)>::value_type;
      return weighted(blur_kernel(bt, Tensor<T>::scalar(static_cast<T>(angle0))), w_kernel);
    });
  }
  for (double a : {-2.0, 0.4, 1.3}) {
    run.check("blur_kernel/angle@" + std::to_string(a).substr(0, 4), false, {a}, {1}, [&](const auto& at) {
      using T = typename std::decay_t<decltype(at)>::value_type;
      return weighted(blur_kernel(Tensor<T>::scalar(T(0.5)), at), w_kernel);
    });
  }

  // Saturation inputs kept inside (0.3, 0.7) so s = 0.75 never reaches the clamp.
  const auto x_mid = uniform(rng, numel(img), 0.3, 0.7);
  run.check("saturation/input", false, x_mid, img, [&](const auto& x) {
    using T = typename std::decay_t<decltype(x)>::value_type;
    return weighted(apply_saturation(x, Tensor<T>::scalar(T(0.75))), w_img);
  });
  run.check("saturation/factor", false, {0.75}, {1}, [&](const auto& s) {
    using T = typename std::decay_t<decltype(s)>::value_type;
    return weighted(apply_saturation(as<T>(x_mid, img), s), w_img);
  });
  const Shape gray_img{2, 1, 6, 6};
  const auto x_gray = uniform(rng, numel(gray_img), 0.3, 0.7);
  const auto w_gray = uniform(rng, numel(gray_img), -1.0, 1.0);
  run.check("saturation/contrast_fallback", false, x_gray, gray_img, [&](const auto& x) {
    using T = typename std::decay_t<decltype(x)>::value_type;
    return weighted(apply_saturation(x, Tensor<T>::scalar(T(0.75))), w_gray);
  });

  const AugParams theta0{0.5, 0.3, 0.75};
  const auto theta_vec = std::vector<double>{theta0.blur, theta0.angle, theta0.saturation};
  const auto transformed = [](const auto& theta, const auto& x) {
    using T = typename std::decay_t<decltype(theta)>::value_type;
    AugTensors<T> p{component(theta, 0), component(theta, 1), component(theta, 2)};
    return transform(x, p);
  };
  run.check("transform/theta", true, theta_vec, {3}, [&](const auto& th) {
    using T = typename std::decay_t<decltype(th)>::value_type;
    return weighted(transformed(th, as<T>(x_mid, img)), w_img);
  });
  run.check("transform/input", true, x_mid, img, [&](const auto& x) {
    using T = typename std::decay_t<decltype(x)>::value_type;
    return weighted(transformed(as<T>(theta_vec, {3}), x), w_img);
  });

  const std::size_t side = 16;
  const Shape one{1, 3, side, side};
  const auto x_model = uniform(rng, numel(one), 0.3, 0.7);
  const std::vector<ClassIndex> y1{2};
  const auto small64 = checked_model<double>("small", side, mix_seed(seed, 1));
  const auto small32 = cast_model<float>(small64);
  const auto wide64 = checked_model<double>("wide", side, mix_seed(seed, 2));
  const auto wide32 = cast_model<float>(wide64);
  const auto pick = [](const auto& tag, const auto& m64, const auto& m32) -> decltype(auto) {
    using T = typename std::decay_t<decltype(tag)>::value_type;
    if constexpr (std::is_same_v<T, double>) return (m64);
    else return (m32);
  };
  for (double lambda : {0.0, 1.0}) {
    run.check("loss_trans/theta/lambda=" + std::to_string(static_cast<int>(lambda)), true, theta_vec, {3},
              [&](const auto& th) {
                using T = typename std::decay_t<decltype(th)>::value_type;
                const auto& model = pick(th, small64, small32);
                const auto x = as<T>(x_model, one);
                return loss_trans(x, transformed(th, x), std::span<const ClassIndex>(y1), model, lambda);
              });
  }
  run.check("model/small/input", true, x_model, one, [&](const auto& x) {
    return softmax_cross_entropy(pick(x, small64, small32).forward(x), std::span<const ClassIndex>(y1));
  });
  run.check("model/wide/input", true, x_model, one, [&](const auto& x) {
    return softmax_cross_entropy(pick(x, wide64, wide32).forward(x), std::span<const ClassIndex>(y1));
  });
  return run.take();
}

}  // namespace gadt
