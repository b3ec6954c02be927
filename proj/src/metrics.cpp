#include "gadt/metrics.hpp"

#include <cmath>
#include <limits>

#include "gadt/errors.hpp"

namespace gadt {

namespace {

template <typename T>
void check_same(std::span<const T> a, std::span<const T> b, const char* what) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(what) + ": sizes differ (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw DimensionError(std::string(what) + ": empty image");
}

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> gaussian_window() {
  std::vector<double> g(kWindow);
  double total = 0.0;
  const double centre = (kWindow - 1) / 2.0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double d = static_cast<double>(i) - centre;
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Separable Gaussian filtering over the valid region.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t H, std::size_t W,
                                 const std::vector<double>& g) {
  const std::size_t oh = H - kWindow + 1, ow = W - kWindow + 1;
  std::vector<double> rows(H * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * img[y * W + x + k];
      rows[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace

template <typename T>
double image_mse(std::span<const T> a, std::span<const T> b) {
  check_same(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

template <typename T>
double psnr(std::span<const T> a, std::span<const T> b) {
  const double m = image_mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

template <typename T>
double ssim(std::span<const T> a, std::span<const T> b, const Shape& shape) {
  check_same(a, b, "ssim");
  if (shape.size() != 3 || numel(shape) != a.size()) {
    throw DimensionError("ssim: shape " + to_string(shape) + " does not describe " + std::to_string(a.size()) +
                         " values as [C,H,W]");
  }
  const std::size_t C = shape[0], H = shape[1], W = shape[2];
  if (H < kWindow || W < kWindow) throw DimensionError("ssim: image smaller than the 11x11 window");
  bool identical = true;
  for (std::size_t i = 0; i < a.size() && identical; ++i) identical = a[i] == b[i];
  if (identical) return 1.0;

  const auto g = gaussian_window();
  const std::size_t plane = H * W;
  double total = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = static_cast<double>(a[c * plane + i]);
      y[i] = static_cast<double>(b[c * plane + i]);
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, H, W, g), my = filter_valid(y, H, W, g);
    const auto sxx = filter_valid(xx, H, W, g), syy = filter_valid(yy, H, W, g), sxy = filter_valid(xy, H, W, g);
    double s = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cxy = sxy[i] - mx[i] * my[i];
      s += ((2.0 * mx[i] * my[i] + kC1) * (2.0 * cxy + kC2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
    }
    total += s / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(C);
}

std::vector<bool> correct_mask(std::span<const ClassIndex> predictions, std::span<const ClassIndex> labels) {
  if (predictions.size() != labels.size()) throw DimensionError("correct_mask: prediction/label count mismatch");
  std::vector<bool> mask(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) mask[i] = predictions[i] == labels[i];
  return mask;
}

double success_rate(std::span<const ClassIndex> predictions, std::span<const ClassIndex> labels,
                    const std::vector<bool>& mask) {
  if (predictions.size() != labels.size() || mask.size() != labels.size()) {
    throw DimensionError("success_rate: predictions, labels and mask must have equal length");
  }
  std::size_t n = 0, fooled = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!mask[i]) continue;
    ++n;
    if (predictions[i] != labels[i]) ++fooled;
  }
  if (n == 0) throw ContractError("success_rate: empty clean-correct mask");
  return 100.0 * static_cast<double>(fooled) / static_cast<double>(n);
}

template <typename T>
double attack_success_rate(const Model<T>& target, const Tensor<T>& adversarials, std::span<const ClassIndex> labels,
                           const std::vector<bool>& clean_correct_mask) {
  const auto pred = predict(target, adversarials);
  return success_rate(pred, labels, clean_correct_mask);
}

#define GADT_INSTANTIATE_METRICS(T)                                                  \
  template double image_mse(std::span<const T>, std::span<const T>);                \
  template double psnr(std::span<const T>, std::span<const T>);                     \
  template double ssim(std::span<const T>, std::span<const T>, const Shape&);       \
  template double attack_success_rate(const Model<T>&, const Tensor<T>&, std::span<const ClassIndex>, \
                                      const std::vector<bool>&);

GADT_INSTANTIATE_METRICS(float)
GADT_INSTANTIATE_METRICS(double)

}  // namespace gadt
