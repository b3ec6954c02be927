#include "gadt/diffaug.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gadt {

bool AugParams::valid() const {
  return std::isfinite(blur) && std::isfinite(angle) && std::isfinite(saturation) && blur >= kBlurMin &&
         blur <= kBlurMax && angle >= -kAngleMax && angle <= kAngleMax && saturation >= kSaturationMin &&
         saturation <= kSaturationMax;
}

AugParams AugParams::projected() const {
  return {std::clamp(blur, kBlurMin, kBlurMax), std::clamp(angle, -kAngleMax, kAngleMax),
          std::clamp(saturation, kSaturationMin, kSaturationMax)};
}

template <typename T>
AugTensors<T> make_aug_tensors(const AugParams& theta, bool requires_grad) {
  return {Tensor<T>::scalar(static_cast<T>(theta.blur), requires_grad),
          Tensor<T>::scalar(static_cast<T>(theta.angle), requires_grad),
          Tensor<T>::scalar(static_cast<T>(theta.saturation), requires_grad)};
}

template <typename T>
Tensor<T> blur_kernel(const Tensor<T>& blur, const Tensor<T>& angle, const BlurShape& shape) {
  const std::size_t k = shape.size;
  if (k < 3 || k % 2 == 0) throw ContractError("blur_kernel: size must be odd and >= 3, got " + std::to_string(k));
  const T b = blur.item();
  const T phi = angle.item();
  const T floor = static_cast<T>(shape.floor);
  const T ramp = static_cast<T>(shape.perp_ramp);
  const T half = static_cast<T>(k / 2);
  const T th = std::tanh(b / ramp);
  const T s_par = floor + b * static_cast<T>(k) / T(2);
  const T s_perp = floor + (static_cast<T>(shape.perp_max) - floor) * th;
  const T ds_par = static_cast<T>(k) / T(2);
  const T ds_perp = (static_cast<T>(shape.perp_max) - floor) * (T(1) - th * th) / ramp;
  const T c = std::cos(phi), s = std::sin(phi);

  const std::size_t n = k * k;
  std::vector<T> w(n), de_db(n), de_dphi(n);
  T total = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const T dx = static_cast<T>(j) - half;
      const T dy = static_cast<T>(i) - half;
      const T par = dx * c + dy * s;
      const T perp = -dx * s + dy * c;
      const T e = -perp * perp / (T(2) * s_perp * s_perp) - par * par / (T(2) * s_par * s_par);
      const std::size_t idx = i * k + j;
      w[idx] = std::exp(e);
      total += w[idx];
      de_db[idx] = perp * perp / (s_perp * s_perp * s_perp) * ds_perp + par * par / (s_par * s_par * s_par) * ds_par;
      de_dphi[idx] = par * perp * (T(1) / (s_perp * s_perp) - T(1) / (s_par * s_par));
    }
  }
  for (auto& v : w) v /= total;

  std::vector<T> weights = w;
  return make_result<T>({k, k}, std::move(weights), {blur, angle},
                        [w = std::move(w), de_db = std::move(de_db), de_dphi = std::move(de_dphi)](detail::Node<T>& node) {
                          // dw_ij/dp = w_ij (de_ij/dp - sum_kl w_kl de_kl/dp)
                          const auto n = w.size();
                          T mean_b = 0, mean_phi = 0, gw = 0, gw_b = 0, gw_phi = 0;
                          for (std::size_t i = 0; i < n; ++i) {
                            mean_b += w[i] * de_db[i];
                            mean_phi += w[i] * de_dphi[i];
                          }
                          for (std::size_t i = 0; i < n; ++i) {
                            const T gwi = node.grad[i] * w[i];
                            gw += gwi;
                            gw_b += gwi * de_db[i];
                            gw_phi += gwi * de_dphi[i];
                          }
                          auto& pb = *node.parents[0];
                          auto& pphi = *node.parents[1];
                          if (pb.requires_grad) grad_buffer(pb)[0] += gw_b - gw * mean_b;
                          if (pphi.requires_grad) grad_buffer(pphi)[0] += gw_phi - gw * mean_phi;
                        });
}

template <typename T>
Tensor<T> apply_motion_blur(const Tensor<T>& x, const Tensor<T>& blur, const Tensor<T>& angle,
                            const BlurShape& shape) {
  if (x.rank() != 4) throw DimensionError("apply_motion_blur: expected [N,C,H,W], got " + to_string(x.shape()));
  const auto kernel = blur_kernel(blur, angle, shape);
  const Shape planes{x.dim(0) * x.dim(1), 1, x.dim(2), x.dim(3)};
  auto out = conv2d(reshape(x, planes), reshape(kernel, {1, 1, shape.size, shape.size}), PadMode::replicate);
  return reshape(out, x.shape());
}

template <typename T>
Tensor<T> apply_saturation(const Tensor<T>& x, const Tensor<T>& saturation, GrayscaleFallback fallback) {
  if (x.rank() != 4) throw DimensionError("apply_saturation: expected [N,C,H,W], got " + to_string(x.shape()));
  const auto N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  const bool color = C == 3;
  if (!color && !(C == 1 && fallback == GrayscaleFallback::contrast)) {
    throw ContractError("apply_saturation: needs 3 channels (or 1 with the contrast fallback), got " +
                        std::to_string(C));
  }
  static constexpr double kLuma[3] = {0.299, 0.587, 0.114};
  const T s1 = saturation.item() - T(1);
  auto d = x.data();

  // Reference plane: luminance per pixel (colour) or the image mean (grey).
  std::vector<T> ref(color ? N * P : N);
  for (std::size_t n = 0; n < N; ++n) {
    const T* img = d.data() + n * C * P;
    if (color) {
      for (std::size_t p = 0; p < P; ++p)
        ref[n * P + p] = T(kLuma[0]) * img[p] + T(kLuma[1]) * img[P + p] + T(kLuma[2]) * img[2 * P + p];
    } else {
      T acc = 0;
      for (std::size_t p = 0; p < P; ++p) acc += img[p];
      ref[n] = acc / static_cast<T>(P);
    }
  }

  std::vector<T> pre(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t i = (n * C + ch) * P + p;
        const T r = color ? ref[n * P + p] : ref[n];
        pre[i] = d[i] + s1 * (d[i] - r);
      }
  std::vector<T> out(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) out[i] = std::clamp(pre[i], T(0), T(1));

  return make_result<T>(
      x.shape(), std::move(out), {x, saturation},
      [N, C, P, color, s1, pre = std::move(pre), ref = std::move(ref)](detail::Node<T>& node) {
        auto& px = *node.parents[0];
        auto& ps = *node.parents[1];
        std::vector<T> g(node.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = (pre[i] > T(0) && pre[i] < T(1)) ? node.grad[i] : T(0);
        if (ps.requires_grad) {
          T acc = 0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t ch = 0; ch < C; ++ch)
              for (std::size_t p = 0; p < P; ++p) {
                const std::size_t i = (n * C + ch) * P + p;
                acc += g[i] * (px.value[i] - (color ? ref[n * P + p] : ref[n]));
              }
          grad_buffer(ps)[0] += acc;
        }
        if (px.requires_grad) {
          auto& gx = grad_buffer(px);
          for (std::size_t n = 0; n < N; ++n) {
            if (color) {
              for (std::size_t p = 0; p < P; ++p) {
                const std::size_t b = n * C * P + p;
                const T gsum = g[b] + g[b + P] + g[b + 2 * P];
                for (std::size_t ch = 0; ch < 3; ++ch) {
                  const std::size_t i = b + ch * P;
                  gx[i] += g[i] + s1 * (g[i] - T(kLuma[ch]) * gsum);
                }
              }
            } else {
              T gsum = 0;
              for (std::size_t p = 0; p < P; ++p) gsum += g[n * P + p];
              const T gmean = gsum / static_cast<T>(P);
              for (std::size_t p = 0; p < P; ++p) {
                const std::size_t i = n * P + p;
                gx[i] += g[i] + s1 * (g[i] - gmean);
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> transform(const Tensor<T>& x, const AugTensors<T>& theta, const BlurShape& shape,
                    GrayscaleFallback fallback) {
  return apply_saturation(apply_motion_blur(x, theta.blur, theta.angle, shape), theta.saturation, fallback);
}

template <typename T>
Tensor<T> transform(const Tensor<T>& x, const AugParams& theta, const BlurShape& shape, GrayscaleFallback fallback) {
  if (!theta.valid()) throw ContractError("transform: augmentation parameters outside their valid ranges");
  return transform(x.detach(), make_aug_tensors<T>(theta, false), shape, fallback);
}

#define GADT_INSTANTIATE_DIFFAUG(T)                                                                       \
  template AugTensors<T> make_aug_tensors<T>(const AugParams&, bool);                                     \
  template Tensor<T> blur_kernel(const Tensor<T>&, const Tensor<T>&, const BlurShape&);                   \
  template Tensor<T> apply_motion_blur(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                       const BlurShape&);                                                 \
  template Tensor<T> apply_saturation(const Tensor<T>&, const Tensor<T>&, GrayscaleFallback);             \
  template Tensor<T> transform(const Tensor<T>&, const AugTensors<T>&, const BlurShape&, GrayscaleFallback); \
  template Tensor<T> transform(const Tensor<T>&, const AugParams&, const BlurShape&, GrayscaleFallback);

GADT_INSTANTIATE_DIFFAUG(float)
GADT_INSTANTIATE_DIFFAUG(double)

}  // namespace gadt
