#pragma once

#include <array>
#include <cstddef>

#include "gadt/ops.hpp"
#include "gadt/tensor.hpp"

namespace gadt {

/// Augmentation parameters: motion-blur intensity in [0,1], blur direction
/// in [-pi, pi] radians, saturation factor in [0,2].
struct AugParams {
  double blur = 0.5;
  double angle = 0.0;
  double saturation = 0.75;

  static constexpr double kBlurMin = 0.0, kBlurMax = 1.0;
  static constexpr double kAngleMax = 3.14159265358979323846;
  static constexpr double kSaturationMin = 0.0, kSaturationMax = 2.0;

  /// (0, 0, 1): transform() is then exactly the identity map.
  static constexpr AugParams identity() { return {0.0, 0.0, 1.0}; }

  bool valid() const;
  /// Clamps each component into its valid interval.
  AugParams projected() const;

  std::array<double, 3> as_array() const { return {blur, angle, saturation}; }
  static AugParams from_array(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }

  bool operator==(const AugParams&) const = default;
};

/// Shape constants of the motion-blur kernel. For centred offsets the weight
/// is exp(-d_perp^2 / (2 s_perp^2) - d_par^2 / (2 s_par^2)), normalized, with
///   s_par(b)  = floor + b * size / 2
///   s_perp(b) = floor + (perp_max - floor) * tanh(b / perp_ramp)
/// At b = 0 both widths equal `floor`, whose Gaussian underflows to exactly
/// zero one pixel away, so the kernel is an exact delta.
struct BlurShape {
  std::size_t size = 7;
  double floor = 0.025;
  double perp_max = 0.3;
  double perp_ramp = 0.1;
};

enum class GrayscaleFallback { disabled, contrast };

template <typename T>
struct AugTensors {
  Tensor<T> blur;
  Tensor<T> angle;
  Tensor<T> saturation;
};

template <typename T>
AugTensors<T> make_aug_tensors(const AugParams& theta, bool requires_grad);

/// [size, size] kernel, differentiable w.r.t. the scalar tensors `blur` and `angle`.
template <typename T>
Tensor<T> blur_kernel(const Tensor<T>& blur, const Tensor<T>& angle, const BlurShape& shape = {});

/// Per-channel convolution with blur_kernel(blur, angle), replicate padding.
template <typename T>
Tensor<T> apply_motion_blur(const Tensor<T>& x, const Tensor<T>& blur, const Tensor<T>& angle,
                            const BlurShape& shape = {});

/// clamp01(gray + s * (x - gray)) with BT.601 luminance on [N,3,H,W]. With the
/// contrast fallback, 1-channel input uses the per-image mean instead of gray.
template <typename T>
Tensor<T> apply_saturation(const Tensor<T>& x, const Tensor<T>& saturation,
                           GrayscaleFallback fallback = GrayscaleFallback::contrast);

/// Motion blur followed by saturation; shared parameters for the whole batch.
template <typename T>
Tensor<T> transform(const Tensor<T>& x, const AugTensors<T>& theta, const BlurShape& shape = {},
                    GrayscaleFallback fallback = GrayscaleFallback::contrast);

/// Gradient-free convenience form. Throws ContractError for invalid parameters.
template <typename T>
Tensor<T> transform(const Tensor<T>& x, const AugParams& theta, const BlurShape& shape = {},
                    GrayscaleFallback fallback = GrayscaleFallback::contrast);

}  // namespace gadt
