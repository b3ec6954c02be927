#pragma once

#include <span>
#include <vector>

#include "gadt/model.hpp"
#include "gadt/tensor.hpp"

namespace gadt {

/// Mean squared difference of two equally sized images.
template <typename T>
double image_mse(std::span<const T> a, std::span<const T> b);

/// 10 * log10(1 / MSE) for images in [0,1]; +infinity when identical.
template <typename T>
double psnr(std::span<const T> a, std::span<const T> b);

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5), per channel
/// then averaged. `shape` is [C,H,W] and both spans must match it.
template <typename T>
double ssim(std::span<const T> a, std::span<const T> b, const Shape& shape);

/// Percentage of masked images whose prediction differs from the label.
double success_rate(std::span<const ClassIndex> predictions, std::span<const ClassIndex> labels,
                    const std::vector<bool>& mask);

template <typename T>
double attack_success_rate(const Model<T>& target, const Tensor<T>& adversarials, std::span<const ClassIndex> labels,
                           const std::vector<bool>& clean_correct_mask);

/// True where the model's clean prediction equals the label.
std::vector<bool> correct_mask(std::span<const ClassIndex> predictions, std::span<const ClassIndex> labels);

}  // namespace gadt
