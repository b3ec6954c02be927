#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gadt/tensor.hpp"

namespace gadt {

enum class PadMode { zero, replicate };

using ClassIndex = std::size_t;

// Elementwise arithmetic on identically shaped tensors.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Stride-1 same-size cross-correlation. input [N,C,H,W], kernel [O,C,kh,kw]
/// with odd kh and kw.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, PadMode padding);

/// Adds bias[c] to every element of channel c of an [N,C,H,W] tensor.
template <typename T> Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T> Tensor<T> relu(const Tensor<T>& x);

/// 2x2 average pooling with stride 2; H and W must be even.
template <typename T> Tensor<T> avg_pool2x2(const Tensor<T>& x);

/// x [N,D], weight [O,D], bias [O] -> x weight^T + bias, shape [N,O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Mean over the batch of -log softmax(logits)[label]. Log-sum-exp stabilized.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const ClassIndex> labels);

/// Per-row cross-entropy values without recording (logits [N,C]).
template <typename T>
std::vector<T> cross_entropy_rows(const Tensor<T>& logits, std::span<const ClassIndex> labels);

template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise clamp to [0,1]. The subgradient is 1 strictly inside the
/// interval and 0 wherever the input is <= 0 or >= 1.
template <typename T> Tensor<T> clamp01(const Tensor<T>& x);

/// Gathers x through an index map: out[i] = x[index[i]], or 0 where
/// index[i] < 0. Output takes `shape`. Backward scatters into x.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::ptrdiff_t> index, Shape shape);

/// Row-wise argmax of [N,C] logits; ties resolve to the lowest index.
template <typename T> std::vector<ClassIndex> argmax_rows(const Tensor<T>& logits);

}  // namespace gadt
